# Copyright (c) 2025 Harrold Holdings GmbH
# Licensed under the Apache License, Version 2.0
# See LICENSE file in the project root for full license information.

"""
Tests for chat backends.

HTTP behaviour runs against httpx.MockTransport; no network is used.
"""

import itertools
import json
import os

import httpx
import pytest

from src.backends import (
    BackendConfigError,
    BackendSpec,
    BackendTimeout,
    HttpChatBackend,
    HttpError,
    MissingApiKey,
    ResponseShapeError,
    RetryPolicy,
    ScriptedBackend,
    ScriptExhausted,
    ScriptParseError,
    build_backend,
    extract_path,
    load_script,
)
from src.chat import Message, Role, system, user

ENDPOINT = "https://models.example.com/v1/chat/completions"
KEY_ENV = "DEBATE_BACKEND_A_API_KEY"


def http_spec(**overrides):
    """HTTP spec with zero backoff so retries do not sleep."""
    values = {
        "kind": "http",
        "endpoint": ENDPOINT,
        "model": "model-a",
        "api_key_env": KEY_ENV,
        "retry": RetryPolicy(max_attempts=3, base_backoff=0.0, timeout=5.0),
    }
    values.update(overrides)
    return BackendSpec(**values)


def chat_reply(text):
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


def make_backend(handler, spec=None):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return HttpChatBackend(spec or http_spec(), name="a", client=client)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class TestScriptedBackend:
    """Tests for ScriptedBackend."""

    def test_replays_entry(self):
        """Test that the scripted reply ignores the input."""
        backend = ScriptedBackend.from_responses(["I agree."])
        reply = backend.complete([user("anything at all")])
        assert reply == Message(Role.ASSISTANT, "I agree.")

    def test_exhausted(self):
        """Test that a second call on a one-entry script raises ScriptExhausted."""
        backend = ScriptedBackend.from_responses(["only"])
        backend.complete([user("1")])
        with pytest.raises(ScriptExhausted):
            backend.complete([user("2")])

    def test_inputs_logged(self):
        """Test that every call's messages are recorded."""
        backend = ScriptedBackend.from_responses(["a", "b"])
        backend.complete([system("s"), user("first")])
        backend.complete([user("second")])
        assert backend.call_count == 2
        assert backend.calls[0][1].content == "first"
        assert backend.calls[1][0].content == "second"

    def test_empty_messages_rejected(self):
        """Test that complete() needs at least one message."""
        with pytest.raises(ValueError):
            ScriptedBackend.from_responses(["a"]).complete([])

    def test_replay_is_deterministic(self):
        """Test that two backends from the same script answer identically."""
        first = ScriptedBackend.from_responses(["x", "y", "z"])
        second = ScriptedBackend.from_responses(["x", "y", "z"])
        assert [first.complete([user("p")]).content for _ in range(3)] == [second.complete([user("q")]).content for _ in range(3)]


class TestLoadScript:
    """Tests for load_script."""

    def test_three_records(self, tmp_path):
        """Test that a three-record file answers exactly three times."""
        path = write_lines(tmp_path / "s.jsonl", [json.dumps({"response": r}) for r in ["one", "two", "three"]])
        backend = load_script(path)
        assert [backend.complete([user("x")]).content for _ in range(3)] == ["one", "two", "three"]
        with pytest.raises(ScriptExhausted):
            backend.complete([user("x")])

    def test_empty_file(self, tmp_path):
        """Test that an empty file gives a backend that fails on first call."""
        path = tmp_path / "empty.jsonl"
        path.write_text("", encoding="utf-8")
        backend = load_script(path)
        with pytest.raises(ScriptExhausted):
            backend.complete([user("x")])

    def test_malformed_line_number(self, tmp_path):
        """Test that parse errors carry the 1-based line number."""
        path = write_lines(tmp_path / "bad.jsonl", [json.dumps({"response": "ok"}), "", "{not json"])
        with pytest.raises(ScriptParseError) as exc_info:
            load_script(path)
        assert exc_info.value.line == 3

    def test_tool_calls_parsed(self, tmp_path):
        """Test that tool calls and their args are loaded."""
        record = {"response": "", "tool_calls": [{"name": "take_image", "args": {"name": "img_1", "hfw": 80}}]}
        path = write_lines(tmp_path / "driver.jsonl", [json.dumps(record)])
        reply = load_script(path).complete([user("go")])
        assert reply.tool_calls[0].name == "take_image"
        assert reply.tool_calls[0].args == {"name": "img_1", "hfw": "80"}

    def test_empty_response_without_tool_calls(self, tmp_path):
        """Test that an empty response needs tool calls."""
        path = write_lines(tmp_path / "s.jsonl", [json.dumps({"response": ""})])
        with pytest.raises(ScriptParseError):
            load_script(path)

    def test_entries_indexed_densely(self, tmp_path):
        """Test that entry indices run from 0 regardless of blank lines."""
        path = write_lines(tmp_path / "s.jsonl", [json.dumps({"response": "a"}), "", json.dumps({"response": "b"})])
        assert [e.index for e in load_script(path).entries] == [0, 1]


class TestBackendSpec:
    """Tests for BackendSpec and RetryPolicy validation."""

    def test_relative_endpoint_rejected(self):
        """Test that HTTP endpoints must be absolute URLs."""
        with pytest.raises(BackendConfigError):
            http_spec(endpoint="/v1/chat")

    def test_scripted_needs_path(self):
        """Test that scripted specs need a path."""
        with pytest.raises(BackendConfigError):
            BackendSpec(kind="scripted")

    @pytest.mark.parametrize("attempts", [0, 11])
    def test_max_attempts_bounds(self, attempts):
        """Test the max_attempts range."""
        with pytest.raises(BackendConfigError):
            RetryPolicy(max_attempts=attempts)

    def test_timeout_positive(self):
        """Test that timeout must be positive."""
        with pytest.raises(BackendConfigError):
            RetryPolicy(timeout=0)

    def test_deadline_default(self):
        """Test that the default deadline covers every attempt and every backoff sleep."""
        assert RetryPolicy(max_attempts=3, base_backoff=1.0, timeout=60.0).deadline == 183.0
        assert RetryPolicy(max_attempts=10, base_backoff=10.0, timeout=1.0).deadline == 10.0 + 10 + 20 + 40 + 60 * 6
        assert RetryPolicy(total_timeout=30.0).deadline == 30.0

    def test_total_timeout_positive(self):
        """Test that total_timeout must be positive when set."""
        with pytest.raises(BackendConfigError):
            RetryPolicy(total_timeout=0)
        assert RetryPolicy.from_dict({"total_timeout": "45"}).total_timeout == 45.0

    def test_from_dict_unknown_key(self):
        """Test that unknown spec keys are rejected."""
        with pytest.raises(BackendConfigError):
            BackendSpec.from_dict({"kind": "scripted", "path": "x", "colour": "blue"})

    def test_from_dict_retry(self):
        """Test that nested retry settings are parsed."""
        spec = BackendSpec.from_dict({"kind": "scripted", "path": "x", "retry": {"max_attempts": 5}})
        assert spec.retry.max_attempts == 5


class TestExtractPath:
    """Tests for extract_path."""

    def test_openai_shape(self):
        """Test the default chat-completions path."""
        assert extract_path(chat_reply("hi"), "choices.0.message.content") == "hi"

    def test_gemini_shape(self):
        """Test a candidates/parts path."""
        data = {"candidates": [{"content": {"parts": [{"text": "hello"}]}}]}
        assert extract_path(data, "candidates.0.content.parts.0.text") == "hello"

    def test_missing_step(self):
        """Test that a missing key raises ResponseShapeError."""
        with pytest.raises(ResponseShapeError):
            extract_path({"choices": []}, "choices.0.message.content")


class TestHttpChatBackend:
    """Tests for HttpChatBackend."""

    def test_request_shape(self, mocker):
        """Test the bearer header and message body."""
        mocker.patch.dict(os.environ, {KEY_ENV: "secret-key"})
        seen = {}

        def handler(request):
            seen["auth"] = request.headers.get("Authorization")
            seen["body"] = json.loads(request.content)
            return httpx.Response(200, json=chat_reply("I agree."))

        backend = make_backend(handler)
        reply = backend.complete([system("sys"), user("review this"), Message(Role.TOOL, "payload")])

        assert reply.content == "I agree."
        assert seen["auth"] == "Bearer secret-key"
        assert seen["body"]["model"] == "model-a"
        assert [m["role"] for m in seen["body"]["messages"]] == ["system", "user", "user"]

    def test_custom_auth_header(self, mocker):
        """Test that a custom header carries the raw key."""
        mocker.patch.dict(os.environ, {KEY_ENV: "goog-key"})
        seen = {}

        def handler(request):
            seen["key"] = request.headers.get("x-goog-api-key")
            seen["auth"] = request.headers.get("Authorization")
            return httpx.Response(200, json={"candidates": [{"content": {"parts": [{"text": "ok"}]}}]})

        spec = http_spec(auth_header="x-goog-api-key", extraction_path="candidates.0.content.parts.0.text")
        assert make_backend(handler, spec).complete([user("hi")]).content == "ok"
        assert seen["key"] == "goog-key"
        assert seen["auth"] is None

    def test_missing_key_before_network(self, mocker):
        """Test that an unset key raises MissingApiKey without any request."""
        mocker.patch.dict(os.environ, {}, clear=True)
        handler = mocker.Mock(return_value=httpx.Response(200, json=chat_reply("x")))

        with pytest.raises(MissingApiKey) as exc_info:
            make_backend(handler).complete([user("hi")])

        assert exc_info.value.env_var == KEY_ENV
        handler.assert_not_called()

    def test_retries_on_5xx_then_succeeds(self, mocker):
        """Test that 503 is retried."""
        mocker.patch.dict(os.environ, {KEY_ENV: "k"})
        responses = [httpx.Response(503, text="busy"), httpx.Response(200, json=chat_reply("done"))]
        handler = mocker.Mock(side_effect=responses)

        assert make_backend(handler).complete([user("hi")]).content == "done"
        assert handler.call_count == 2

    def test_retries_on_429_until_exhausted(self, mocker):
        """Test that 429 is retried up to max_attempts and then surfaces."""
        mocker.patch.dict(os.environ, {KEY_ENV: "k"})
        handler = mocker.Mock(side_effect=lambda request: httpx.Response(429, text="slow down"))

        with pytest.raises(HttpError) as exc_info:
            make_backend(handler).complete([user("hi")])

        assert exc_info.value.status == 429
        assert handler.call_count == 3

    def test_no_retry_on_4xx(self, mocker):
        """Test that 400 fails on the first attempt."""
        mocker.patch.dict(os.environ, {KEY_ENV: "k"})
        handler = mocker.Mock(side_effect=lambda request: httpx.Response(400, text="bad request"))

        with pytest.raises(HttpError) as exc_info:
            make_backend(handler).complete([user("hi")])

        assert exc_info.value.status == 400
        assert "bad request" in exc_info.value.body_excerpt
        assert handler.call_count == 1

    def test_timeout(self, mocker):
        """Test that repeated timeouts become BackendTimeout."""
        mocker.patch.dict(os.environ, {KEY_ENV: "k"})

        def handler(request):
            raise httpx.ReadTimeout("timed out", request=request)

        with pytest.raises(BackendTimeout):
            make_backend(handler).complete([user("hi")])

    def test_trickling_body_hits_deadline(self, mocker):
        """Test that a body arriving chunk by chunk past the call deadline raises BackendTimeout."""
        mocker.patch.dict(os.environ, {KEY_ENV: "k"})
        # Each clock read advances 10s: deadline at 25, the second chunk lands at 30
        mocker.patch("src.backends.monotonic", side_effect=itertools.count(0.0, 10.0))
        body = json.dumps(chat_reply("late")).encode()
        handler = mocker.Mock(side_effect=lambda request: httpx.Response(200, content=iter([body[:10], body[10:]])))
        spec = http_spec(retry=RetryPolicy(max_attempts=3, base_backoff=0.0, timeout=5.0, total_timeout=25.0))

        with pytest.raises(BackendTimeout, match="deadline"):
            make_backend(handler, spec).complete([user("hi")])

        assert handler.call_count == 1

    def test_retries_stop_at_deadline(self, mocker):
        """Test that no new attempt starts once the call deadline has passed."""
        mocker.patch.dict(os.environ, {KEY_ENV: "k"})
        mocker.patch("src.backends.monotonic", side_effect=itertools.count(0.0, 10.0))
        handler = mocker.Mock(side_effect=lambda request: httpx.Response(503, text="busy"))
        spec = http_spec(retry=RetryPolicy(max_attempts=5, base_backoff=0.0, timeout=5.0, total_timeout=25.0))

        with pytest.raises(BackendTimeout, match="deadline"):
            make_backend(handler, spec).complete([user("hi")])

        assert handler.call_count == 1

    def test_empty_content(self, mocker):
        """Test that an empty extracted text is a shape error."""
        mocker.patch.dict(os.environ, {KEY_ENV: "k"})
        backend = make_backend(lambda request: httpx.Response(200, json=chat_reply("")))
        with pytest.raises(ResponseShapeError):
            backend.complete([user("hi")])


class TestBuildBackend:
    """Tests for build_backend."""

    def test_scripted_path_per_round(self, tmp_path):
        """Test that {round_id} is filled in from bindings."""
        round_dir = tmp_path / "round_007"
        round_dir.mkdir()
        write_lines(round_dir / "responder.jsonl", [json.dumps({"response": "from round 7"})])

        spec = BackendSpec(kind="scripted", path=str(tmp_path / "{round_id}" / "responder.jsonl"))
        backend = build_backend(spec, "responder", {"round_id": "round_007", "image_id": "unused"})

        assert backend.complete([user("x")]).content == "from round 7"

    def test_missing_script(self, tmp_path):
        """Test that a missing script is reported."""
        spec = BackendSpec(kind="scripted", path=str(tmp_path / "missing.jsonl"))
        with pytest.raises(FileNotFoundError):
            build_backend(spec)

    def test_http(self):
        """Test that http specs build an HttpChatBackend."""
        assert isinstance(build_backend(http_spec(), "reviewer"), HttpChatBackend)
