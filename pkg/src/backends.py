# Copyright (c) 2025 Harrold Holdings GmbH
# Licensed under the Apache License, Version 2.0
# See LICENSE file in the project root for full license information.

"""
Chat-completion backends.

Two implementations share one interface:
- ScriptedBackend replays canned responses by call ordinal (test double and
  desk-scale stand-in for live models).
- HttpChatBackend posts chat messages to an HTTP endpoint and pulls the reply
  out of the response JSON with a configurable dot/index path.
"""

import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from time import monotonic
from typing import Any, Literal

import httpx
from tenacity import RetryCallState, Retrying, before_sleep_log, retry_if_exception, stop_after_attempt, stop_after_delay, wait_exponential

from .chat import Message, Role, ToolCall
from .key_manager import KeyManager
from .prompting import render_template

logger = logging.getLogger("image_debate.backends")

MAX_ATTEMPTS_LIMIT = 10
BODY_EXCERPT_CHARS = 300
MAX_BACKOFF = 60.0  # seconds, cap on a single backoff sleep


class BackendError(Exception):
    """Base class for backend failures."""


class BackendConfigError(ValueError):
    """A backend spec is invalid."""


class ScriptExhausted(BackendError):
    """A scripted backend was called more times than it has entries."""


class ScriptParseError(BackendError):
    """A script file record is malformed."""

    def __init__(self, line: int, reason: str):
        super().__init__(f"Script parse error on line {line}: {reason}")
        self.line = line


class HttpError(BackendError):
    """Non-success HTTP response or transport failure (status 0)."""

    def __init__(self, status: int, body_excerpt: str):
        super().__init__(f"HTTP {status}: {body_excerpt}")
        self.status = status
        self.body_excerpt = body_excerpt

    @property
    def retryable(self) -> bool:
        return self.status == 429 or self.status >= 500


class BackendTimeout(BackendError):
    """The request did not complete within the configured timeout."""


class MissingApiKey(BackendError):
    """The API key environment variable is unset."""

    def __init__(self, env_var: str):
        super().__init__(f"API key not found: set {env_var}")
        self.env_var = env_var


class ResponseShapeError(BackendError):
    """The response JSON does not contain text at the extraction path."""

    def __init__(self, path: str, reason: str):
        super().__init__(f"Cannot extract '{path}' from response: {reason}")
        self.path = path


@dataclass(frozen=True)
class RetryPolicy:
    """Transport retry settings for HTTP backends."""

    max_attempts: int = 3
    base_backoff: float = 1.0  # seconds
    timeout: float = 60.0  # seconds, per attempt
    # Wall-clock budget for one call, attempts and backoff included
    total_timeout: float | None = None

    def __post_init__(self) -> None:
        if not 1 <= self.max_attempts <= MAX_ATTEMPTS_LIMIT:
            raise BackendConfigError(f"max_attempts must be in [1, {MAX_ATTEMPTS_LIMIT}], got {self.max_attempts}")
        if self.timeout <= 0:
            raise BackendConfigError(f"timeout must be positive, got {self.timeout}")
        if self.total_timeout is not None and self.total_timeout <= 0:
            raise BackendConfigError(f"total_timeout must be positive, got {self.total_timeout}")
        if self.base_backoff < 0:
            raise BackendConfigError(f"base_backoff must be non-negative, got {self.base_backoff}")

    @property
    def deadline(self) -> float:
        """Seconds one call may take: total_timeout, else every attempt plus every backoff sleep."""
        if self.total_timeout is not None:
            return self.total_timeout
        backoff = sum(min(MAX_BACKOFF, self.base_backoff * 2**i) for i in range(self.max_attempts - 1))
        return self.max_attempts * self.timeout + backoff

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "RetryPolicy":
        data = data or {}
        return cls(
            max_attempts=int(data.get("max_attempts", 3)),
            base_backoff=float(data.get("base_backoff", 1.0)),
            timeout=float(data.get("timeout", 60.0)),
            total_timeout=float(data["total_timeout"]) if data.get("total_timeout") is not None else None,
        )


@dataclass(frozen=True)
class BackendSpec:
    """How to build one backend."""

    kind: Literal["scripted", "http"]
    path: str | None = None
    endpoint: str | None = None
    model: str | None = None
    extraction_path: str = "choices.0.message.content"
    api_key_env: str | None = None
    auth_header: str = "Authorization"
    retry: RetryPolicy = field(default_factory=RetryPolicy)

    def __post_init__(self) -> None:
        if self.kind == "scripted":
            if not self.path:
                raise BackendConfigError("Scripted backend requires 'path'")
        elif self.kind == "http":
            if not self.endpoint or not httpx.URL(self.endpoint).is_absolute_url:
                raise BackendConfigError(f"HTTP backend requires an absolute endpoint URL, got {self.endpoint!r}")
            if not self.model:
                raise BackendConfigError("HTTP backend requires 'model'")
            if not self.api_key_env:
                raise BackendConfigError("HTTP backend requires 'api_key_env'")
        else:
            raise BackendConfigError(f"Unknown backend kind: {self.kind}")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BackendSpec":
        """Build a spec from a config mapping."""
        data = dict(data)
        retry = RetryPolicy.from_dict(data.pop("retry", None))
        known = {"kind", "path", "endpoint", "model", "extraction_path", "api_key_env", "auth_header"}
        unknown = set(data) - known
        if unknown:
            raise BackendConfigError(f"Unknown backend spec keys: {', '.join(sorted(unknown))}")
        if "kind" not in data:
            raise BackendConfigError("Backend spec requires 'kind'")
        return cls(retry=retry, **data)


@dataclass(frozen=True)
class ScriptEntry:
    """One canned response."""

    index: int
    response: str
    tool_calls: tuple[ToolCall, ...] = ()


class ChatBackend(ABC):
    """
    Uniform chat-completion interface.

    Every call's input is recorded in `calls` so tests can assert on the
    prompts that were sent. One instance serves one logical caller.
    """

    def __init__(self, name: str = "backend"):
        self.name = name
        self.calls: list[tuple[Message, ...]] = []

    @property
    def call_count(self) -> int:
        return len(self.calls)

    def complete(self, messages: list[Message]) -> Message:
        """
        Return one assistant message for the conversation so far.

        Args:
            messages: Conversation, oldest first; may start with a system message

        Returns:
            Assistant message

        Raises:
            ValueError: If messages is empty
            BackendError: On backend failure
        """
        if not messages:
            raise ValueError("complete() requires at least one message")
        self.calls.append(tuple(messages))
        logger.debug(f"{self.name}: call {len(self.calls)} with {len(messages)} messages")
        return self._complete(list(messages))

    @abstractmethod
    def _complete(self, messages: list[Message]) -> Message:
        """Produce the reply."""


class ScriptedBackend(ChatBackend):
    """Replays entries in load order, ignoring the input."""

    def __init__(self, entries: list[ScriptEntry], name: str = "scripted"):
        super().__init__(name)
        self.entries = list(entries)
        self._cursor = 0

    @classmethod
    def from_responses(cls, responses: list[str], name: str = "scripted") -> "ScriptedBackend":
        """Build a backend from plain response strings."""
        return cls([ScriptEntry(i, text) for i, text in enumerate(responses)], name=name)

    @property
    def remaining(self) -> int:
        return len(self.entries) - self._cursor

    def peek_entries(self) -> list[ScriptEntry]:
        """Entries not yet replayed."""
        return self.entries[self._cursor :]

    def _complete(self, messages: list[Message]) -> Message:
        if self._cursor >= len(self.entries):
            raise ScriptExhausted(f"{self.name}: script exhausted after {len(self.entries)} responses")
        entry = self.entries[self._cursor]
        self._cursor += 1
        return Message(Role.ASSISTANT, entry.response, entry.tool_calls)


def load_script(path: str | Path, name: str | None = None) -> ScriptedBackend:
    """
    Load a JSON Lines script.

    Each non-blank line is {"response": text, "tool_calls": [{"name": text, "args": {...}}]?}.
    A response may be empty only when the record carries tool calls.

    Args:
        path: Script file
        name: Backend name for logs (defaults to the file stem)

    Returns:
        ScriptedBackend answering once per record

    Raises:
        FileNotFoundError: If the file does not exist
        ScriptParseError: With the 1-based line number of a malformed record
    """
    path = Path(path)
    entries: list[ScriptEntry] = []

    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ScriptParseError(line_no, f"invalid JSON ({e.msg})") from e
            entries.append(_parse_script_record(record, line_no, len(entries)))

    logger.debug(f"Loaded {len(entries)} script entries from {path}")
    return ScriptedBackend(entries, name=name or path.stem)


def _parse_script_record(record: Any, line_no: int, index: int) -> ScriptEntry:
    if not isinstance(record, dict):
        raise ScriptParseError(line_no, "record must be a JSON object")
    response = record.get("response")
    if not isinstance(response, str):
        raise ScriptParseError(line_no, "'response' must be a string")

    raw_calls = record.get("tool_calls") or []
    if not isinstance(raw_calls, list):
        raise ScriptParseError(line_no, "'tool_calls' must be a list")

    calls = []
    for raw in raw_calls:
        if not isinstance(raw, dict) or not isinstance(raw.get("name"), str) or not raw["name"]:
            raise ScriptParseError(line_no, "each tool call needs a non-empty 'name'")
        args = raw.get("args") or {}
        if not isinstance(args, dict):
            raise ScriptParseError(line_no, "tool call 'args' must be an object")
        calls.append(ToolCall(raw["name"], {str(k): str(v) for k, v in args.items()}))

    if not response and not calls:
        raise ScriptParseError(line_no, "empty response without tool calls")

    return ScriptEntry(index=index, response=response, tool_calls=tuple(calls))


def extract_path(data: Any, path: str) -> Any:
    """
    Walk a dot/index path such as "choices.0.message.content".

    Raises:
        ResponseShapeError: If a step is missing
    """
    current = data
    for step in path.split("."):
        if isinstance(current, list):
            if not step.isdigit() or int(step) >= len(current):
                raise ResponseShapeError(path, f"no index '{step}'")
            current = current[int(step)]
        elif isinstance(current, dict):
            if step not in current:
                raise ResponseShapeError(path, f"no key '{step}'")
            current = current[step]
        else:
            raise ResponseShapeError(path, f"cannot descend into {type(current).__name__} at '{step}'")
    return current


class HttpChatBackend(ChatBackend):
    """Chat backend over an OpenAI- or Gemini-shaped HTTP API."""

    def __init__(
        self,
        spec: BackendSpec,
        name: str = "http",
        key_manager: KeyManager | None = None,
        client: httpx.Client | None = None,
    ):
        """
        Initialize the HTTP backend.

        Args:
            spec: Backend spec with kind "http"
            name: Backend name for logs
            key_manager: Key lookup (defaults to environment variables)
            client: Optional pre-configured httpx client (for testing)
        """
        super().__init__(name)
        if spec.kind != "http":
            raise BackendConfigError(f"HttpChatBackend needs an http spec, got {spec.kind}")
        self.spec = spec
        self.key_manager = key_manager or KeyManager()
        self._client = client

    @property
    def client(self) -> httpx.Client:
        """Lazy initialization of the HTTP client."""
        if self._client is None:
            self._client = httpx.Client(timeout=self.spec.retry.timeout)
        return self._client

    def _headers(self, api_key: str) -> dict[str, str]:
        if self.spec.auth_header.lower() == "authorization":
            return {"Authorization": f"Bearer {api_key}"}
        return {self.spec.auth_header: api_key}

    def _body(self, messages: list[Message]) -> dict[str, Any]:
        wire = []
        for message in messages:
            # Tool output travels as user text
            role = "user" if message.role is Role.TOOL else message.role.value
            wire.append({"role": role, "content": message.content})
        return {"model": self.spec.model, "messages": wire}

    def _complete(self, messages: list[Message]) -> Message:
        api_key = self.key_manager.get_secret(self.spec.api_key_env)
        if not api_key:
            raise MissingApiKey(self.spec.api_key_env)

        headers = self._headers(api_key)
        body = self._body(messages)
        policy = self.spec.retry
        deadline = monotonic() + policy.deadline
        backoff = wait_exponential(multiplier=policy.base_backoff, min=0, max=MAX_BACKOFF)

        def wait_within_deadline(retry_state: RetryCallState) -> float:
            return max(0.0, min(backoff(retry_state), deadline - monotonic()))

        retrying = Retrying(
            stop=stop_after_attempt(policy.max_attempts) | stop_after_delay(policy.deadline),
            wait=wait_within_deadline,
            retry=retry_if_exception(_is_retryable),
            before_sleep=before_sleep_log(logger, logging.WARNING),
            reraise=True,
        )

        try:
            data = retrying(self._post, headers, body, deadline)
        except httpx.TimeoutException as e:
            raise BackendTimeout(f"{self.name}: no response within {policy.timeout}s after {policy.max_attempts} attempts") from e
        except httpx.TransportError as e:
            raise HttpError(0, str(e)[:BODY_EXCERPT_CHARS]) from e

        content = extract_path(data, self.spec.extraction_path)
        if not isinstance(content, str) or not content:
            raise ResponseShapeError(self.spec.extraction_path, "expected non-empty text")

        return Message(Role.ASSISTANT, content)

    def _post(self, headers: dict[str, str], body: dict[str, Any], deadline: float) -> Any:
        """
        One attempt. The body is streamed so a server trickling bytes cannot
        outlast the call deadline; httpx timeouts only bound each read.
        """
        remaining = deadline - monotonic()
        if remaining <= 0:
            raise self._deadline_exceeded()

        timeout = min(self.spec.retry.timeout, remaining)
        with self.client.stream("POST", self.spec.endpoint, headers=headers, json=body, timeout=timeout) as response:
            chunks = []
            for chunk in response.iter_bytes():
                chunks.append(chunk)
                if monotonic() > deadline:
                    raise self._deadline_exceeded()
        raw = b"".join(chunks)

        if response.status_code >= 400:
            raise HttpError(response.status_code, raw.decode("utf-8", errors="replace")[:BODY_EXCERPT_CHARS])
        try:
            return json.loads(raw)
        except ValueError as e:
            raise ResponseShapeError(self.spec.extraction_path, "response is not JSON") from e

    def _deadline_exceeded(self) -> BackendTimeout:
        return BackendTimeout(f"{self.name}: call exceeded its {self.spec.retry.deadline:g}s deadline")


def _is_retryable(exc: BaseException) -> bool:
    if isinstance(exc, httpx.TransportError):
        return True
    return isinstance(exc, HttpError) and exc.retryable


def build_backend(
    spec: BackendSpec,
    name: str = "backend",
    bindings: dict[str, str] | None = None,
    key_manager: KeyManager | None = None,
) -> ChatBackend:
    """
    Construct a fresh backend instance from a spec.

    Scripted paths may carry {round_id} or {image_id} placeholders, rendered
    with `bindings` so every round gets its own script.

    Raises:
        FileNotFoundError: If a scripted path does not exist
    """
    if spec.kind == "scripted":
        present = {k: v for k, v in (bindings or {}).items() if f"{{{k}}}" in spec.path}
        path = Path(render_template(spec.path, present))
        if not path.exists():
            raise FileNotFoundError(f"Script not found for backend '{name}': {path}")
        return load_script(path, name=name)
    return HttpChatBackend(spec, name=name, key_manager=key_manager)
