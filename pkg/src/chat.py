# Copyright (c) 2025 Harrold Holdings GmbH
# Licensed under the Apache License, Version 2.0
# See LICENSE file in the project root for full license information.

"""
Shared chat types for the debate engine and experiment harnesses.

Messages flow into and out of backends; Events make up the per-round
Transcript; Verdicts classify reviewer responses.
"""

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

AGREE_MARKER = "I agree"
DISAGREE_MARKER = "I do not agree"

_AGREE_RE = re.compile(re.escape(AGREE_MARKER), re.IGNORECASE)
_DISAGREE_RE = re.compile(re.escape(DISAGREE_MARKER), re.IGNORECASE)


class Role(str, Enum):
    """Author of a chat message."""

    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"
    TOOL = "tool"


@dataclass(frozen=True)
class ToolCall:
    """A tool invocation requested by an assistant message."""

    name: str
    args: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary."""
        return {"name": self.name, "args": dict(self.args)}


@dataclass(frozen=True)
class Message:
    """One chat message."""

    role: Role
    content: str
    tool_calls: tuple[ToolCall, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary."""
        data: dict[str, Any] = {"role": self.role.value, "content": self.content}
        if self.tool_calls:
            data["tool_calls"] = [call.to_dict() for call in self.tool_calls]
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Message":
        """Build a message from its dictionary form."""
        calls = tuple(ToolCall(name=c["name"], args=dict(c.get("args", {}))) for c in data.get("tool_calls", []))
        return cls(role=Role(data["role"]), content=data["content"], tool_calls=calls)


def system(content: str) -> Message:
    return Message(Role.SYSTEM, content)


def user(content: str) -> Message:
    return Message(Role.USER, content)


def assistant(content: str) -> Message:
    return Message(Role.ASSISTANT, content)


class EventKind(str, Enum):
    """Kind of transcript event."""

    ASSISTANT_TEXT = "assistant_text"
    TOOL_CALL = "tool_call"
    TOOL_RESULT = "tool_result"


@dataclass(frozen=True)
class Event:
    """
    One transcript entry.

    `text` is set for assistant text; `name`/`args` for tool calls;
    `name`/`payload` for tool results.
    """

    kind: EventKind
    seq: int
    text: str = ""
    name: str = ""
    args: dict[str, str] = field(default_factory=dict)
    payload: str = ""

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary."""
        data: dict[str, Any] = {"type": "event", "kind": self.kind.value, "seq": self.seq}
        if self.kind is EventKind.ASSISTANT_TEXT:
            data["text"] = self.text
        elif self.kind is EventKind.TOOL_CALL:
            data["name"] = self.name
            data["args"] = dict(self.args)
        else:
            data["name"] = self.name
            data["payload"] = self.payload
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Event":
        """Build an event from its dictionary form."""
        return cls(
            kind=EventKind(data["kind"]),
            seq=data["seq"],
            text=data.get("text", ""),
            name=data.get("name", ""),
            args=dict(data.get("args", {})),
            payload=data.get("payload", ""),
        )


@dataclass
class Transcript:
    """
    Ordered record of one round.

    Events are only added through the append helpers, which assign dense,
    strictly increasing sequence numbers starting at 0.
    """

    round_id: str
    events: list[Event] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.round_id:
            raise ValueError("Transcript round_id must be non-empty")
        for expected, event in enumerate(self.events):
            if event.seq != expected:
                raise ValueError(f"Transcript seq must be dense from 0: got {event.seq} at position {expected}")

    @property
    def next_seq(self) -> int:
        return len(self.events)

    def add_text(self, text: str) -> Event:
        """Append an assistant-text event."""
        return self._append(Event(EventKind.ASSISTANT_TEXT, self.next_seq, text=text))

    def add_tool_call(self, name: str, args: dict[str, str] | None = None) -> Event:
        """Append a tool-call event."""
        return self._append(Event(EventKind.TOOL_CALL, self.next_seq, name=name, args=dict(args or {})))

    def add_tool_result(self, name: str, payload: str) -> Event:
        """
        Append a tool-result event.

        Raises:
            ValueError: If no earlier tool call has the same name
        """
        if not any(e.kind is EventKind.TOOL_CALL and e.name == name for e in self.events):
            raise ValueError(f"Tool result for '{name}' has no preceding tool call")
        return self._append(Event(EventKind.TOOL_RESULT, self.next_seq, name=name, payload=payload))

    def _append(self, event: Event) -> Event:
        self.events.append(event)
        return event

    def tool_calls(self, name: str | None = None) -> list[Event]:
        """Return tool-call events, optionally filtered by exact name."""
        return [e for e in self.events if e.kind is EventKind.TOOL_CALL and (name is None or e.name == name)]

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary."""
        return {"round_id": self.round_id, "events": [e.to_dict() for e in self.events]}


class VerdictValue(str, Enum):
    """Reviewer stance."""

    AGREE = "agree"
    DISAGREE = "disagree"
    AMBIGUOUS = "ambiguous"


@dataclass(frozen=True)
class Verdict:
    """Classification of a reviewer response."""

    value: VerdictValue
    marker_offset: int | None = None

    def __post_init__(self) -> None:
        if (self.marker_offset is None) != (self.value is VerdictValue.AMBIGUOUS):
            raise ValueError("marker_offset must be set iff the verdict is not ambiguous")

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary."""
        return {"value": self.value.value, "marker_offset": self.marker_offset}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Verdict":
        return cls(VerdictValue(data["value"]), data.get("marker_offset"))


def detect_verdict(text: str) -> Verdict:
    """
    Classify a reviewer response by its agreement markers.

    The disagree marker wins whenever present, anywhere in the text; the agree
    marker is only consulted afterwards. Matching is case-insensitive and
    full-text, since reviewers are told to open with a bracketed objective.

    Args:
        text: Reviewer response (may be empty)

    Returns:
        Verdict with the offset of the first matching marker
    """
    match = _DISAGREE_RE.search(text)
    if match:
        return Verdict(VerdictValue.DISAGREE, match.start())

    match = _AGREE_RE.search(text)
    if match:
        return Verdict(VerdictValue.AGREE, match.start())

    return Verdict(VerdictValue.AMBIGUOUS)
