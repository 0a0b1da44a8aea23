# Copyright (c) 2025 Harrold Holdings GmbH
# Licensed under the Apache License, Version 2.0
# See LICENSE file in the project root for full license information.

"""
Review/refine debate between a responder and a reviewer.

The responder's analysis is reviewed; on agreement the debate ends, otherwise
the responder refines its answer from the critique. After the cycle cap, the
responder's latest text is taken as final.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .backends import ChatBackend
from .chat import Message, Verdict, VerdictValue, assistant, detect_verdict, system, user
from .prompting import PromptTemplateSet, build_refine_prompt, build_reviewer_prompt

logger = logging.getLogger("image_debate.debate")

DEFAULT_MAX_REVIEW_CYCLES = 5


class AmbiguousPolicy(str, Enum):
    """What to do when a reviewer response has neither marker."""

    TREAT_AS_DISAGREE = "treat_as_disagree"
    ABORT = "abort"


class DebateStatus(str, Enum):
    """How a debate ended."""

    AGREED = "agreed"
    FALLBACK_AFTER_MAX_CYCLES = "fallback_after_max_cycles"
    # No reviewer configured (single-agent runs)
    UNREVIEWED = "unreviewed"


class AmbiguousAbort(Exception):
    """A reviewer verdict was ambiguous under the abort policy."""

    def __init__(self, cycle: int):
        super().__init__(f"Ambiguous reviewer verdict in debate cycle {cycle}")
        self.cycle = cycle


@dataclass(frozen=True)
class DebateConfig:
    """Debate loop settings."""

    max_review_cycles: int = DEFAULT_MAX_REVIEW_CYCLES
    ambiguous_policy: AmbiguousPolicy = AmbiguousPolicy.TREAT_AS_DISAGREE
    refine_after_final_disagreement: bool = True

    def __post_init__(self) -> None:
        if self.max_review_cycles < 1:
            raise ValueError(f"max_review_cycles must be >= 1, got {self.max_review_cycles}")

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "DebateConfig":
        data = data or {}
        return cls(
            max_review_cycles=int(data.get("max_review_cycles", DEFAULT_MAX_REVIEW_CYCLES)),
            ambiguous_policy=AmbiguousPolicy(data.get("ambiguous_policy", AmbiguousPolicy.TREAT_AS_DISAGREE.value)),
            refine_after_final_disagreement=bool(data.get("refine_after_final_disagreement", True)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "max_review_cycles": self.max_review_cycles,
            "ambiguous_policy": self.ambiguous_policy.value,
            "refine_after_final_disagreement": self.refine_after_final_disagreement,
        }


@dataclass(frozen=True)
class DebateCycleRecord:
    """One review plus the optional refinement it triggered."""

    cycle: int
    reviewer_text: str
    verdict: Verdict
    responder_refinement: str | None = None

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary."""
        return {
            "cycle": self.cycle,
            "reviewer_text": self.reviewer_text,
            "verdict": self.verdict.to_dict(),
            "responder_refinement": self.responder_refinement,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DebateCycleRecord":
        return cls(
            cycle=data["cycle"],
            reviewer_text=data["reviewer_text"],
            verdict=Verdict.from_dict(data["verdict"]),
            responder_refinement=data.get("responder_refinement"),
        )


@dataclass(frozen=True)
class DebateOutcome:
    """Result of one debate."""

    status: DebateStatus
    final_text: str
    cycles_used: int
    cycles: tuple[DebateCycleRecord, ...] = field(default_factory=tuple)
    ambiguous_count: int = 0

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary."""
        return {
            "status": self.status.value,
            "final_text": self.final_text,
            "cycles_used": self.cycles_used,
            "cycles": [c.to_dict() for c in self.cycles],
            "ambiguous_count": self.ambiguous_count,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DebateOutcome":
        return cls(
            status=DebateStatus(data["status"]),
            final_text=data["final_text"],
            cycles_used=data["cycles_used"],
            cycles=tuple(DebateCycleRecord.from_dict(c) for c in data.get("cycles", [])),
            ambiguous_count=data.get("ambiguous_count", 0),
        )


def solo_outcome(initial_text: str) -> DebateOutcome:
    """Outcome for an analysis that no reviewer saw."""
    return DebateOutcome(status=DebateStatus.UNREVIEWED, final_text=initial_text, cycles_used=0)


def run_debate(
    initial_text: str,
    responder: ChatBackend,
    reviewer: ChatBackend,
    templates: PromptTemplateSet,
    config: DebateConfig,
    system_prompt: str | None = None,
    responder_history: list[Message] | None = None,
) -> DebateOutcome:
    """
    Run the review/refine loop on one analysis.

    Each party keeps its own conversation for the length of this debate:
    the reviewer sees its system prompt plus the review prompts and its own
    replies; the responder continues from `responder_history` (the exchange
    that produced `initial_text`).

    Args:
        initial_text: The responder's first analysis
        responder: Backend that produced the analysis and refines it
        reviewer: Backend that critiques it
        templates: Prompt templates
        config: Loop settings
        system_prompt: Optional system prompt given to the reviewer
        responder_history: Messages that led to `initial_text`

    Returns:
        DebateOutcome

    Raises:
        ValueError: If initial_text is empty
        AmbiguousAbort: If a verdict is ambiguous under the abort policy
        BackendError: From either backend, with a "debate cycle <n>" note
    """
    if not initial_text:
        raise ValueError("run_debate requires a non-empty initial_text")

    reviewer_messages: list[Message] = [system(system_prompt)] if system_prompt else []
    responder_messages: list[Message] = list(responder_history or [])
    responder_messages.append(assistant(initial_text))

    current = initial_text
    cycles: list[DebateCycleRecord] = []
    ambiguous_count = 0

    for cycle in range(1, config.max_review_cycles + 1):
        reviewer_messages.append(user(build_reviewer_prompt(templates, current)))
        review = _call(reviewer, reviewer_messages, cycle)
        reviewer_messages.append(review)

        verdict = detect_verdict(review.content)
        logger.info(f"Debate cycle {cycle}/{config.max_review_cycles}: reviewer verdict {verdict.value.value}")

        if verdict.value is VerdictValue.AMBIGUOUS:
            ambiguous_count += 1
            logger.warning(f"Ambiguous reviewer verdict in cycle {cycle}")
            if config.ambiguous_policy is AmbiguousPolicy.ABORT:
                raise AmbiguousAbort(cycle)

        if verdict.value is VerdictValue.AGREE:
            cycles.append(DebateCycleRecord(cycle, review.content, verdict))
            return DebateOutcome(DebateStatus.AGREED, current, len(cycles), tuple(cycles), ambiguous_count)

        refinement = None
        if cycle < config.max_review_cycles or config.refine_after_final_disagreement:
            responder_messages.append(user(build_refine_prompt(templates, review.content)))
            reply = _call(responder, responder_messages, cycle)
            responder_messages.append(reply)
            refinement = reply.content
            current = refinement

        cycles.append(DebateCycleRecord(cycle, review.content, verdict, refinement))

    logger.info(f"No agreement after {config.max_review_cycles} cycles; keeping the responder's latest analysis")
    return DebateOutcome(DebateStatus.FALLBACK_AFTER_MAX_CYCLES, current, len(cycles), tuple(cycles), ambiguous_count)


def _call(backend: ChatBackend, messages: list[Message], cycle: int) -> Message:
    try:
        return backend.complete(messages)
    except Exception as e:
        e.add_note(f"debate cycle {cycle}")
        raise
