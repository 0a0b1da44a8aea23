# Copyright (c) 2025 Harrold Holdings GmbH
# Licensed under the Apache License, Version 2.0
# See LICENSE file in the project root for full license information.

"""
Region-of-interest experiment harness.

A scripted task driver replays take_image / image_analysis / list-summarize
tool calls. Every image_analysis call gets the responder's analysis, reviewed
through a debate unless the round runs single-agent. Each round yields the
last photo name, the final ROI label and the number of image_analysis calls,
which are then scored against per-image acceptable labels.
"""

import json
import logging
import re
import statistics
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

from .backends import ChatBackend, ScriptedBackend, load_script
from .chat import Message, Role, Transcript, system, user
from .debate import DebateConfig, DebateOutcome, run_debate, solo_outcome
from .prompting import FinalObjective, PromptTemplateSet, build_image_analysis_prompt, build_system_prompt

logger = logging.getLogger("image_debate.exp1")

TAKE_IMAGE_TOOL = "take_image"
IMAGE_ANALYSIS_TOOL = "image_analysis"
DEFAULT_SUMMARIZE_TOOL = "list-summarize"

_ROI_RE = re.compile(r"The final largest ROI is\s+(\w+)")
_ROUND_LINE_RE = re.compile(r"^(?P<round_id>\S+) \* Number of function calls: (?P<count>\d+) \* ROI Identified: (?P<label>[A-Za-z]|-)\.$")
NO_ROI_LABEL = "-"


class MalformedTaskScript(ValueError):
    """The task driver script violates the task-script rules."""


class MissingRoiStatement(ValueError):
    """No "The final largest ROI is <L>" sentence was found."""


class NoScorableRounds(ValueError):
    """Every round was unscorable."""


class GroundTruthError(ValueError):
    """The ground truth file is malformed."""


class ScoreVerdict(str, Enum):
    """Outcome of scoring one round."""

    CORRECT = "correct"
    INCORRECT = "incorrect"
    UNSCORABLE = "unscorable"


@dataclass
class TaskScript:
    """A scripted driver for one round."""

    round_id: str
    driver: ScriptedBackend
    summarize_tool: str = DEFAULT_SUMMARIZE_TOOL
    image_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.round_id:
            raise MalformedTaskScript("round_id must be non-empty")
        self.validate()
        if not self.image_names:
            self.image_names = [
                call.args.get("name", "") for entry in self.driver.peek_entries() for call in entry.tool_calls if call.name == TAKE_IMAGE_TOOL
            ]

    def validate(self) -> None:
        """
        Check that exactly one summarize call exists and that it is the final event.

        Raises:
            MalformedTaskScript: If the rule is violated
        """
        entries = self.driver.peek_entries()
        summarize_positions = [(i, j) for i, entry in enumerate(entries) for j, call in enumerate(entry.tool_calls) if call.name == self.summarize_tool]
        if len(summarize_positions) != 1:
            raise MalformedTaskScript(f"{self.round_id}: expected exactly one '{self.summarize_tool}' call, found {len(summarize_positions)}")
        i, j = summarize_positions[0]
        if i != len(entries) - 1 or j != len(entries[i].tool_calls) - 1:
            raise MalformedTaskScript(f"{self.round_id}: '{self.summarize_tool}' must be the final event")

    @classmethod
    def from_file(cls, path: str | Path, round_id: str, summarize_tool: str = DEFAULT_SUMMARIZE_TOOL) -> "TaskScript":
        """Load a driver script (JSON Lines, same format as backend scripts)."""
        return cls(round_id=round_id, driver=load_script(path, name=f"driver[{round_id}]"), summarize_tool=summarize_tool)


@dataclass
class RoundRecord:
    """Artifacts of one round."""

    round_id: str
    last_photo_name: str
    final_roi: str | None
    function_call_count: int
    debates: list[DebateOutcome] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    transcript: Transcript | None = None

    def __post_init__(self) -> None:
        if self.function_call_count != len(self.debates):
            raise ValueError(f"function_call_count ({self.function_call_count}) must equal the number of debates ({len(self.debates)})")

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary (the transcript is stored separately)."""
        return {
            "round_id": self.round_id,
            "last_photo_name": self.last_photo_name,
            "final_roi": self.final_roi,
            "function_call_count": self.function_call_count,
            "debates": [d.to_dict() for d in self.debates],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RoundRecord":
        return cls(
            round_id=data["round_id"],
            last_photo_name=data["last_photo_name"],
            final_roi=data.get("final_roi"),
            function_call_count=data["function_call_count"],
            debates=[DebateOutcome.from_dict(d) for d in data.get("debates", [])],
            warnings=list(data.get("warnings", [])),
        )


@dataclass(frozen=True)
class GroundTruthMap:
    """Acceptable ROI labels per image. An empty set means no label is correct."""

    entries: dict[str, frozenset[str]]

    def __post_init__(self) -> None:
        normalized: dict[str, frozenset[str]] = {}
        for image, labels in self.entries.items():
            for label in labels:
                if len(label) != 1 or not label.isalpha():
                    raise GroundTruthError(f"{image}: labels must be single letters, got {label!r}")
            normalized[image] = frozenset(label.lower() for label in labels)
        # Labels are stored lower-case; score_round compares lower-case ROIs
        object.__setattr__(self, "entries", normalized)


def load_ground_truth(path: str | Path) -> GroundTruthMap:
    """
    Load {"<image name>": ["a", "c", "d"], ...}.

    Raises:
        GroundTruthError: If the file is not a map of label lists
    """
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise GroundTruthError(f"{path}: invalid JSON ({e.msg})") from e

    if not isinstance(data, dict) or not all(isinstance(v, list) for v in data.values()):
        raise GroundTruthError(f"{path}: expected an object mapping image names to label lists")

    return GroundTruthMap({str(image): frozenset(str(label) for label in labels) for image, labels in data.items()})


@dataclass(frozen=True)
class RoundScore:
    """Score of one round."""

    round_id: str
    verdict: ScoreVerdict

    def to_dict(self) -> dict[str, Any]:
        return {"round_id": self.round_id, "verdict": self.verdict.value}


@dataclass(frozen=True)
class AccuracySummary:
    """Accuracy over scorable rounds."""

    accuracy: float
    correct: int
    incorrect: int
    unscorable: int

    @property
    def scorable(self) -> int:
        return self.correct + self.incorrect

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "correct": self.correct,
            "incorrect": self.incorrect,
            "unscorable": self.unscorable,
        }


@dataclass(frozen=True)
class Exp1Summary:
    """Run-level accuracy and efficiency."""

    rounds: int
    accuracy: AccuracySummary
    mean_function_calls: float
    min_function_calls: int
    max_function_calls: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "rounds": self.rounds,
            **self.accuracy.to_dict(),
            "mean_function_calls": self.mean_function_calls,
            "min_function_calls": self.min_function_calls,
            "max_function_calls": self.max_function_calls,
        }


def extract_final_roi(text: str, warnings: list[str] | None = None) -> str:
    """
    Pull the label out of "The final largest ROI is <L>".

    Labels are single letters, returned lower-case. When the sentence occurs
    more than once the last one wins and a warning is recorded; multi-character
    labels are skipped with a warning.

    Args:
        text: Summarizing text
        warnings: Optional list that receives warning strings

    Returns:
        The label

    Raises:
        MissingRoiStatement: If no valid statement is present
    """
    found: list[str] = []

    for token in _ROI_RE.findall(text):
        if len(token) == 1 and token.isalpha():
            found.append(token.lower())
        else:
            _warn(warnings, f"Rejected multi-character ROI label '{token}'")

    if not found:
        raise MissingRoiStatement("No 'The final largest ROI is <label>' statement found")

    if len(found) > 1:
        _warn(warnings, f"ROI statement appears {len(found)} times; using the last ('{found[-1]}')")

    return found[-1]


def _warn(warnings: list[str] | None, message: str) -> None:
    logger.warning(message)
    if warnings is not None:
        warnings.append(message)


def count_image_analysis_calls(transcript: Transcript) -> int:
    """Number of tool calls named exactly image_analysis."""
    return len(transcript.tool_calls(IMAGE_ANALYSIS_TOOL))


def run_round(
    task: TaskScript,
    responder: ChatBackend,
    reviewer: ChatBackend | None,
    templates: PromptTemplateSet,
    config: DebateConfig,
    objective: FinalObjective | None = None,
) -> RoundRecord:
    """
    Replay one round.

    Args:
        task: Driver script for the round
        responder: Backend answering image_analysis calls
        reviewer: Backend reviewing each analysis, or None for single-agent rounds
        templates: Prompt templates (flags included)
        config: Debate settings
        objective: Final objective appended to the system prompt

    Returns:
        RoundRecord with the transcript attached

    Raises:
        MalformedTaskScript: If the driver script is invalid
        BackendError: From any backend, with an "event seq <n>" note
    """
    objective = objective or FinalObjective()
    system_prompt = build_system_prompt(templates.flags, objective, templates)

    transcript = Transcript(task.round_id)
    driver_messages: list[Message] = [system(system_prompt)]
    debates: list[DebateOutcome] = []
    warnings: list[str] = []
    last_photo = ""
    final_roi: str | None = None
    finished = False

    logger.info(f"Round {task.round_id}: starting ({'teamwork' if reviewer else 'individual'})")

    while not finished:
        reply = task.driver.complete(driver_messages)
        driver_messages.append(reply)
        if reply.content:
            transcript.add_text(reply.content)

        for call in reply.tool_calls:
            event = transcript.add_tool_call(call.name, call.args)

            if call.name == TAKE_IMAGE_TOOL:
                last_photo = call.args.get("name") or call.args.get("image", "")
                payload = last_photo
            elif call.name == IMAGE_ANALYSIS_TOOL:
                try:
                    outcome = _analyze(call.args, last_photo, responder, reviewer, templates, config, system_prompt)
                except Exception as e:
                    e.add_note(f"event seq {event.seq}")
                    raise
                debates.append(outcome)
                payload = outcome.final_text
            elif call.name == task.summarize_tool:
                summary = call.args.get("summary") or reply.content
                payload = summary
                try:
                    final_roi = extract_final_roi(summary, warnings)
                except MissingRoiStatement as e:
                    _warn(warnings, f"{task.round_id}: {e}")
                finished = True
            else:
                _warn(warnings, f"{task.round_id}: unknown tool '{call.name}' ignored")
                payload = ""

            transcript.add_tool_result(call.name, payload)
            driver_messages.append(Message(Role.TOOL, payload))

    if not last_photo:
        _warn(warnings, f"{task.round_id}: no {TAKE_IMAGE_TOOL} call; last photo unknown")

    record = RoundRecord(
        round_id=task.round_id,
        last_photo_name=last_photo,
        final_roi=final_roi,
        function_call_count=count_image_analysis_calls(transcript),
        debates=debates,
        warnings=warnings,
        transcript=transcript,
    )
    logger.info(f"Round {task.round_id}: {record.function_call_count} image_analysis calls, ROI {final_roi or 'none'}")
    return record


def _analyze(
    args: dict[str, str],
    last_photo: str,
    responder: ChatBackend,
    reviewer: ChatBackend | None,
    templates: PromptTemplateSet,
    config: DebateConfig,
    system_prompt: str,
) -> DebateOutcome:
    image = args.get("image") or last_photo
    prompt = build_image_analysis_prompt(templates, image, args.get("description", ""), args.get("request", ""))
    history = [system(system_prompt), user(prompt)]
    initial = responder.complete(history).content

    if reviewer is None:
        return solo_outcome(initial)
    return run_debate(initial, responder, reviewer, templates, config, system_prompt=system_prompt, responder_history=history)


def score_round(record: RoundRecord, truth: GroundTruthMap) -> RoundScore:
    """Correct iff the final ROI is one of the last photo's acceptable labels."""
    if record.final_roi is None or record.last_photo_name not in truth.entries:
        return RoundScore(record.round_id, ScoreVerdict.UNSCORABLE)
    acceptable = truth.entries[record.last_photo_name]
    verdict = ScoreVerdict.CORRECT if record.final_roi.lower() in acceptable else ScoreVerdict.INCORRECT
    return RoundScore(record.round_id, verdict)


def compute_accuracy(scores: list[RoundScore]) -> AccuracySummary:
    """
    Accuracy = correct / (correct + incorrect); unscorable rounds are counted separately.

    Raises:
        NoScorableRounds: If no score is correct or incorrect
    """
    correct = sum(1 for s in scores if s.verdict is ScoreVerdict.CORRECT)
    incorrect = sum(1 for s in scores if s.verdict is ScoreVerdict.INCORRECT)
    unscorable = len(scores) - correct - incorrect

    if correct + incorrect == 0:
        raise NoScorableRounds(f"None of {len(scores)} rounds could be scored")

    return AccuracySummary(accuracy=correct / (correct + incorrect), correct=correct, incorrect=incorrect, unscorable=unscorable)


def summarize_exp1(records: list[RoundRecord], scores: list[RoundScore]) -> Exp1Summary:
    """Accuracy plus function-call statistics for a run."""
    calls = [r.function_call_count for r in records] or [0]
    return Exp1Summary(
        rounds=len(records),
        accuracy=compute_accuracy(scores),
        mean_function_calls=statistics.fmean(calls),
        min_function_calls=min(calls),
        max_function_calls=max(calls),
    )


def format_round_line(record: RoundRecord) -> str:
    """Render '<id> * Number of function calls: <n> * ROI Identified: <label>.'"""
    label = record.final_roi or NO_ROI_LABEL
    return f"{record.round_id} * Number of function calls: {record.function_call_count} * ROI Identified: {label}."


def parse_round_line(line: str) -> tuple[str, int, str | None]:
    """
    Parse a round line back into (round_id, function_call_count, label).

    Raises:
        ValueError: If the line does not match the format
    """
    match = _ROUND_LINE_RE.match(line.strip())
    if not match:
        raise ValueError(f"Not a round line: {line!r}")
    label = match.group("label")
    return match.group("round_id"), int(match.group("count")), None if label == NO_ROI_LABEL else label


@dataclass
class RoundInputs:
    """Private backends and driver for one round."""

    task: TaskScript
    responder: ChatBackend
    reviewer: ChatBackend | None


def run_rounds(
    round_ids: list[str],
    factory: Callable[[str], RoundInputs],
    templates: PromptTemplateSet,
    config: DebateConfig,
    objective: FinalObjective | None = None,
    max_workers: int = 1,
) -> list[RoundRecord]:
    """
    Run independent rounds, up to `max_workers` at a time.

    `factory` must return fresh backend instances for every round. Records
    come back in `round_ids` order regardless of completion order.
    """

    def run_one(round_id: str) -> RoundRecord:
        inputs = factory(round_id)
        return run_round(inputs.task, inputs.responder, inputs.reviewer, templates, config, objective)

    if max_workers <= 1:
        return [run_one(round_id) for round_id in round_ids]

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = [pool.submit(run_one, round_id) for round_id in round_ids]
        return [future.result() for future in futures]
