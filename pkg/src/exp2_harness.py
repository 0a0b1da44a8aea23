# Copyright (c) 2025 Harrold Holdings GmbH
# Licensed under the Apache License, Version 2.0
# See LICENSE file in the project root for full license information.

"""
Particle-counting critique loop.

The analyst answers the counting prompt, the reviewer critiques that exchange,
and the analyst revises once. A revision counts as improved when it lands
strictly closer to the ground-truth count.
"""

import json
import logging
import re
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .backends import ChatBackend
from .chat import Message, assistant, user
from .prompting import PromptTemplateSet, build_exp2_reviewer_prompt, build_exp2_revision_prompt

logger = logging.getLogger("image_debate.exp2")

_LABELED_COUNT_RE = re.compile(r"Identified Particles Larger Than 10 Microns:\s*(\d+)", re.IGNORECASE)
# A standalone integer: not part of a decimal, signed number or exponent, not glued to letters
_INTEGER_RE = re.compile(r"(?<![\w.\-^])(\d+)(?!\w|\.\d)")
# Unit after a number: "10 um", "10-micron", "10 square micrometers", "10 sq. um", "10 um^2", "10^2"
_UNIT_SUFFIX_RE = re.compile(
    r"[\s\-]*(?:(?:square|sq\.?)\s*)?(?:µm|μm|um\b|micrometers?|micrometres?|microns?|px\b|pixels?|nm\b|%|²|\^)",
    re.IGNORECASE,
)


class CountExtractionFailed(ValueError):
    """No integer answer could be read from an analyst response."""

    def __init__(self, message: str, round_number: int | None = None):
        super().__init__(message if round_number is None else f"round {round_number}: {message}")
        self.round_number = round_number


class EmptyRecordSet(ValueError):
    """summarize_exp2 was given no records."""


class FixtureError(ValueError):
    """A replay fixture is unreadable or malformed."""


@dataclass(frozen=True)
class CritiqueLoopRecord:
    """One image's first answer, critique, revision and ground truth."""

    image_id: str
    first_answer: int
    critique: str
    revised_answer: int
    correct_answer: int
    first_response: str = ""
    revised_response: str = ""

    @property
    def improved(self) -> bool:
        return improved(self.first_answer, self.revised_answer, self.correct_answer)

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary."""
        return {
            "image_id": self.image_id,
            "first_answer": self.first_answer,
            "critique": self.critique,
            "revised_answer": self.revised_answer,
            "correct_answer": self.correct_answer,
            "improved": self.improved,
            "first_response": self.first_response,
            "revised_response": self.revised_response,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CritiqueLoopRecord":
        return cls(
            image_id=str(data["image_id"]),
            first_answer=int(data["first_answer"]),
            critique=data.get("critique", ""),
            revised_answer=int(data["revised_answer"]),
            correct_answer=int(data["correct_answer"]),
            first_response=data.get("first_response", ""),
            revised_response=data.get("revised_response", ""),
        )


@dataclass(frozen=True)
class Exp2Summary:
    """Improvement rate over a set of critique loops."""

    records: list[CritiqueLoopRecord]
    improvement_rate: float

    @property
    def improved_count(self) -> int:
        return sum(1 for r in self.records if r.improved)

    @property
    def headers(self) -> list[str]:
        return ["Image", "First", "Revised", "Improved", "Correct"]

    @property
    def table(self) -> list[list[str]]:
        return [
            [r.image_id, str(r.first_answer), str(r.revised_answer), "Yes" if r.improved else "No", str(r.correct_answer)]
            for r in self.records
        ]

    def to_dict(self) -> dict[str, Any]:
        return {
            "improvement_rate": self.improvement_rate,
            "improved": self.improved_count,
            "total": len(self.records),
        }


def extract_count(text: str) -> int:
    """
    Read the analyst's particle count.

    The labeled form "Identified Particles Larger Than 10 Microns: <n>" wins
    (last occurrence). Otherwise the last standalone non-negative integer that
    is not followed by a unit is taken.

    Raises:
        CountExtractionFailed: If no candidate integer exists
    """
    labeled = _LABELED_COUNT_RE.findall(text)
    if labeled:
        return int(labeled[-1])

    candidates = [int(m.group(1)) for m in _INTEGER_RE.finditer(text) if not _UNIT_SUFFIX_RE.match(text, m.end())]
    if not candidates:
        raise CountExtractionFailed("no integer answer found")
    return candidates[-1]


def improved(first: int, revised: int, truth: int) -> bool:
    """True iff the revision is strictly closer to the truth."""
    return abs(revised - truth) < abs(first - truth)


def run_critique_loop(
    image_id: str,
    analyst: ChatBackend,
    reviewer: ChatBackend,
    templates: PromptTemplateSet,
    truth: int,
) -> CritiqueLoopRecord:
    """
    Run analyst -> reviewer critique -> analyst revision for one image.

    Args:
        image_id: Image identifier
        analyst: Backend that counts particles
        reviewer: Backend that critiques the first answer
        templates: Prompt templates
        truth: Ground-truth count

    Returns:
        CritiqueLoopRecord

    Raises:
        ValueError: If truth is negative
        CountExtractionFailed: If either analyst answer has no integer
        BackendError: From either backend
    """
    if truth < 0:
        raise ValueError(f"truth must be non-negative, got {truth}")

    round1 = templates.exp2_analyst_round1
    analyst_messages: list[Message] = [user(round1)]
    first = analyst.complete(analyst_messages)
    analyst_messages.append(assistant(first.content))

    critique = reviewer.complete([user(build_exp2_reviewer_prompt(templates, round1, first.content))]).content

    analyst_messages.append(user(build_exp2_revision_prompt(templates, critique)))
    revised = analyst.complete(analyst_messages)

    first_answer = _count(first.content, 1)
    revised_answer = _count(revised.content, 2)

    record = CritiqueLoopRecord(
        image_id=image_id,
        first_answer=first_answer,
        critique=critique,
        revised_answer=revised_answer,
        correct_answer=truth,
        first_response=first.content,
        revised_response=revised.content,
    )
    logger.info(f"{image_id}: {first_answer} -> {revised_answer} (truth {truth}, improved={record.improved})")
    return record


def _count(text: str, round_number: int) -> int:
    try:
        return extract_count(text)
    except CountExtractionFailed as e:
        raise CountExtractionFailed("no integer answer found", round_number) from e


def summarize_exp2(records: list[CritiqueLoopRecord]) -> Exp2Summary:
    """
    Improvement rate = improved / total.

    Raises:
        EmptyRecordSet: If records is empty
    """
    if not records:
        raise EmptyRecordSet("No critique-loop records to summarize")
    improved_count = sum(1 for r in records if r.improved)
    return Exp2Summary(records=list(records), improvement_rate=improved_count / len(records))


def load_fixture(path: str | Path) -> list[dict[str, Any]]:
    """
    Load a replay fixture: a JSON list of {image_id, first_answer?, revised_answer?, correct_answer}.

    Raises:
        FixtureError: If the file is not JSON, or not a list of objects with
            image_id and non-negative integer counts
    """
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise FixtureError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from e

    if not isinstance(data, list):
        raise FixtureError(f"{path}: fixture must be a JSON list")
    for i, row in enumerate(data):
        if not isinstance(row, dict) or "image_id" not in row or "correct_answer" not in row:
            raise FixtureError(f"{path}: row {i} needs image_id and correct_answer")
        for key in ("first_answer", "revised_answer", "correct_answer"):
            value = row.get(key, 0)
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise FixtureError(f"{path}: row {i} {key} must be a non-negative integer, got {value!r}")
    return data


def records_from_fixture(rows: list[dict[str, Any]]) -> list[CritiqueLoopRecord]:
    """
    Build records directly from fixture rows that carry both answers.

    Raises:
        FixtureError: If a row has no recorded answers
    """
    records = []
    for row in rows:
        if "first_answer" not in row or "revised_answer" not in row:
            raise FixtureError(f"Fixture row {row['image_id']} has no recorded answers; supply backends instead")
        records.append(CritiqueLoopRecord.from_dict(row))
    return records


@dataclass
class LoopInputs:
    """Private backends and ground truth for one image."""

    image_id: str
    analyst: ChatBackend
    reviewer: ChatBackend
    truth: int


def run_critique_loops(
    image_ids: list[str],
    factory: Callable[[str], LoopInputs],
    templates: PromptTemplateSet,
    max_workers: int = 1,
) -> list[CritiqueLoopRecord]:
    """Run independent critique loops; records come back in `image_ids` order."""

    def run_one(image_id: str) -> CritiqueLoopRecord:
        inputs = factory(image_id)
        return run_critique_loop(inputs.image_id, inputs.analyst, inputs.reviewer, templates, inputs.truth)

    if max_workers <= 1:
        return [run_one(image_id) for image_id in image_ids]

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = [pool.submit(run_one, image_id) for image_id in image_ids]
        return [future.result() for future in futures]
