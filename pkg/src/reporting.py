# Copyright (c) 2025 Harrold Holdings GmbH
# Licensed under the Apache License, Version 2.0
# See LICENSE file in the project root for full license information.

"""
Run directories, JSON Lines persistence and summary reports.

Layout of one run directory:

    <run-dir>/
        manifest.json       run id, mode, config digest, timestamps
        transcripts.jsonl   every transcript event and debate, merged in round order
        rounds.jsonl        one record per round (or per image)
        summary.md          markdown table plus the headline percentage
        summary.csv         the same table as CSV

Everything except manifest.json is a pure function of the run's inputs.
"""

import csv
import json
import logging
import shutil
from collections.abc import Iterable
from dataclasses import dataclass, field
from datetime import UTC, datetime
from enum import Enum
from pathlib import Path
from typing import Any

from tabulate import tabulate

from .chat import Transcript
from .debate import DebateOutcome
from .exp1_harness import RoundRecord, RoundScore, ScoreVerdict, compute_accuracy
from .exp2_harness import CritiqueLoopRecord, Exp2Summary, summarize_exp2

logger = logging.getLogger("image_debate.reporting")

MANIFEST_FILE = "manifest.json"
TRANSCRIPTS_FILE = "transcripts.jsonl"
ROUNDS_FILE = "rounds.jsonl"
SUMMARY_MD_FILE = "summary.md"
SUMMARY_CSV_FILE = "summary.csv"
STAGING_DIR = ".staging"


class EmptyInput(ValueError):
    """A report was requested over no data."""


class RunMode(str, Enum):
    """What a run directory holds."""

    EXP1_INDIVIDUAL = "exp1_individual"
    EXP1_TEAMWORK = "exp1_teamwork"
    EXP2 = "exp2"
    ORACLE_ONLY = "oracle_only"
    DEBATE = "debate"


@dataclass
class RunManifest:
    """Run metadata."""

    run_id: str
    mode: RunMode
    config_digest: str
    started_at: str = field(default_factory=lambda: datetime.now(UTC).isoformat())
    finished_at: str | None = None
    round_count: int = 0

    def finish(self, round_count: int) -> None:
        self.round_count = round_count
        self.finished_at = datetime.now(UTC).isoformat()

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary."""
        return {
            "run_id": self.run_id,
            "mode": self.mode.value,
            "config_digest": self.config_digest,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "round_count": self.round_count,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunManifest":
        return cls(
            run_id=data["run_id"],
            mode=RunMode(data["mode"]),
            config_digest=data["config_digest"],
            started_at=data["started_at"],
            finished_at=data.get("finished_at"),
            round_count=data.get("round_count", 0),
        )


@dataclass(frozen=True)
class ReportTable:
    """Headers plus rows of text cells."""

    headers: list[str]
    rows: list[list[str]]

    def __post_init__(self) -> None:
        for i, row in enumerate(self.rows):
            if len(row) != len(self.headers):
                raise ValueError(f"Row {i} has {len(row)} cells, expected {len(self.headers)}")

    def to_markdown(self) -> str:
        return tabulate(self.rows, headers=self.headers, tablefmt="github", disable_numparse=True)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.headers)
            writer.writerows(self.rows)
        return path


def format_percentage(fraction: float) -> str:
    """Percentage with one decimal place, e.g. 0.19354 -> '19.4%'."""
    return f"{fraction * 100:.1f}%"


def write_jsonl(records: Iterable[dict[str, Any]], path: str | Path, append: bool = False) -> int:
    """
    Write one JSON object per line.

    Returns:
        Number of lines written

    Raises:
        OSError: If the file cannot be written
    """
    path = Path(path)
    count = 0
    with open(path, "a" if append else "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
            count += 1
    return count


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    """Read a JSON Lines file, skipping blank lines."""
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def transcript_lines(source: Transcript | RoundRecord | list[DebateOutcome], round_id: str | None = None) -> list[dict[str, Any]]:
    """
    Flatten a transcript, a round or a list of debates into JSON Lines records.

    A round yields its transcript events followed by one line per debate.
    """
    if isinstance(source, RoundRecord):
        lines = transcript_lines(source.transcript) if source.transcript is not None else []
        return lines + transcript_lines(source.debates, source.round_id)

    if isinstance(source, Transcript):
        return [{"round_id": source.round_id, **event.to_dict()} for event in source.events]

    return [{"type": "debate", "round_id": round_id, "index": i, **debate.to_dict()} for i, debate in enumerate(source)]


def write_transcript(source: Transcript | RoundRecord | list[DebateOutcome], path: str | Path, round_id: str | None = None) -> int:
    """
    Write a transcript (or debates) as JSON Lines.

    Returns:
        Number of records written

    Raises:
        OSError: If the sink is not writable
    """
    return write_jsonl(transcript_lines(source, round_id), path)


def render_summary(data: Exp2Summary | list[RoundScore], records: list[RoundRecord] | None = None) -> tuple[ReportTable, str]:
    """
    Build the summary table and headline text.

    Args:
        data: Either an Exp2Summary or the round scores of an ROI run
        records: Round records matching the scores (adds detail columns)

    Returns:
        Tuple of (ReportTable, headline text)

    Raises:
        EmptyInput: If there is nothing to summarize
        NoScorableRounds: If no round could be scored
    """
    if isinstance(data, Exp2Summary):
        if not data.records:
            raise EmptyInput("No critique-loop records")
        table = ReportTable(headers=data.headers, rows=data.table)
        text = f"Improvement rate: {format_percentage(data.improvement_rate)} ({data.improved_count}/{len(data.records)} images improved)"
        return table, text

    if not data:
        raise EmptyInput("No round scores")

    accuracy = compute_accuracy(data)
    if records is not None:
        by_id = {r.round_id: r for r in records}
        rows = []
        for score in data:
            record = by_id[score.round_id]
            rows.append(
                [
                    score.round_id,
                    record.last_photo_name or "-",
                    str(record.function_call_count),
                    record.final_roi or "-",
                    score.verdict.value,
                ]
            )
        table = ReportTable(headers=["Round", "Last Photo", "Function Calls", "ROI", "Score"], rows=rows)
    else:
        table = ReportTable(headers=["Round", "Score"], rows=[[s.round_id, s.verdict.value] for s in data])

    text = (
        f"Accuracy: {format_percentage(accuracy.accuracy)} "
        f"({accuracy.correct}/{accuracy.scorable} scorable rounds correct, {accuracy.unscorable} unscorable)"
    )
    return table, text


class RunDirectory:
    """One run's output directory."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    @classmethod
    def create(cls, base_dir: str | Path, run_id: str) -> "RunDirectory":
        """Create <base_dir>/<run_id>."""
        run_dir = cls(Path(base_dir) / run_id)
        run_dir.path.mkdir(parents=True, exist_ok=False)
        return run_dir

    def file(self, name: str) -> Path:
        return self.path / name

    def write_manifest(self, manifest: RunManifest) -> Path:
        path = self.file(MANIFEST_FILE)
        path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def read_manifest(self) -> RunManifest:
        return RunManifest.from_dict(json.loads(self.file(MANIFEST_FILE).read_text(encoding="utf-8")))

    def stage_transcript(self, record: RoundRecord) -> int:
        """Write one round's transcript to its own staging file."""
        staging = self.path / STAGING_DIR
        staging.mkdir(exist_ok=True)
        return write_transcript(record, staging / f"{record.round_id}.jsonl")

    def merge_transcripts(self, round_ids: list[str]) -> int:
        """
        Concatenate staged transcripts into transcripts.jsonl in `round_ids` order.

        Returns:
            Total number of lines
        """
        staging = self.path / STAGING_DIR
        total = 0
        target = self.file(TRANSCRIPTS_FILE)
        target.write_text("", encoding="utf-8")
        for round_id in round_ids:
            staged = staging / f"{round_id}.jsonl"
            if staged.exists():
                total += write_jsonl(read_jsonl(staged), target, append=True)
        shutil.rmtree(staging, ignore_errors=True)
        return total

    def write_rounds(self, rows: list[dict[str, Any]]) -> int:
        return write_jsonl(rows, self.file(ROUNDS_FILE))

    def read_rounds(self) -> list[dict[str, Any]]:
        return read_jsonl(self.file(ROUNDS_FILE))

    def write_summary(self, table: ReportTable, text: str, title: str) -> None:
        """Write summary.md and summary.csv."""
        markdown = f"# {title}\n\n{text}\n\n{table.to_markdown()}\n"
        self.file(SUMMARY_MD_FILE).write_text(markdown, encoding="utf-8")
        table.write_csv(self.file(SUMMARY_CSV_FILE))


def exp1_round_rows(records: list[RoundRecord], scores: list[RoundScore]) -> list[dict[str, Any]]:
    """rounds.jsonl rows for an ROI run: the round record plus its verdict."""
    verdicts = {s.round_id: s.verdict.value for s in scores}
    return [{**r.to_dict(), "verdict": verdicts.get(r.round_id, ScoreVerdict.UNSCORABLE.value)} for r in records]


def rerender(run_dir: RunDirectory) -> tuple[RunManifest, ReportTable, str, dict[str, Any]]:
    """
    Rebuild a run's summary from its manifest and rounds.jsonl.

    Returns:
        Tuple of (manifest, table, headline text, headline metrics)
    """
    manifest = run_dir.read_manifest()
    rows = run_dir.read_rounds()

    if manifest.mode is RunMode.EXP2:
        summary = summarize_exp2([CritiqueLoopRecord.from_dict(r) for r in rows])
        table, text = render_summary(summary)
        return manifest, table, text, {"rate": summary.improvement_rate, "mean_calls": None}

    if manifest.mode in (RunMode.EXP1_INDIVIDUAL, RunMode.EXP1_TEAMWORK):
        records = [RoundRecord.from_dict(r) for r in rows]
        scores = [RoundScore(r["round_id"], ScoreVerdict(r["verdict"])) for r in rows]
        table, text = render_summary(scores, records)
        mean_calls = sum(r.function_call_count for r in records) / len(records) if records else 0.0
        return manifest, table, text, {"rate": compute_accuracy(scores).accuracy, "mean_calls": mean_calls}

    raise EmptyInput(f"Run mode '{manifest.mode.value}' has no summary to render")


def compare_runs(results: list[tuple[RunManifest, dict[str, Any]]]) -> ReportTable:
    """Side-by-side table of several runs."""
    if not results:
        raise EmptyInput("No runs to compare")
    rows = []
    for manifest, metrics in results:
        mean_calls = metrics.get("mean_calls")
        rows.append(
            [
                manifest.run_id,
                manifest.mode.value,
                str(manifest.round_count),
                format_percentage(metrics["rate"]),
                "-" if mean_calls is None else f"{mean_calls:.1f}",
            ]
        )
    return ReportTable(headers=["Run", "Mode", "Rounds", "Rate", "Mean Calls"], rows=rows)
