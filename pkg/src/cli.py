# Copyright (c) 2025 Harrold Holdings GmbH
# Licensed under the Apache License, Version 2.0
# See LICENSE file in the project root for full license information.

"""
Command-line entry point.

Usage:
    image-debate debate run --initial-file analysis.txt
    image-debate exp1 run --rounds 20 --mode teamwork --task corpus/ --truth truth.json
    image-debate exp2 run --fixture data/table2_fixture.json
    image-debate oracle count --image sem.png --bar-um 300 --bar-px 600 --exclude 0,900,1280,124
    image-debate prompts show
    image-debate report runs/<run-id> [runs/<run-id> ...]

Exit codes: 0 success, 1 usage or config error, 2 backend failure,
3 nothing scorable.
"""

import json
import logging
import sys
from collections.abc import Callable
from dataclasses import replace
from pathlib import Path
from typing import Any

import click
from tabulate import tabulate

from . import __version__
from .backends import BackendConfigError, BackendError, ChatBackend, build_backend, load_script
from .config import ConfigError, RunSettings, config_digest, generate_run_id, load_config
from .debate import AmbiguousAbort, run_debate
from .exp1_harness import (
    GroundTruthError,
    MalformedTaskScript,
    NoScorableRounds,
    RoundInputs,
    TaskScript,
    format_round_line,
    load_ground_truth,
    run_rounds,
    score_round,
    summarize_exp1,
)
from .exp2_harness import (
    CountExtractionFailed,
    EmptyRecordSet,
    FixtureError,
    LoopInputs,
    load_fixture,
    records_from_fixture,
    run_critique_loops,
    summarize_exp2,
)
from .key_manager import KeyManager
from .particle_oracle import (
    Connectivity,
    DirectScale,
    OracleError,
    ParticleOptions,
    Rect,
    ScaleBar,
    ScaleCalibration,
    calibrate,
    count_particles,
    load_gray_image,
    save_rgb_png,
    write_result_record,
)
from .prompting import PROMPT_CHANGES, PromptError, build_system_prompt
from .reporting import (
    EmptyInput,
    RunDirectory,
    RunManifest,
    RunMode,
    compare_runs,
    exp1_round_rows,
    render_summary,
    rerender,
)
from .utils import (
    console,
    create_progress,
    find_image_files,
    print_error,
    print_step,
    print_success,
    print_table,
    print_warning,
    sanitize_path,
    setup_logging,
)

logger = logging.getLogger("image_debate.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_BACKEND = 2
EXIT_NOT_SCORABLE = 3


def common_options(f: Callable[..., Any]) -> Callable[..., Any]:
    """--config, --verbose and --log-file for every subcommand."""
    f = click.option("--log-file", type=click.Path(dir_okay=False), default=None, help="Write logs to file")(f)
    f = click.option("-v", "--verbose", is_flag=True, help="Enable verbose logging")(f)
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Config file (YAML or JSON)")(f)
    return f


class ThresholdType(click.ParamType):
    """'otsu' or an integer level in 0-255."""

    name = "otsu|0-255"

    def convert(self, value: Any, param: click.Parameter | None, ctx: click.Context | None) -> str | int:
        if isinstance(value, int) and not isinstance(value, bool):
            level = value
        elif str(value).strip().lower() == "otsu":
            return "otsu"
        else:
            try:
                level = int(str(value).strip())
            except ValueError:
                self.fail(f"{value!r} is neither 'otsu' nor an integer", param, ctx)
        if not 0 <= level <= 255:
            self.fail(f"{level} is not in the range 0-255", param, ctx)
        return level


def bootstrap(config_path: str | None, verbose: bool, log_file: str | None) -> tuple[dict[str, Any], RunSettings]:
    """Load config, configure logging and build typed settings."""
    config = load_config(config_path)
    level = "DEBUG" if verbose else config["logging"]["level"]
    setup_logging(level, log_file or config["logging"].get("file"))
    return config, RunSettings.from_config(config)


@click.group()
@click.version_option(version=__version__, prog_name="image-debate")
def cli() -> None:
    """Two-agent review/refine debates over image-analysis tasks, with a classical particle-count oracle."""


# ----------------------------------------------------------------------------- debate


@cli.group()
def debate() -> None:
    """Single debates."""


@debate.command("run")
@click.option("--initial-file", type=click.Path(exists=True, dir_okay=False), required=True, help="File holding the responder's first analysis")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the outcome as JSON")
@common_options
def debate_run(initial_file: str, out: str | None, config_path: str | None, verbose: bool, log_file: str | None) -> None:
    """Run the review/refine loop on one analysis."""
    _, settings = bootstrap(config_path, verbose, log_file)
    key_manager = KeyManager(settings.secrets_backend)
    bindings = {"round_id": "debate"}
    responder = build_backend(settings.backend("responder"), "responder", bindings, key_manager)
    reviewer = build_backend(settings.backend("reviewer"), "reviewer", bindings, key_manager)

    system_prompt = build_system_prompt(settings.templates.flags, settings.objective, settings.templates)
    initial = Path(initial_file).read_text(encoding="utf-8")
    if not initial.strip():
        raise click.BadParameter(f"{initial_file} is empty", param_hint="--initial-file")
    outcome = run_debate(initial, responder, reviewer, settings.templates, settings.debate, system_prompt=system_prompt)

    if out:
        Path(out).write_text(json.dumps(outcome.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print_success(f"{outcome.status.value} after {outcome.cycles_used} cycle(s)")
    click.echo(outcome.final_text)


# ----------------------------------------------------------------------------- exp1


@cli.group()
def exp1() -> None:
    """Region-of-interest rounds."""


@exp1.command("run")
@click.option("--rounds", type=click.IntRange(min=1), default=None, help="Number of rounds (default: every round in the corpus)")
@click.option("--mode", type=click.Choice(["individual", "teamwork"]), default="teamwork", show_default=True)
@click.option("--task", type=click.Path(exists=True), required=True, help="Driver script, or a corpus directory with one sub-directory per round")
@click.option("--truth", type=click.Path(exists=True, dir_okay=False), default=None, help="Ground truth JSON (default: exp1.ground_truth)")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Base output directory (default: output_dir)")
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Rounds run in parallel (default: exp1.max_workers)")
@common_options
def exp1_run(
    rounds: int | None,
    mode: str,
    task: str,
    truth: str | None,
    out: str | None,
    workers: int | None,
    config_path: str | None,
    verbose: bool,
    log_file: str | None,
) -> None:
    """Replay task scripts, debate every image_analysis call and score the final ROIs."""
    config, settings = bootstrap(config_path, verbose, log_file)
    truth_path = truth or settings.ground_truth
    if not truth_path:
        raise click.UsageError("No ground truth: pass --truth or set exp1.ground_truth")
    ground_truth = load_ground_truth(truth_path)
    key_manager = KeyManager(settings.secrets_backend)
    teamwork = mode == "teamwork"

    task_path = sanitize_path(task)
    if task_path.is_dir():
        round_ids = sorted(p.name for p in task_path.iterdir() if p.is_dir())
        if rounds is not None:
            round_ids = round_ids[:rounds]
    else:
        round_ids = [f"round_{i:03d}" for i in range(1, (rounds or 1) + 1)]
    if not round_ids:
        raise click.UsageError(f"No rounds found under {task}")

    def backend_for(role: str, round_id: str) -> ChatBackend:
        staged = task_path / round_id / f"{role}.jsonl"
        if task_path.is_dir() and staged.exists():
            return load_script(staged, name=f"{role}[{round_id}]")
        return build_backend(settings.backend(role), role, {"round_id": round_id}, key_manager)

    def factory(round_id: str) -> RoundInputs:
        driver_path = task_path / round_id / "driver.jsonl" if task_path.is_dir() else task_path
        return RoundInputs(
            task=TaskScript.from_file(driver_path, round_id, settings.summarize_tool),
            responder=backend_for("responder", round_id),
            reviewer=backend_for("reviewer", round_id) if teamwork else None,
        )

    run_mode = RunMode.EXP1_TEAMWORK if teamwork else RunMode.EXP1_INDIVIDUAL
    run_dir = RunDirectory.create(out or settings.output_dir, generate_run_id())
    manifest = RunManifest(run_id=run_dir.path.name, mode=run_mode, config_digest=config_digest(config))
    run_dir.write_manifest(manifest)

    print_step(1, 3, f"Running {len(round_ids)} {mode} round(s)")
    records = run_rounds(round_ids, factory, settings.templates, settings.debate, settings.objective, workers or settings.max_workers)

    print_step(2, 3, "Scoring")
    scores = [score_round(r, ground_truth) for r in records]
    for record in records:
        run_dir.stage_transcript(record)
        click.echo(format_round_line(record))
        for warning in record.warnings:
            print_warning(warning)
    run_dir.merge_transcripts(round_ids)
    run_dir.write_rounds(exp1_round_rows(records, scores))
    manifest.finish(len(records))
    run_dir.write_manifest(manifest)

    print_step(3, 3, "Writing summary")
    summary = summarize_exp1(records, scores)
    table, text = render_summary(scores, records)
    run_dir.write_summary(table, f"{text}\n\nMean function calls: {summary.mean_function_calls:.1f}", title=f"ROI run ({mode})")
    print_table("Rounds", table.headers, table.rows)
    print_success(text)
    console.print(f"Run directory: {run_dir.path}")


# ----------------------------------------------------------------------------- exp2


@cli.group()
def exp2() -> None:
    """Particle-counting critique loops."""


def calibration_options(f: Callable[..., Any]) -> Callable[..., Any]:
    """Scale options shared by `exp2 run --images` and `oracle count`."""
    f = click.option("--exclude", default=None, help="Scale-bar exclusion rectangle x,y,w,h")(f)
    f = click.option("--bar-px", type=int, default=None, help="Scale bar length in pixels")(f)
    f = click.option("--bar-um", type=float, default=None, help="Scale bar length in microns")(f)
    f = click.option("--um-per-px", type=float, default=None, help="Microns per pixel")(f)
    return f


def resolve_calibration(um_per_px: float | None, bar_um: float | None, bar_px: int | None, exclude: str | None) -> tuple[ScaleCalibration, Rect | None]:
    """Build the calibration plus any exclusion region not carried by it."""
    region = _parse_rect(exclude) if exclude else None
    if um_per_px is not None:
        return calibrate(DirectScale(um_per_px)), region
    if bar_um is not None and bar_px is not None:
        return calibrate(ScaleBar(bar_um, bar_px, region)), None
    raise click.UsageError("Give --um-per-px, or --bar-um with --bar-px")


def _parse_rect(text: str) -> Rect:
    try:
        return Rect.parse(text)
    except ValueError as e:
        raise click.BadParameter(str(e), param_hint="--exclude") from e


@exp2.command("run")
@click.option("--fixture", type=click.Path(exists=True, dir_okay=False), default=None, help="JSON list of {image_id, first_answer?, revised_answer?, correct_answer}")
@click.option("--images", type=click.Path(exists=True, file_okay=False), default=None, help="Directory of 8-bit grayscale images; truth from the oracle")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Base output directory (default: output_dir)")
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Images processed in parallel")
@calibration_options
@common_options
def exp2_run(
    fixture: str | None,
    images: str | None,
    out: str | None,
    workers: int | None,
    um_per_px: float | None,
    bar_um: float | None,
    bar_px: int | None,
    exclude: str | None,
    config_path: str | None,
    verbose: bool,
    log_file: str | None,
) -> None:
    """Run (or replay) analyst -> critique -> revision loops and report the improvement rate."""
    if (fixture is None) == (images is None):
        raise click.UsageError("Give exactly one of --fixture or --images")

    config, settings = bootstrap(config_path, verbose, log_file)
    key_manager = KeyManager(settings.secrets_backend)
    run_dir = RunDirectory.create(out or settings.output_dir, generate_run_id())
    manifest = RunManifest(run_id=run_dir.path.name, mode=RunMode.EXP2, config_digest=config_digest(config))
    run_dir.write_manifest(manifest)

    truths: dict[str, int] = {}
    if fixture is not None:
        rows = load_fixture(fixture)
        truths = {str(row["image_id"]): int(row["correct_answer"]) for row in rows}
        replayable = all("first_answer" in row and "revised_answer" in row for row in rows)
    else:
        calibration, region = resolve_calibration(um_per_px, bar_um, bar_px, exclude)
        options = replace(settings.oracle, exclusion=region) if region else settings.oracle
        print_step(1, 3, "Counting particles with the oracle")
        image_paths = find_image_files(sanitize_path(images))
        with create_progress() as progress:
            counting = progress.add_task("Counting", total=len(image_paths))
            for path in image_paths:
                result = count_particles(load_gray_image(path), calibration, options)
                write_result_record(result, path.name, run_dir.file(f"oracle/{path.stem}.json"))
                save_rgb_png(result.overlay, run_dir.file(f"oracle/{path.stem}_overlay.png"))
                truths[path.stem] = result.count
                progress.advance(counting)
        replayable = False

    image_ids = list(truths)
    print_step(2, 3, f"Critique loops over {len(image_ids)} image(s)")
    if replayable:
        records = records_from_fixture(rows)
    else:

        def factory(image_id: str) -> LoopInputs:
            bindings = {"image_id": image_id}
            return LoopInputs(
                image_id=image_id,
                analyst=build_backend(settings.backend("analyst"), "analyst", bindings, key_manager),
                reviewer=build_backend(settings.backend("critic"), "critic", bindings, key_manager),
                truth=truths[image_id],
            )

        records = run_critique_loops(image_ids, factory, settings.templates, workers or settings.max_workers)

    run_dir.write_rounds([r.to_dict() for r in records])
    manifest.finish(len(records))
    run_dir.write_manifest(manifest)

    print_step(3, 3, "Writing summary")
    summary = summarize_exp2(records)
    table, text = render_summary(summary)
    run_dir.write_summary(table, text, title="Particle counting critique loop")
    print_table("Critique loops", table.headers, table.rows)
    print_success(text)
    console.print(f"Run directory: {run_dir.path}")


# ----------------------------------------------------------------------------- oracle


@cli.group()
def oracle() -> None:
    """Classical particle counter."""


@oracle.command("count")
@click.option("--image", type=click.Path(exists=True, dir_okay=False), required=True, help="8-bit grayscale PNG or PGM")
@click.option("--min-area-um2", type=float, default=None, help="Area cutoff in square microns (default: oracle.min_area_um2)")
@click.option("--connectivity", type=click.Choice(["4", "8"]), default=None, help="Pixel adjacency (default: oracle.connectivity)")
@click.option("--threshold", type=ThresholdType(), default=None, help="'otsu' or a level in 0-255 (default: oracle.threshold)")
@click.option("--overlay", type=click.Path(dir_okay=False), default=None, help="Write the annotated RGB PNG here")
@click.option("--json", "json_path", type=click.Path(dir_okay=False), default=None, help="Write the per-image JSON record here")
@calibration_options
@common_options
def oracle_count(
    image: str,
    min_area_um2: float | None,
    connectivity: str | None,
    threshold: str | int | None,
    overlay: str | None,
    json_path: str | None,
    um_per_px: float | None,
    bar_um: float | None,
    bar_px: int | None,
    exclude: str | None,
    config_path: str | None,
    verbose: bool,
    log_file: str | None,
) -> None:
    """Count particles larger than the area cutoff."""
    _, settings = bootstrap(config_path, verbose, log_file)
    calibration, region = resolve_calibration(um_per_px, bar_um, bar_px, exclude)

    options: ParticleOptions = settings.oracle
    overrides: dict[str, Any] = {}
    if min_area_um2 is not None:
        overrides["min_area_um2"] = min_area_um2
    if connectivity is not None:
        overrides["connectivity"] = Connectivity(int(connectivity))
    if threshold is not None:
        overrides["threshold"] = threshold
    if region is not None:
        overrides["exclusion"] = region
    options = replace(options, **overrides)

    result = count_particles(load_gray_image(image), calibration, options)

    if overlay:
        save_rgb_png(result.overlay, overlay)
    if json_path:
        write_result_record(result, Path(image).name, json_path)

    rows = [
        [str(c.id), str(c.pixel_count), f"{c.area_um2:.2f}", "yes" if c.counted else "no", _reason(c)]
        for c in result.components
    ]
    if rows:
        print_table("Components", ["Id", "Pixels", "Area (um2)", "Counted", "Note"], rows)
    click.echo(f"Identified Particles Larger Than {options.min_area_um2:g} Microns: {result.count}")


def _reason(component: Any) -> str:
    notes = []
    if not component.passes_area:
        notes.append("small")
    if component.touches_bottom:
        notes.append("bottom")
    if component.in_exclusion:
        notes.append("scale bar")
    return ", ".join(notes)


# ----------------------------------------------------------------------------- prompts


@cli.group()
def prompts() -> None:
    """Inspect prompts."""


@prompts.command("show")
@click.option("--disable", multiple=True, help="Turn off a system prompt flag (repeatable)")
@click.option("--addition", multiple=True, help="Apply a rejected system addition (repeatable)")
@common_options
def prompts_show(disable: tuple[str, ...], addition: tuple[str, ...], config_path: str | None, verbose: bool, log_file: str | None) -> None:
    """Print the rendered system prompt."""
    _, settings = bootstrap(config_path, verbose, log_file)
    templates = settings.templates
    for name in addition:
        try:
            templates = templates.with_system_addition(name)
        except KeyError as e:
            raise click.BadParameter(f"unknown addition '{name}'", param_hint="--addition") from e

    flags = templates.flags
    for name in disable:
        if not isinstance(getattr(flags, name, None), bool):
            raise click.BadParameter(f"unknown flag '{name}'", param_hint="--disable")
        flags = replace(flags, **{name: False})

    click.echo(build_system_prompt(flags, settings.objective, templates))


@prompts.command("changes")
@common_options
def prompts_changes(config_path: str | None, verbose: bool, log_file: str | None) -> None:
    """Print the prompt-engineering changelog."""
    bootstrap(config_path, verbose, log_file)
    rows = [
        [c.source, c.change, "Yes" if c.worked else "No", "Yes" if c.kept else "No", c.reason, c.flag or "-"]
        for c in PROMPT_CHANGES
    ]
    click.echo(tabulate(rows, headers=["Source", "Change", "Worked", "Kept", "Reason", "Flag"], tablefmt="github"))


# ----------------------------------------------------------------------------- report


@cli.command("report")
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@common_options
def report(run_dirs: tuple[str, ...], config_path: str | None, verbose: bool, log_file: str | None) -> None:
    """Re-render a run's summary; with several runs, compare them."""
    bootstrap(config_path, verbose, log_file)

    results = []
    for path in run_dirs:
        run_dir = RunDirectory(path)
        manifest, table, text, metrics = rerender(run_dir)
        results.append((manifest, metrics))
        if len(run_dirs) == 1:
            print_table(f"{manifest.run_id} ({manifest.mode.value})", table.headers, table.rows)
            click.echo(text)

    if len(run_dirs) > 1:
        comparison = compare_runs(results)
        print_table("Runs", comparison.headers, comparison.rows)


# ----------------------------------------------------------------------------- entry point


def main(argv: list[str] | None = None) -> int:
    """
    Run the CLI and map failures to exit codes.

    Returns:
        0 success, 1 usage/config error, 2 backend failure, 3 nothing scorable
    """
    try:
        result = cli.main(args=argv, prog_name="image-debate", standalone_mode=False)
    except click.exceptions.Abort:
        print_error("Aborted")
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except (NoScorableRounds, EmptyRecordSet, EmptyInput) as e:
        print_error(str(e))
        return EXIT_NOT_SCORABLE
    except (BackendError, AmbiguousAbort, CountExtractionFailed) as e:
        print_error(f"Backend failure: {e}")
        for note in getattr(e, "__notes__", []):
            print_error(f"  ({note})")
        return EXIT_BACKEND
    except (ConfigError, BackendConfigError, PromptError, OracleError, GroundTruthError, MalformedTaskScript, FixtureError, FileNotFoundError) as e:
        print_error(str(e))
        return EXIT_USAGE
    except ValueError as e:
        # Remaining invariant violations come from bad inputs (options, files)
        logger.debug("Unmapped ValueError", exc_info=True)
        print_error(f"Invalid input: {e}")
        return EXIT_USAGE

    return result if isinstance(result, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
