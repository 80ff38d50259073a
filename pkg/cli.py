"""
Experiment driver: seeded Monte Carlo batches of simulate -> track -> score
for the classification-aided tracker and its classifier-free baseline.

    python cli.py table --table 1 --runs 50
    python cli.py series --mu 10 --sensors 2 --runs 50
    python cli.py single --config experiments/sanity_clean.cfg
    python cli.py validate
"""
import argparse
import asyncio
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from rich.progress import Progress
from rich.table import Table

from association import AssociationError
from config import (
    FAR_GATE,
    GOSPA_ALPHA,
    LABEL_PENALTY,
    METRIC_CUTOFF,
    METRIC_ORDER,
    ConfigError,
    ExperimentConfig,
    load_experiment_config,
    setup_logging,
)
from estimator import detect_and_estimate, estimates_to_rows
from metrics import MetricReport, PointSet, aggregate_reports, score_run
from model import ModelError, MotionModel, RegionOfInterest
from simulator import (
    ScenarioError,
    frames_to_rows,
    generate_run_frames,
    scenario_from_config,
    scenario_to_dict,
    truth_at,
)
from spa_engine import EngineError, Tracker, TrackerConfig

logger = logging.getLogger(__name__)
console = Console()

# Exit codes
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MODEL = 3
EXIT_NUMERICAL = 4
EXIT_IO = 5

TRACKERS = ("proposed", "baseline")
METRIC_COLUMNS = ("mgospa_m", "mospa_m", "mospa_t_m", "far_per_km2_s")

# Result tables: (cell name, config overrides)
TABLES = {
    "1": [(f"mu_{mu:g}", {"scenario.sensors": 1, "sensor.clutter_mean": mu}) for mu in (5.0, 10.0, 20.0)],
    "2": [(f"mu_{mu:g}", {"scenario.sensors": 2, "sensor.clutter_mean": mu}) for mu in (5.0, 10.0, 20.0)],
    "s1": [
        (f"C_{c}", {"scenario.classes": c, "scenario.regime": "fixed_diag",
                    "scenario.supplementary_timing": True, "sensor.clutter_mean": 20.0})
        for c in (1, 2, 3, 6)
    ],
    "s2": [
        (f"C_{c}", {"scenario.classes": c, "scenario.regime": "fixed_offdiag",
                    "scenario.supplementary_timing": True, "sensor.clutter_mean": 20.0})
        for c in (1, 2, 3, 6)
    ],
}


@dataclass(eq=False)
class RunResult:
    run: int
    reports: Dict[str, MetricReport]
    track_rows: List[Dict[str, Any]] = field(default_factory=list)
    frame_rows: List[Dict[str, Any]] = field(default_factory=list)


def tracker_config_from(config: ExperimentConfig, classifier_enabled: bool) -> TrackerConfig:
    t = config.tracker
    return TrackerConfig(
        num_pts=t.num_pts,
        num_particles=t.num_particles,
        num_birth_particles=t.num_birth_particles,
        bp_iterations=t.bp_iterations,
        bp_tolerance=t.bp_tolerance,
        detection_threshold=t.detection_threshold,
        classifier_enabled=classifier_enabled,
        initial_existence=t.initial_existence,
    )


def motion_model_from(config: ExperimentConfig, roi: RegionOfInterest) -> MotionModel:
    t = config.tracker
    return MotionModel.constant_velocity(
        step=config.scenario.step_s,
        accel_std=t.accel_std,
        survival_prob=t.survival_prob,
        birth_prob=t.birth_prob,
        birth_region=roi,
        birth_velocity_std=t.birth_velocity_std,
    )


def run_single(config: ExperimentConfig, run_index: int, keep_tracks: bool = False) -> RunResult:
    """
    One Monte Carlo run. Both trackers see the same frames and start from
    the same tracker seed, so the baseline differs only by the classifier.
    """
    seed = config.run.base_seed + run_index
    simulation_seed, tracker_seed = np.random.SeedSequence(seed).spawn(2)
    scenario = scenario_from_config(config, seed)
    frames = generate_run_frames(scenario, np.random.default_rng(simulation_seed))
    truth_seq = [truth_at(scenario, n) for n in range(1, scenario.num_steps + 1)]
    motion = motion_model_from(config, scenario.roi)

    result = RunResult(run=run_index, reports={})
    if keep_tracks:
        result.frame_rows = frames_to_rows(frames, run_index, scenario)

    for name in TRACKERS:
        enabled = config.tracker.classifier_enabled if name == "proposed" else False
        tracker = Tracker(
            scenario.sensors,
            motion,
            scenario.class_transition,
            tracker_config_from(config, enabled),
            np.random.default_rng(tracker_seed),
        )
        est_seq = []
        for n, per_sensor in enumerate(frames, start=1):
            tracker.step([frame.measurements for frame in per_sensor])
            estimates = detect_and_estimate(tracker.beliefs, config.tracker.detection_threshold, time=n)
            est_seq.append(PointSet([e.position for e in estimates], labels=[e.label for e in estimates]))
            if keep_tracks:
                result.track_rows.extend(estimates_to_rows(estimates, run=run_index, tracker=name))
        result.reports[name] = score_run(
            truth_seq, est_seq, scenario.roi.area_km2, scenario.step,
            p=METRIC_ORDER, c=METRIC_CUTOFF, alpha=GOSPA_ALPHA, label_penalty=LABEL_PENALTY, gate=FAR_GATE,
        )
        logger.info(f"Run {run_index} ({name}): {result.reports[name].summary()}")
    return result


async def _run_batch_async(config: ExperimentConfig, run_indices: Sequence[int], keep_tracks: bool, label: str):
    loop = asyncio.get_running_loop()
    with Progress(console=console, transient=True) as progress:
        task = progress.add_task(label, total=len(run_indices))
        with ProcessPoolExecutor(max_workers=config.run.workers) as pool:

            async def run_one(i: int) -> RunResult:
                result = await loop.run_in_executor(pool, run_single, config, i, keep_tracks)
                progress.advance(task)
                return result

            return await asyncio.gather(*(run_one(i) for i in run_indices), return_exceptions=True)


def run_batch(config: ExperimentConfig, keep_tracks: bool = False, label: str = "Monte Carlo runs") -> List[RunResult]:
    """All runs of the config, ordered by run index whatever the worker count"""
    run_indices = list(range(config.run.num_runs))
    logger.info(f"Starting {len(run_indices)} runs with {config.run.workers} workers")
    if config.run.workers == 1:
        results = []
        with Progress(console=console, transient=True) as progress:
            task = progress.add_task(label, total=len(run_indices))
            for i in run_indices:
                results.append(run_single(config, i, keep_tracks))
                progress.advance(task)
    else:
        results = asyncio.run(_run_batch_async(config, run_indices, keep_tracks, label))
        failures = [r for r in results if isinstance(r, BaseException)]
        if failures:
            raise failures[0]
    return sorted(results, key=lambda r: r.run)


def write_csv(path: Path, schema: str, fieldnames: Sequence[str], rows: Sequence[Dict[str, Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"# schema: {schema}\n")
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    logger.info(f"Wrote {len(rows)} rows to {path}")
    return path


def _write_run_tables(results: Sequence[RunResult], reports: Dict[str, MetricReport], out_dir: Path):
    run_rows = [
        {"run": r.run, "tracker": name, **r.reports[name].summary()}
        for r in results for name in TRACKERS
    ]
    write_csv(out_dir / "runs.csv", "runs/v1", ("run", "tracker") + METRIC_COLUMNS, run_rows)
    aggregate_rows = [
        {"tracker": name, "num_runs": len(results), **reports[name].summary()} for name in TRACKERS
    ]
    write_csv(out_dir / "aggregate.csv", "aggregate/v1", ("tracker", "num_runs") + METRIC_COLUMNS, aggregate_rows)


def run_experiment(config: ExperimentConfig, out_dir: Optional[Path] = None) -> Dict[str, MetricReport]:
    """Aggregated report per tracker; writes runs.csv and aggregate.csv"""
    out_dir = Path(config.run.output_dir) if out_dir is None else out_dir
    results = run_batch(config)
    reports = {name: aggregate_reports([r.reports[name] for r in results]) for name in TRACKERS}
    _write_run_tables(results, reports, out_dir)
    return reports


def emit_mospa_t_series(config: ExperimentConfig, out_dir: Optional[Path] = None) -> Path:
    """Run-averaged per-step MOSPA-T of both trackers to series.csv"""
    out_dir = Path(config.run.output_dir) if out_dir is None else out_dir
    reports = run_experiment(config, out_dir)
    baseline, proposed = reports["baseline"].ospa_t_series, reports["proposed"].ospa_t_series
    rows = [
        {"n": n, "baseline_mospa_t_m": float(b), "proposed_mospa_t_m": float(p)}
        for n, (b, p) in enumerate(zip(baseline, proposed), start=1)
    ]
    return write_csv(out_dir / "series.csv", "series/v1", ("n", "baseline_mospa_t_m", "proposed_mospa_t_m"), rows)


def run_table(config: ExperimentConfig, table: str, cells: Optional[Sequence[str]] = None) -> List[Tuple[str, Dict[str, MetricReport]]]:
    """Every cell of a result table; cells narrows the run to the named ones"""
    out_dir = Path(config.run.output_dir) / f"table_{table}"
    base = config.to_flat_dict()
    results = []
    for cell, overrides in TABLES[table]:
        if cells and cell not in cells:
            continue
        cell_config = load_experiment_config(overrides={**base, **overrides})
        console.print(f"[bold]Table {table}[/bold] cell {cell}")
        results.append((cell, run_experiment(cell_config, out_dir / cell)))

    rows = [
        {"cell": cell, "tracker": name, **reports[name].summary()}
        for cell, reports in results for name in TRACKERS
    ]
    write_csv(out_dir / f"table_{table}.csv", "table/v1", ("cell", "tracker") + METRIC_COLUMNS, rows)
    return results


def print_reports(title: str, results: Sequence[Tuple[str, Dict[str, MetricReport]]]):
    table = Table(title=title)
    for column in ("cell", "tracker", "MGOSPA (m)", "MOSPA (m)", "MOSPA-T (m)", "FAR (km^-2 s^-1)"):
        table.add_column(column, justify="right" if "(" in column else "left")
    for cell, reports in results:
        for name in TRACKERS:
            r = reports[name]
            table.add_row(cell, name, f"{r.mgospa:.2f}", f"{r.mospa:.2f}", f"{r.mospa_t:.2f}", f"{r.far:.3f}")
    console.print(table)


def run_and_dump_single(config: ExperimentConfig, out_dir: Optional[Path] = None) -> RunResult:
    """Run 0 of the config with the full track and frame dump"""
    out_dir = Path(config.run.output_dir) if out_dir is None else out_dir
    result = run_single(config, 0, keep_tracks=True)
    num_classes = config.scenario.classes
    track_fields = ["run", "tracker", "n", "label", "x_m", "y_m", "vx_mps", "vy_mps", "existence_prob", "map_class"]
    track_fields += [f"p_class_{c}" for c in range(1, num_classes + 1)]
    write_csv(out_dir / "tracks.csv", "tracks/v1", track_fields, result.track_rows)
    write_csv(out_dir / "frames.csv", "frames/v1",
              ("run", "n", "s", "range_m", "bearing_rad", "zeta", "origin"), result.frame_rows)
    _write_run_tables([result], result.reports, out_dir)

    scenario = scenario_from_config(config, config.run.base_seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "scenario.json", "w") as f:
        json.dump(scenario_to_dict(scenario), f, indent=2, sort_keys=True)
    return result


def _overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = {
        "run.num_runs": args.runs,
        "run.base_seed": args.seed,
        "run.workers": args.workers,
        "run.output_dir": args.out,
        "scenario.sensors": args.sensors,
        "scenario.classes": args.classes,
        "scenario.regime": args.regime,
        "sensor.clutter_mean": args.mu,
    }
    return {k: v for k, v in overrides.items() if v is not None}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (dotted key = value lines)")
    common.add_argument("--runs", type=int, help="number of Monte Carlo runs")
    common.add_argument("--seed", type=int, help="base seed; run i uses seed + i")
    common.add_argument("--sensors", type=int, choices=[1, 2])
    common.add_argument("--mu", type=float, choices=[5.0, 10.0, 20.0], help="mean clutter count per scan")
    common.add_argument("--classes", type=int, choices=[1, 2, 3, 6])
    common.add_argument("--regime", choices=["fixed_diag", "fixed_offdiag"])
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="parallel worker processes")

    parser = argparse.ArgumentParser(description="Classification-aided multitarget tracking experiments")
    verbs = parser.add_subparsers(dest="verb", required=True)
    table = verbs.add_parser("table", parents=[common], help="reproduce a result table")
    table.add_argument("--table", choices=sorted(TABLES), default="1")
    verbs.add_parser("series", parents=[common], help="per-step MOSPA-T of both trackers")
    verbs.add_parser("single", parents=[common], help="one run with full track dump")
    verbs.add_parser("validate", help="run the test suite")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()

    if args.verb == "validate":
        import pytest
        return int(pytest.main([str(Path(__file__).resolve().parent / "tests"), "-q"]))

    try:
        config = load_experiment_config(args.config, _overrides_from_args(args))
        if args.verb == "table":
            cells = None
            if args.mu is not None and args.table in ("1", "2"):
                cells = [f"mu_{args.mu:g}"]
            elif args.classes is not None and args.table in ("s1", "s2"):
                cells = [f"C_{args.classes}"]
            print_reports(f"Table {args.table}", run_table(config, args.table, cells))
        elif args.verb == "series":
            path = emit_mospa_t_series(config)
            console.print(f"Wrote {path}")
        elif args.verb == "single":
            result = run_and_dump_single(config)
            print_reports("Single run", [("run 0", result.reports)])
        return EXIT_OK
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        console.print(f"[red]Configuration error:[/red] {e}")
        return EXIT_CONFIG
    except (ModelError, ScenarioError) as e:
        logger.error(f"Model error: {e}")
        console.print(f"[red]Model error:[/red] {e}")
        return EXIT_MODEL
    except (EngineError, AssociationError) as e:
        logger.error(f"Numerical error: {e}")
        console.print(f"[red]Numerical error:[/red] {e}")
        return EXIT_NUMERICAL
    except OSError as e:
        logger.error(f"I/O error: {e}")
        console.print(f"[red]I/O error:[/red] {e}")
        return EXIT_IO
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        console.print(f"[red]Unexpected error:[/red] {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
