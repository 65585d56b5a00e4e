"""Command-line entry point: simulate, run, ingest, plot and schema."""

from __future__ import annotations

import argparse
import concurrent.futures
import datetime as _dt
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import records as rec
from .graph import SingularSystemError
from .metrics import aggregate, ape, motp, rpe
from .pipeline import LevelId, PipelineConfig, run_level
from .sim import ScenarioConfig, ScenarioError, builtin_scenarios, get_scenario, simulate

log = logging.getLogger("slammot")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 2, 3
METRICS = ("ape", "rpe", "motp")


class UsageError(ValueError):
    pass


def _meta() -> list[str]:
    stamp = _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()
    return [f"slammot {__version__}", f"created {stamp}"]


def load_scenario(source: str) -> ScenarioConfig:
    """A builtin scenario name or the path of a JSON scenario config."""
    path = Path(source)
    if path.suffix == ".json" or path.exists():
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise ScenarioError("config", f"cannot read {source}: {exc.strerror or exc}") from exc
        except json.JSONDecodeError as exc:
            raise ScenarioError("config", f"{source} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ScenarioError("config", "top level must be an object")
        return ScenarioConfig.from_dict(data)
    if source in builtin_scenarios():
        return get_scenario(source)
    raise ScenarioError("scenario", f"{source!r} is neither a builtin ({', '.join(builtin_scenarios())}) nor a file")


def parse_segment(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"segment must look like a:b, got {text!r}") from None
    if not 0 <= a <= b:
        raise argparse.ArgumentTypeError(f"segment needs 0 <= a <= b, got {text!r}")
    return a, b


def parse_levels(text: str) -> list[LevelId]:
    out = []
    for part in text.split(","):
        part = part.strip().upper()
        if not part:
            continue
        if part not in LevelId.__members__:
            raise argparse.ArgumentTypeError(f"unknown level {part!r}; choose from L0..L3")
        if LevelId[part] not in out:
            out.append(LevelId[part])
    return out


@dataclass
class RunConfig:
    scenario: ScenarioConfig
    levels: list = field(default_factory=lambda: [LevelId.L0, LevelId.L1, LevelId.L2, LevelId.L3])
    trials: int = 1
    seed: int | None = None
    window: int = 10
    noise_scale: float = 1.0
    out: Path = Path("report")
    segments: list = field(default_factory=list)
    workers: int = 1
    measurements: Path | None = None
    truth: Path | None = None

    def validate(self) -> None:
        if self.trials < 1:
            raise UsageError("trials must be >= 1")
        if not self.levels:
            raise UsageError("levels must not be empty")
        if self.window < 2:
            raise UsageError("window must be >= 2")
        if not (self.noise_scale >= 0 and math.isfinite(self.noise_scale)):
            raise UsageError("noise-scale must be a finite number >= 0")
        if self.measurements is not None and self.trials != 1:
            raise UsageError("a measurements file is a single trial; use --trials 1")

    def trial_seeds(self) -> list[int]:
        base = self.scenario.seed if self.seed is None else self.seed
        return [base + k for k in range(self.trials)]

    def scenario_for(self, seed: int) -> ScenarioConfig:
        sc = replace(self.scenario, seed=seed)
        if self.noise_scale != 1.0:
            sc = replace(sc, noise=sc.noise.scaled(self.noise_scale))
        return sc

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "levels": [str(lv) for lv in self.levels],
            "trials": self.trials,
            "seeds": self.trial_seeds(),
            "window": self.window,
            "noise_scale": self.noise_scale,
            "segments": [list(s) for s in self.segments],
            "measurements": str(self.measurements) if self.measurements else None,
            "truth": str(self.truth) if self.truth else None,
        }


def _segment_name(seg) -> str:
    return "full" if seg is None else f"{seg[0]}:{seg[1]}"


def trial_metrics(est, truth: rec.TruthRecord, segments) -> dict:
    """{(segment name, metric): value} for one estimate against its truth."""
    out = {}
    n = len(truth.ego_poses)
    for seg in [None, *segments]:
        if seg is not None and seg[1] >= n:
            raise UsageError(f"segment {seg[0]}:{seg[1]} outside 0..{n - 1}")
        name = _segment_name(seg)
        out[(name, "ape")] = ape(est.poses, truth.ego_poses, seg)
        out[(name, "rpe")] = rpe(est.poses, truth.ego_poses, seg)
        out[(name, "motp")] = motp(est.objects, truth.objects, segment=seg).motp
    return out


def _trial_job(job: dict) -> dict:
    """Run one (level, trial); top level so worker processes can import it."""
    level = LevelId[job["level"]]
    result = {"level": job["level"], "trial": job["trial"], "seed": job["seed"], "metrics": None, "error": None}
    try:
        if job["measurements"] is not None:
            meas = rec.read_measurements(job["measurements"])
            truth = rec.read_truth(job["truth"]) if job["truth"] else None
            sc = ScenarioConfig.from_dict(job["scenario"])
        else:
            sc = ScenarioConfig.from_dict(job["scenario"])
            gt, meas = simulate(sc)
            truth = rec.TruthRecord.from_truth(gt)
        cfg = PipelineConfig.for_scenario(sc, window=job["window"])
        est = run_level(level, meas, cfg)
        rec.write_estimate(job["estimate_path"], est)
        if truth is not None:
            if len(truth.ego_poses) != len(est.poses):
                raise UsageError(f"truth has {len(truth.ego_poses)} frames, measurements {len(est.poses)}")
            result["metrics"] = trial_metrics(est, truth, [tuple(s) for s in job["segments"]])
    except (SingularSystemError, np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        result["error"] = f"{type(exc).__name__}: {exc}"
    except (rec.RecordError, UsageError, ScenarioError):
        raise
    except ValueError as exc:
        result["error"] = f"{type(exc).__name__}: {exc}"
    return result


def execute_run(rc: RunConfig) -> tuple[list[dict], int]:
    """Run every level x trial and write the report; returns (results, exit code)."""
    rc.validate()
    out = Path(rc.out)
    trials_dir = out / "trials"
    trials_dir.mkdir(parents=True, exist_ok=True)
    seeds = rc.trial_seeds()
    if rc.measurements is not None:
        seeds = seeds[:1]
    if not rc.segments and rc.scenario.transition is not None:
        rc.segments = [tuple(rc.scenario.transition)]
    n_frames = rc.scenario.frames
    for a, b in rc.segments:
        if rc.measurements is None and b >= n_frames:
            raise UsageError(f"segment {a}:{b} outside 0..{n_frames - 1}")

    jobs = []
    for k, seed in enumerate(seeds):
        sc = rc.scenario_for(seed)
        if rc.measurements is None:
            gt, _ = simulate(sc)
            rec.write_truth(trials_dir / f"truth_trial{k:03d}.csv", gt)
        for level in rc.levels:
            jobs.append(
                {
                    "level": str(level),
                    "trial": k,
                    "seed": seed,
                    "scenario": sc.to_dict(),
                    "window": rc.window,
                    "segments": [list(s) for s in rc.segments],
                    "measurements": str(rc.measurements) if rc.measurements else None,
                    "truth": str(rc.truth) if rc.truth else None,
                    "estimate_path": str(trials_dir / f"{level}_trial{k:03d}.csv"),
                }
            )
    if rc.measurements is not None and rc.truth is not None:
        (trials_dir / "truth_trial000.csv").write_text(Path(rc.truth).read_text())

    workers = max(1, min(rc.workers, len(jobs)))
    if workers == 1:
        results = [_trial_job(j) for j in jobs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_trial_job, jobs))
    order = {str(lv): i for i, lv in enumerate(rc.levels)}
    results.sort(key=lambda r: (order[r["level"]], r["trial"]))

    _write_report(rc, results, out)
    failed = [r for r in results if r["error"]]
    for r in failed:
        log.error("%s trial %d (seed %d) failed: %s", r["level"], r["trial"], r["seed"], r["error"])
    return results, (EXIT_FAILED if failed else EXIT_OK)


def _write_report(rc: RunConfig, results: list[dict], out: Path) -> None:
    name = rc.scenario.name
    seg_names = [_segment_name(s) for s in [None, *rc.segments]]
    rows, fails = [], []
    for r in results:
        if r["error"]:
            fails.append([r["level"], r["trial"], r["seed"], r["error"]])
        if r["metrics"] is None:
            continue
        for seg in seg_names:
            for m in METRICS:
                rows.append([r["level"], name, r["trial"], seg, m, rec.fmt(r["metrics"][(seg, m)])])
    meta = _meta()
    rec.write_table(out / "metrics.csv", "metrics", rows, meta)
    rec.write_table(out / "failures.csv", "failures", fails, meta)

    agg_rows, table = [], {}
    for level in rc.levels:
        lv = str(level)
        mine = [r for r in results if r["level"] == lv and r["metrics"] is not None]
        for seg in seg_names:
            for m in METRICS:
                a = aggregate([r["metrics"][(seg, m)] for r in mine])
                agg_rows.append([lv, name, seg, m, rec.fmt(a.mean), rec.fmt(a.std), rec.fmt(a.median), a.n])
                table[(lv, seg, m)] = a
    if any(r["metrics"] is not None for r in results):
        rec.write_table(out / "aggregate.csv", "aggregate", agg_rows, meta)
        (out / "comparison.txt").write_text(comparison_table(rc, seg_names, table))
    (out / "run.json").write_text(json.dumps(rc.to_dict(), indent=2, sort_keys=True) + "\n")


def comparison_table(rc: RunConfig, seg_names, table) -> str:
    """Levels x {APE, RPE, MOTP} as mean +- std, one block per segment."""
    lines = [f"scenario {rc.scenario.name}, {rc.trials} trial(s)"]
    for seg in seg_names:
        lines.append("")
        lines.append(f"segment {seg}")
        lines.append(f"{'level':<6} {'APE [m]':>20} {'RPE [m/frame]':>20} {'MOTP [m]':>20}")
        for level in rc.levels:
            cells = []
            for m in METRICS:
                a = table[(str(level), seg, m)]
                cells.append("n/a" if a.n == 0 else f"{a.mean:.4f} +- {a.std:.4f}")
            lines.append(f"{str(level):<6} " + " ".join(f"{c:>20}" for c in cells))
    return "\n".join(lines) + "\n"


# ---- subcommands -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    source = args.config or args.scenario
    if source is None:
        raise UsageError("give a config path or --scenario")
    sc = load_scenario(source)
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    if args.noise_scale != 1.0:
        sc = replace(sc, noise=sc.noise.scaled(args.noise_scale))
    gt, meas = simulate(sc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta()
    rec.write_truth(out / "ground_truth.csv", gt, meta)
    rec.write_measurements(out / "measurements.csv", meas, meta)
    (out / "config.json").write_text(json.dumps(sc.to_dict(), indent=2, sort_keys=True) + "\n")
    if args.export_ingest:
        rec.write_ingest(out / "detections.csv", out / "odometry.csv", meas, meta)
    print(f"wrote {len(meas)} frames to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    if args.measurements is not None:
        # only camera, timing and noise are taken from the config here
        sc = load_scenario(args.config) if args.config else ScenarioConfig(name="measurements")
        rec.read_measurements(args.measurements)
    else:
        sc = load_scenario(args.scenario or "transition")
    rc = RunConfig(
        scenario=sc,
        levels=args.levels,
        trials=args.trials,
        seed=args.seed,
        window=args.window,
        noise_scale=args.noise_scale,
        out=Path(args.out),
        segments=list(args.segment or []),
        workers=args.workers,
        measurements=Path(args.measurements) if args.measurements else None,
        truth=Path(args.truth) if args.truth else None,
    )
    _, code = execute_run(rc)
    text = Path(rc.out) / "comparison.txt"
    if text.exists():
        print(text.read_text(), end="")
    return code


def cmd_ingest(args) -> int:
    meas = rec.read_ingest(args.detections, args.odometry, args.min_score)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rec.write_measurements(out / "measurements.csv", meas, _meta())
    print(f"wrote {len(meas)} frames to {out / 'measurements.csv'}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from . import plots

    written = plots.plot_report(Path(args.report), trial=args.trial, out=Path(args.out) if args.out else None)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_schema(args) -> int:
    if not args.check:
        for name, cols in rec.SCHEMAS.items():
            print(f"{name}: {','.join(cols)}")
            print(f"    {rec.SCHEMA_NOTES[name]}")
        return EXIT_OK
    for path in args.check:
        print(f"{path}: ok ({rec.check_file(path)})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slammot", description=__doc__)
    p.add_argument("--version", action="version", version=f"slammot {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate ground truth and measurements")
    s.add_argument("config", nargs="?", help="scenario JSON file or builtin name")
    s.add_argument("--scenario", help="builtin scenario name or JSON file")
    s.add_argument("--seed", type=int)
    s.add_argument("--noise-scale", type=float, default=1.0)
    s.add_argument("--out", default="sim")
    s.add_argument("--export-ingest", action="store_true", help="also write detections.csv and odometry.csv")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="run levels over Monte Carlo trials and write metrics")
    r.add_argument("--scenario", help="builtin scenario name or JSON file (default: transition)")
    r.add_argument("--measurements", help="measurements.csv to process instead of simulating")
    r.add_argument("--truth", help="ground_truth.csv matching --measurements")
    r.add_argument("--config", help="scenario JSON supplying camera and noise for --measurements")
    r.add_argument("--levels", type=parse_levels, default=parse_levels("L0,L1,L2,L3"))
    r.add_argument("--trials", type=int, default=1)
    r.add_argument("--seed", type=int)
    r.add_argument("--window", type=int, default=10)
    r.add_argument("--segment", type=parse_segment, action="append", help="a:b, repeatable")
    r.add_argument("--noise-scale", type=float, default=1.0)
    r.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    r.add_argument("--out", default="report")
    r.set_defaults(func=cmd_run)

    i = sub.add_parser("ingest", help="convert external detections and odometry to measurements.csv")
    i.add_argument("--detections", required=True)
    i.add_argument("--odometry", required=True)
    i.add_argument("--min-score", type=float, default=0.0)
    i.add_argument("--out", default="ingested")
    i.set_defaults(func=cmd_ingest)

    pl = sub.add_parser("plot", help="SVG trajectory and error plots from a run report")
    pl.add_argument("report")
    pl.add_argument("--trial", type=int, default=0)
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)

    sc = sub.add_parser("schema", help="print CSV schemas or check files against them")
    sc.add_argument("--check", nargs="+", metavar="FILE")
    sc.set_defaults(func=cmd_schema)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: invalid config field '{exc.field}': {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (rec.RecordError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
