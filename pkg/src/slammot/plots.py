"""SVG trajectory overlays and per-frame error curves for a run report."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import records as rec  # noqa: E402
from .metrics import ape_series  # noqa: E402

# fixed ids and no date keep the SVG bytes reproducible
plt.rcParams["svg.hashsalt"] = "slammot"
_SVG_META = {"Date": None, "Creator": None}


def _xz(poses) -> np.ndarray:
    t = np.array([p.translation for p in poses])
    return t[:, [0, 2]]


def plot_report(report: Path, trial: int = 0, out: Path | None = None) -> list[Path]:
    """Write ``trajectory_trialNNN.svg`` and ``errors_trialNNN.svg``; returns their paths."""
    report = Path(report)
    out = out or report
    trials = report / "trials"
    truth_path = trials / f"truth_trial{trial:03d}.csv"
    if not truth_path.exists():
        raise FileNotFoundError(f"no ground truth for trial {trial} under {report}")
    run = json.loads((report / "run.json").read_text()) if (report / "run.json").exists() else {}
    levels = run.get("levels") or sorted(p.name.split("_")[0] for p in trials.glob(f"L?_trial{trial:03d}.csv"))
    estimates = {}
    for lv in levels:
        p = trials / f"{lv}_trial{trial:03d}.csv"
        if p.exists():
            estimates[lv] = rec.read_estimate(p)
    if not estimates:
        raise FileNotFoundError(f"no level estimates for trial {trial} under {report}")
    truth = rec.read_truth(truth_path)
    out.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(6, 6))
    gt = _xz(truth.ego_poses)
    ax.plot(gt[:, 0], gt[:, 1], "k-", lw=2, label="truth")
    for lv, est in estimates.items():
        xz = _xz(est.poses)
        ax.plot(xz[:, 0], xz[:, 1], lw=1.2, label=lv)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend()
    ax.set_title("ego trajectory")
    traj = out / f"trajectory_trial{trial:03d}.svg"
    fig.savefig(traj, format="svg", metadata=_SVG_META)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    for seg in run.get("segments", []):
        ax.axvspan(seg[0], seg[1], color="0.85", label=f"segment {seg[0]}:{seg[1]}")
    for lv, est in estimates.items():
        ax.plot(np.arange(len(est.poses)), ape_series(est.poses, truth.ego_poses), lw=1.2, label=lv)
    ax.set_xlabel("frame")
    ax.set_ylabel("translation error [m]")
    ax.legend()
    ax.set_title("per-frame absolute error")
    errs = out / f"errors_trial{trial:03d}.svg"
    fig.savefig(errs, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return [traj, errs]
