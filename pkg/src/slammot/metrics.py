"""Trajectory and tracking error metrics, and Monte Carlo aggregation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

log = logging.getLogger(__name__)

HUNGARIAN_GATE = 2.0


@dataclass
class TrajectoryError:
    ape: float
    rpe: float
    ape_series: np.ndarray
    rpe_series: np.ndarray


@dataclass
class TrackingError:
    motp: float
    matched: int
    misses: int
    distances: list = field(default_factory=list)


def _frame_slice(n: int, segment) -> slice:
    if segment is None:
        return slice(0, n)
    a, b = segment
    if not (0 <= a <= b < n):
        raise ValueError(f"segment {segment} outside 0..{n - 1}")
    return slice(a, b + 1)


def _translations(poses) -> np.ndarray:
    out = []
    for p in poses:
        if hasattr(p, "translation"):
            out.append(p.translation)
        else:
            out.append(np.asarray(p, dtype=float)[:3, 3])
    return np.array(out, dtype=float).reshape(-1, 3)


def _matrices(poses) -> np.ndarray:
    out = []
    for p in poses:
        out.append(p.matrix() if hasattr(p, "matrix") else np.asarray(p, dtype=float))
    return np.array(out, dtype=float).reshape(-1, 4, 4)


def ape_series(est, gt) -> np.ndarray:
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    return np.linalg.norm(_translations(est) - _translations(gt), axis=1)


def ape(est, gt, segment=None) -> float:
    """RMSE of per-frame translation error; no alignment is applied."""
    e = ape_series(est, gt)
    e = e[_frame_slice(len(e), segment)]
    return float(np.sqrt(np.mean(e * e))) if len(e) else 0.0


def rpe_series(est, gt) -> np.ndarray:
    """Translation norm of the relative-motion error for each pair (t, t+1)."""
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(est) < 2:
        raise ValueError("need at least two poses")
    E, G = _matrices(est), _matrices(gt)
    dE = np.linalg.inv(E[:-1]) @ E[1:]
    dG = np.linalg.inv(G[:-1]) @ G[1:]
    err = np.linalg.inv(dG) @ dE
    return np.linalg.norm(err[:, :3, 3], axis=1)


def rpe(est, gt, segment=None) -> float:
    """Per-frame relative pose error (m/frame), RMSE over consecutive pairs.

    With a segment ``(a, b)`` the pairs (a, a+1) .. (b-1, b) are used.
    """
    e = rpe_series(est, gt)
    if segment is not None:
        _frame_slice(len(est), segment)
        e = e[segment[0] : segment[1]]
    return float(np.sqrt(np.mean(e * e))) if len(e) else 0.0


def trajectory_error(est, gt, segment=None) -> TrajectoryError:
    return TrajectoryError(ape(est, gt, segment), rpe(est, gt, segment), ape_series(est, gt), rpe_series(est, gt))


def _xz(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    # (x, y, z, ...) full layouts carry z at index 2; bare (x, z) pairs at 1
    return np.array([v[0], v[2]]) if len(v) >= 3 else v[:2]


def motp(est_tracks, gt_tracks, gate: float = HUNGARIAN_GATE, segment=None, use_ids: bool = True) -> TrackingError:
    """Mean x-z distance over matched (estimate, truth) pairs.

    ``est_tracks`` and ``gt_tracks`` are per-frame dicts ``{id: state}``.
    With ``use_ids`` pairs are formed by shared id; otherwise each frame is
    solved as a gated assignment problem.
    """
    if not gate > 0:
        raise ValueError("gate must be positive")
    n = len(gt_tracks)
    if len(est_tracks) != n:
        raise ValueError(f"track logs differ in length: {len(est_tracks)} vs {n}")
    dists, misses = [], 0
    for t in range(n)[_frame_slice(n, segment)]:
        est, gt = est_tracks[t], gt_tracks[t]
        if use_ids:
            for oid in sorted(gt):
                if oid not in est:
                    continue
                d = float(np.linalg.norm(_xz(est[oid]) - _xz(gt[oid])))
                if d <= gate:
                    dists.append(d)
                else:
                    misses += 1
        else:
            ek, gk = sorted(est), sorted(gt)
            if not ek or not gk:
                continue
            D = np.array([[np.linalg.norm(_xz(est[a]) - _xz(gt[b])) for b in gk] for a in ek])
            cost = np.where(D <= gate, D, 1e6)
            rows, cols = linear_sum_assignment(cost)
            for r, c in zip(rows, cols):
                if D[r, c] <= gate:
                    dists.append(float(D[r, c]))
                else:
                    misses += 1
    value = float(np.mean(dists)) if dists else math.nan
    return TrackingError(value, len(dists), misses, dists)


@dataclass
class Aggregate:
    mean: float
    std: float
    median: float
    n: int


@dataclass
class MonteCarloReport:
    seeds: list
    values: dict  # metric -> list of per-trial values (None for failed trials)
    aggregates: dict  # metric -> Aggregate
    failures: dict  # seed -> error message


def aggregate(values) -> Aggregate:
    v = np.asarray([x for x in values if x is not None and not math.isnan(x)], dtype=float)
    if len(v) == 0:
        return Aggregate(math.nan, math.nan, math.nan, 0)
    return Aggregate(float(np.mean(v)), float(np.std(v)), float(np.median(v)), len(v))


def monte_carlo(trial, trials: int | None = None, seeds=None) -> MonteCarloReport:
    """Run ``trial(seed) -> {metric: value}`` once per seed and aggregate.

    Failed trials are recorded and excluded from the aggregates.
    """
    if seeds is None:
        if trials is None or trials < 1:
            raise ValueError("trials must be >= 1")
        seeds = list(range(trials))
    seeds = sorted(seeds)
    if not seeds:
        raise ValueError("trials must be >= 1")
    results, failures = {}, {}
    for s in seeds:
        try:
            results[s] = dict(trial(s))
        except Exception as exc:  # noqa: BLE001 - a trial failure is data here
            log.warning("trial %s failed: %s", s, exc)
            failures[s] = f"{type(exc).__name__}: {exc}"
    metrics = sorted({k for r in results.values() for k in r})
    values = {k: [results[s].get(k) if s in results else None for s in seeds] for k in metrics}
    aggs = {k: aggregate(v) for k, v in values.items()}
    return MonteCarloReport(seeds, values, aggs, failures)
