"""CSV readers and writers for measurements, ground truth, estimates and metrics.

Floats are written with ``repr`` so every value survives a write/read cycle
exactly. Lines starting with ``#`` carry metadata (for example a creation
timestamp) and are ignored by every reader.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lie import Se3Pose
from .sim import FrameMeasurements, GroundTruth

V_COLUMNS = [f"v{i}" for i in range(1, 13)]
MODEL_NAMES = ("CP", "CV", "CTRV")

SCHEMAS = {
    "measurements": ["frame", "kind", "id", *V_COLUMNS],
    "truth": ["frame", "kind", "id", *V_COLUMNS, "label"],
    "estimate": ["frame", "kind", "id", *V_COLUMNS],
    "metrics": ["level", "scenario", "trial", "segment", "metric", "value"],
    "aggregate": ["level", "scenario", "segment", "metric", "mean", "std", "median", "n"],
    "failures": ["level", "trial", "seed", "error"],
    "detections": ["frame", "track_id", "x", "y", "z", "theta", "score"],
    "odometry": ["frame", "r11", "r12", "r13", "t1", "r21", "r22", "r23", "t2", "r31", "r32", "r33", "t3"],
}

# kinds allowed in the ``kind`` column of each table
KINDS = {
    "measurements": {"pixel", "odo", "obj"},
    "truth": {"ego", "object", "landmark"},
    "estimate": {"pose", "object"},
}

SCHEMA_NOTES = {
    "measurements": "pixel: v1,v2 = u,v; v3 = owning object id (empty for static points). "
    "odo: v1..v12 = T(c_t <- c_t-1) as 3x4 row-major. obj: v1..v4 = x, y, z, theta in the camera frame.",
    "truth": "ego: v1..v12 = world-from-camera 3x4. object: v1..v6 = x, y, z, theta, v, omega; label = active model. "
    "landmark: frame empty, v1..v3 = position.",
    "estimate": "pose: v1..v12 = world-from-camera 3x4. object: v1..v6 = x, y, z, theta, v, omega; v7..v9 = CP, CV, CTRV weights.",
    "metrics": "one row per (level, trial, segment, metric); segment is 'full' or 'a:b'; metric in ape, rpe, motp.",
    "aggregate": "mean, population std and median over the trials that produced a value.",
    "failures": "trials whose run raised; they are excluded from the aggregates.",
    "detections": "ingest input; x, y, z, theta in the camera frame.",
    "odometry": "ingest input; world-from-camera pose per frame, 3x4 row-major (KITTI pose layout).",
}


class RecordError(ValueError):
    """A malformed input file; carries the file and 1-based line number."""

    def __init__(self, path, line: int | None, msg: str):
        self.path, self.line = str(path), line
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {msg}")


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _row34(T) -> list:
    T = T.matrix() if hasattr(T, "matrix") else np.asarray(T, dtype=float)
    return [fmt(v) for v in T[:3, :4].ravel()]


def _pose34(vals) -> Se3Pose:
    M = np.asarray(vals, dtype=float).reshape(3, 4)
    return Se3Pose(M[:, :3], M[:, 3])


def write_table(path, schema: str, rows, meta=()) -> None:
    """Write ``rows`` under the header of ``schema``; ``meta`` lines get a '#' prefix."""
    buf = io.StringIO()
    for line in meta:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCHEMAS[schema])
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def read_table(path, schema: str):
    """Yield ``(line_number, {column: text})`` for each data row."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise RecordError(path, None, f"cannot read: {exc.strerror or exc}") from exc
    header = None
    cols = SCHEMAS[schema]
    for no, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cells = next(csv.reader([line]))
        if header is None:
            if cells != cols:
                raise RecordError(path, no, f"header must be {','.join(cols)}")
            header = cells
            continue
        if len(cells) != len(cols):
            raise RecordError(path, no, f"expected {len(cols)} fields, got {len(cells)}")
        yield no, dict(zip(cols, cells))
    if header is None:
        raise RecordError(path, None, "missing header row")


def _float(path, no, row, key, required=True):
    s = row[key]
    if s == "":
        if required:
            raise RecordError(path, no, f"empty {key}")
        return None
    try:
        v = float(s)
    except ValueError:
        raise RecordError(path, no, f"{key} is not a number: {s!r}") from None
    if not math.isfinite(v):
        raise RecordError(path, no, f"{key} is not finite")
    return v


def _int(path, no, row, key):
    s = row[key]
    try:
        return int(s)
    except ValueError:
        raise RecordError(path, no, f"{key} is not an integer: {s!r}") from None


def _floats(path, no, row, keys):
    return [_float(path, no, row, k) for k in keys]


# ---- measurements ---------------------------------------------------------------


def measurement_rows(meas) -> list:
    rows = []
    for m in meas:
        pad = [""] * 12
        rows.append([m.frame, "odo", "", *_row34(m.odometry)])
        for oid in sorted(m.objects):
            z = [fmt(v) for v in m.objects[oid]]
            rows.append([m.frame, "obj", oid, *z, *pad[4:]])
        for pid in sorted(m.pixels):
            u, v = m.pixels[pid]
            rows.append([m.frame, "pixel", pid, fmt(u), fmt(v), fmt(m.labels.get(pid)), *pad[3:]])
    return rows


def write_measurements(path, meas, meta=()) -> None:
    write_table(path, "measurements", measurement_rows(meas), meta)


def read_measurements(path) -> list[FrameMeasurements]:
    frames: dict[int, FrameMeasurements] = {}
    for no, row in read_table(path, "measurements"):
        t = _int(path, no, row, "frame")
        if t < 0:
            raise RecordError(path, no, "negative frame")
        m = frames.setdefault(t, FrameMeasurements(t, {}, {}, None, {}))
        kind = row["kind"]
        if kind == "odo":
            if m.odometry is not None:
                raise RecordError(path, no, f"second odometry row for frame {t}")
            m.odometry = _pose34(_floats(path, no, row, V_COLUMNS))
        elif kind == "obj":
            m.objects[_int(path, no, row, "id")] = np.array(_floats(path, no, row, V_COLUMNS[:4]))
        elif kind == "pixel":
            pid = _int(path, no, row, "id")
            m.pixels[pid] = np.array(_floats(path, no, row, V_COLUMNS[:2]))
            label = _float(path, no, row, "v3", required=False)
            if label is not None:
                m.labels[pid] = int(label)
        else:
            raise RecordError(path, no, f"unknown kind {kind!r}")
    return _contiguous(path, frames)


def _contiguous(path, frames: dict) -> list:
    order = sorted(frames)
    if order != list(range(len(order))):
        missing = sorted(set(range(order[-1] + 1)) - set(order)) if order else []
        raise RecordError(path, None, f"frames must be contiguous from 0; missing {missing[:5]}")
    out = []
    for t in order:
        m = frames[t]
        if m.odometry is None:
            if t == 0:
                m.odometry = Se3Pose.identity()
            else:
                raise RecordError(path, None, f"frame {t} has no odometry row")
        out.append(m)
    return out


# ---- ground truth -----------------------------------------------------------------


@dataclass
class TruthRecord:
    """The part of the ground truth the metrics need."""

    ego_poses: list
    objects: list  # per frame {id: (x, y, z, theta)}
    labels: list = field(default_factory=list)  # per frame {id: model name}

    @classmethod
    def from_truth(cls, truth: GroundTruth) -> "TruthRecord":
        n = len(truth.ego_poses)
        labels = [{oid: truth.object_labels[oid][t] for oid in truth.objects_at(t)} for t in range(n)]
        return cls(list(truth.ego_poses), [truth.objects_at(t) for t in range(n)], labels)


def write_truth(path, truth: GroundTruth, meta=()) -> None:
    rows = []
    for t, T in enumerate(truth.ego_poses):
        rows.append([t, "ego", 0, *_row34(T), ""])
        for oid in truth.object_ids:
            s = truth.object_states[oid][t]
            if np.isnan(s[0]):
                continue
            vals = [s[0], truth.object_y[oid], s[1], s[2], s[3], s[4]]
            rows.append([t, "object", oid, *[fmt(v) for v in vals], *[""] * 6, truth.object_labels[oid][t] or ""])
    for pid, p in zip(truth.landmark_ids, truth.landmarks):
        rows.append(["", "landmark", int(pid), *[fmt(v) for v in p], *[""] * 9, ""])
    write_table(path, "truth", rows, meta)


def read_truth(path) -> TruthRecord:
    ego: dict[int, Se3Pose] = {}
    objs: dict[int, dict] = {}
    labels: dict[int, dict] = {}
    for no, row in read_table(path, "truth"):
        kind = row["kind"]
        if kind == "landmark":
            continue
        t = _int(path, no, row, "frame")
        if kind == "ego":
            ego[t] = _pose34(_floats(path, no, row, V_COLUMNS))
        elif kind == "object":
            oid = _int(path, no, row, "id")
            objs.setdefault(t, {})[oid] = np.array(_floats(path, no, row, V_COLUMNS[:4]))
            labels.setdefault(t, {})[oid] = row["label"] or None
        else:
            raise RecordError(path, no, f"unknown kind {kind!r}")
    n = len(ego)
    if sorted(ego) != list(range(n)):
        raise RecordError(path, None, "ego frames must be contiguous from 0")
    return TruthRecord([ego[t] for t in range(n)], [objs.get(t, {}) for t in range(n)], [labels.get(t, {}) for t in range(n)])


# ---- estimates ----------------------------------------------------------------------


def write_estimate(path, log, meta=()) -> None:
    rows = []
    for t, T in enumerate(log.poses):
        rows.append([t, "pose", 0, *_row34(T)])
        objs = log.objects[t] if t < len(log.objects) else {}
        wts = log.weights[t] if t < len(log.weights) else {}
        for oid in sorted(objs):
            w = wts.get(oid, {})
            ws = [fmt(w[m]) if m in w else "" for m in MODEL_NAMES]
            rows.append([t, "object", oid, *[fmt(v) for v in objs[oid]], *ws, "", "", ""])
    write_table(path, "estimate", rows, meta)


@dataclass
class EstimateRecord:
    poses: list
    objects: list  # per frame {id: (x, y, z, theta, v, omega)}
    weights: list  # per frame {id: {model: weight}}


def read_estimate(path) -> EstimateRecord:
    poses: dict[int, Se3Pose] = {}
    objs: dict[int, dict] = {}
    wts: dict[int, dict] = {}
    for no, row in read_table(path, "estimate"):
        t = _int(path, no, row, "frame")
        if row["kind"] == "pose":
            poses[t] = _pose34(_floats(path, no, row, V_COLUMNS))
        elif row["kind"] == "object":
            oid = _int(path, no, row, "id")
            objs.setdefault(t, {})[oid] = np.array(_floats(path, no, row, V_COLUMNS[:6]))
            w = {m: _float(path, no, row, k, required=False) for m, k in zip(MODEL_NAMES, V_COLUMNS[6:9])}
            wts.setdefault(t, {})[oid] = {m: v for m, v in w.items() if v is not None}
        else:
            raise RecordError(path, no, f"unknown kind {row['kind']!r}")
    n = len(poses)
    if sorted(poses) != list(range(n)):
        raise RecordError(path, None, "pose frames must be contiguous from 0")
    return EstimateRecord([poses[t] for t in range(n)], [objs.get(t, {}) for t in range(n)], [wts.get(t, {}) for t in range(n)])


# ---- ingest formats -------------------------------------------------------------------


def write_ingest(det_path, odo_path, meas, meta=()) -> None:
    """Export measurements as externally produced detections and absolute odometry."""
    det, odo = [], []
    T_wc = np.eye(4)
    for m in meas:
        if m.frame > 0:
            T_wc = T_wc @ np.linalg.inv(m.odometry.matrix())
        odo.append([m.frame, *_row34(T_wc)])
        for oid in sorted(m.objects):
            det.append([m.frame, oid, *[fmt(v) for v in m.objects[oid]], fmt(1.0)])
    write_table(det_path, "detections", det, meta)
    write_table(odo_path, "odometry", odo, meta)


def read_ingest(det_path, odo_path, min_score: float = 0.0) -> list[FrameMeasurements]:
    """Detections plus absolute poses into per-frame measurements (no pixels)."""
    poses: dict[int, np.ndarray] = {}
    for no, row in read_table(odo_path, "odometry"):
        t = _int(odo_path, no, row, "frame")
        if t in poses:
            raise RecordError(odo_path, no, f"duplicate frame {t}")
        vals = _floats(odo_path, no, row, SCHEMAS["odometry"][1:])
        T = np.eye(4)
        T[:3, :4] = np.asarray(vals).reshape(3, 4)
        poses[t] = T
    order = sorted(poses)
    if not order:
        raise RecordError(odo_path, None, "no odometry rows")
    if order != list(range(len(order))):
        raise RecordError(odo_path, None, "frames must be contiguous from 0")
    frames = {
        t: FrameMeasurements(t, {}, {}, Se3Pose.identity() if t == 0 else Se3Pose.from_matrix(np.linalg.inv(poses[t]) @ poses[t - 1]), {})
        for t in order
    }
    for no, row in read_table(det_path, "detections"):
        t = _int(det_path, no, row, "frame")
        if t not in frames:
            raise RecordError(det_path, no, f"frame {t} has no odometry")
        oid = _int(det_path, no, row, "track_id")
        vals = _floats(det_path, no, row, ["x", "y", "z", "theta", "score"])
        if oid in frames[t].objects:
            raise RecordError(det_path, no, f"duplicate track {oid} in frame {t}")
        if vals[4] >= min_score:
            frames[t].objects[oid] = np.array(vals[:4])
    return [frames[t] for t in order]


# ---- schema check ---------------------------------------------------------------------


def detect_schema(path) -> str | None:
    """Match the header; tables sharing a header are told apart by their first kind."""
    lines = [l for l in Path(path).read_text().splitlines() if l.strip() and not l.startswith("#")]
    if not lines:
        return None
    cells = next(csv.reader([lines[0]]))
    names = [name for name, cols in SCHEMAS.items() if cells == cols]
    if len(names) > 1 and len(lines) > 1:
        kind = next(csv.reader([lines[1]]))[1] if "," in lines[1] else ""
        names = [n for n in names if kind in KINDS.get(n, ())] or names
    return names[0] if names else None


def check_file(path, schema: str | None = None) -> str:
    """Validate header, field count, kinds and numeric columns; returns the schema name."""
    schema = schema or detect_schema(path)
    if schema is None:
        raise RecordError(path, None, "header matches no known schema")
    numeric = {
        "metrics": ["trial", "value"],
        "aggregate": ["mean", "std", "median", "n"],
        "failures": ["trial", "seed"],
        "detections": SCHEMAS["detections"],
        "odometry": SCHEMAS["odometry"],
    }
    for no, row in read_table(path, schema):
        if schema in KINDS:
            if row["kind"] not in KINDS[schema]:
                raise RecordError(path, no, f"unknown kind {row['kind']!r}")
            cols = [c for c in ("frame", "id", *V_COLUMNS) if row[c] != ""]
        else:
            cols = numeric.get(schema, [])
        for c in cols:
            s = row[c]
            if s.lower() == "nan" and schema in ("metrics", "aggregate"):
                continue
            try:
                float(s)
            except ValueError:
                raise RecordError(path, no, f"{c} is not a number: {s!r}") from None
    return schema
