"""Synthetic world: scripted ego motion, static landmarks and moving objects,
plus the noisy per-frame measurements a visual frontend would hand over.

Conventions: right-handed, y pointing down, motion in the x-z plane. The
world frame coincides with the first camera frame. Object measurements are
emitted in the camera frame.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import CameraIntrinsics
from .lie import Se3Pose, rot_y, se3_exp, yaw_of
from .motion import FULL_DIM, ModelId, transition_array, wrap_angle

OBJECT_POINT_BASE = 1_000_000
# (longitudinal, lateral, vertical) offsets of the trackable points on a vehicle body
_BODY_POINTS = np.array(
    [[2.0, 0.9, -0.6], [2.0, -0.9, -0.6], [-2.0, 0.9, -0.6], [-2.0, -0.9, -0.6], [0.0, 0.0, -0.9], [1.0, 0.0, -0.8]]
)


class ScenarioError(ValueError):
    """Invalid scenario configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


@dataclass
class EgoSegment:
    duration: int
    speed: float
    turn_rate: float = 0.0


@dataclass
class ObjectSegment:
    model: str
    duration: int
    v: float = 0.0
    omega: float = 0.0


@dataclass
class ObjectScript:
    id: int
    start: list  # x, y, z, theta (world)
    segments: list
    first_frame: int = 0
    points: int = 4


@dataclass
class LandmarkConfig:
    count: int = 150
    ahead: tuple = (6.0, 60.0)
    lateral: tuple = (3.0, 25.0)
    height: tuple = (-4.0, 1.5)


@dataclass
class NoiseLevels:
    pixel: float = 1.0
    obj_pos: float = 0.5
    obj_heading: float = 0.1
    odo_rot: float = 0.005
    odo_trans: float = 0.05
    heavy_tail: bool = False
    heavy_tail_prob: float = 0.05
    heavy_tail_scale: float = 5.0

    def scaled(self, k: float) -> "NoiseLevels":
        out = copy.copy(self)
        for name in ("pixel", "obj_pos", "obj_heading", "odo_rot", "odo_trans"):
            setattr(out, name, getattr(self, name) * k)
        return out


@dataclass
class ScenarioConfig:
    name: str = "custom"
    frames: int = 60
    dt: float = 0.1
    intrinsics: tuple = (718.856, 718.856, 607.19, 185.22)
    image_size: tuple = (1241, 376)
    ego: list = field(default_factory=lambda: [EgoSegment(60, 8.0)])
    landmarks: LandmarkConfig = field(default_factory=LandmarkConfig)
    objects: list = field(default_factory=list)
    noise: NoiseLevels = field(default_factory=NoiseLevels)
    seed: int = 0
    transition: tuple | None = None
    max_range: float = 80.0

    @property
    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(*self.intrinsics)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intrinsics"] = list(self.intrinsics)
        d["image_size"] = list(self.image_size)
        d["transition"] = list(self.transition) if self.transition is not None else None
        for k in ("ahead", "lateral", "height"):
            d["landmarks"][k] = list(d["landmarks"][k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ScenarioError(sorted(extra)[0], "unknown field")
        try:
            kw = dict(d)
            if "ego" in kw:
                kw["ego"] = [EgoSegment(**s) for s in kw["ego"]]
            if "landmarks" in kw:
                kw["landmarks"] = LandmarkConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in kw["landmarks"].items()})
            if "objects" in kw:
                kw["objects"] = [
                    ObjectScript(**{**o, "segments": [ObjectSegment(**s) for s in o["segments"]]}) for o in kw["objects"]
                ]
            if "noise" in kw:
                kw["noise"] = NoiseLevels(**kw["noise"])
            for k in ("intrinsics", "image_size", "transition"):
                if kw.get(k) is not None:
                    kw[k] = tuple(kw[k])
            cfg = cls(**kw)
        except TypeError as exc:
            raise ScenarioError("config", str(exc)) from exc
        validate(cfg)
        return cfg


def validate(cfg: ScenarioConfig) -> None:
    if not isinstance(cfg.frames, int) or cfg.frames < 2:
        raise ScenarioError("frames", f"need an integer >= 2, got {cfg.frames!r}")
    if not (cfg.dt > 0 and math.isfinite(cfg.dt)):
        raise ScenarioError("dt", "must be positive")
    if len(cfg.intrinsics) != 4 or cfg.intrinsics[0] <= 0 or cfg.intrinsics[1] <= 0:
        raise ScenarioError("intrinsics", "need fx, fy > 0, cx, cy")
    if len(cfg.image_size) != 2 or min(cfg.image_size) <= 0:
        raise ScenarioError("image_size", "need positive width and height")
    if sum(s.duration for s in cfg.ego) != cfg.frames:
        raise ScenarioError("ego", "segment durations must sum to the frame count")
    ids = set()
    for o in cfg.objects:
        if o.id in ids:
            raise ScenarioError("objects", f"duplicate object id {o.id}")
        ids.add(o.id)
        if len(o.start) != 4:
            raise ScenarioError(f"objects[{o.id}].start", "need x, y, z, theta")
        if not 0 <= o.first_frame < cfg.frames:
            raise ScenarioError(f"objects[{o.id}].first_frame", "outside the sequence")
        if sum(s.duration for s in o.segments) != cfg.frames - o.first_frame:
            raise ScenarioError(f"objects[{o.id}].segments", "durations must cover the active span")
        for s in o.segments:
            if s.model not in ModelId.__members__:
                raise ScenarioError(f"objects[{o.id}].segments", f"unknown model {s.model!r}")
            if s.duration < 1:
                raise ScenarioError(f"objects[{o.id}].segments", "durations must be >= 1")
    n = cfg.noise
    for name in ("pixel", "obj_pos", "obj_heading", "odo_rot", "odo_trans"):
        if getattr(n, name) < 0:
            raise ScenarioError(f"noise.{name}", "sigma must be >= 0")
    if cfg.landmarks.count < 0:
        raise ScenarioError("landmarks.count", "must be >= 0")
    if cfg.transition is not None:
        a, b = cfg.transition
        if not 0 <= a <= b < cfg.frames:
            raise ScenarioError("transition", "segment outside the sequence")


@dataclass
class GroundTruth:
    ego_poses: list  # world-from-camera Se3Pose per frame
    ego_yaw: np.ndarray  # yaw of the camera-from-world rotation per frame
    landmark_ids: np.ndarray
    landmarks: np.ndarray
    object_ids: list
    object_states: dict  # id -> (frames, 5) full state, NaN where inactive
    object_y: dict
    object_labels: dict  # id -> list[str | None] per frame
    object_points: dict  # id -> (k, 3) body offsets

    def object_point_world(self, oid: int, t: int) -> np.ndarray:
        s = self.object_states[oid][t]
        th = s[2]
        fwd = np.array([math.cos(th), 0.0, math.sin(th)])
        lat = np.array([-math.sin(th), 0.0, math.cos(th)])
        base = np.array([s[0], self.object_y[oid], s[1]])
        off = self.object_points[oid]
        return base + off[:, :1] * fwd + off[:, 1:2] * lat + off[:, 2:3] * np.array([0.0, 1.0, 0.0])

    def objects_at(self, t: int) -> dict:
        """{id: (x, y, z, theta)} for objects active at frame ``t``."""
        out = {}
        for oid in self.object_ids:
            s = self.object_states[oid][t]
            if not np.isnan(s[0]):
                out[oid] = np.array([s[0], self.object_y[oid], s[1], s[2]])
        return out


@dataclass
class FrameMeasurements:
    frame: int
    pixels: dict  # point id -> (2,) pixel
    labels: dict  # point id -> owning object id, for points on objects
    odometry: Se3Pose  # T_{c_t <- c_{t-1}}; identity at frame 0
    objects: dict  # object id -> (x, y, z, theta) camera frame


def _ego_pose(x: float, z: float, heading: float) -> Se3Pose:
    # heading follows the object convention; camera +z is the forward axis
    return Se3Pose(rot_y(math.pi / 2 - heading), np.array([x, 0.0, z]))


def generate_scenario(cfg: ScenarioConfig) -> GroundTruth:
    validate(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    dt = cfg.dt

    poses = []
    state = np.array([0.0, 0.0, math.pi / 2, 0.0, 0.0])
    for seg in cfg.ego:
        for _ in range(seg.duration):
            poses.append(_ego_pose(state[0], state[1], state[2]))
            state[3], state[4] = seg.speed, seg.turn_rate
            state = transition_array(ModelId.CTRV, state, dt)
    ego_yaw = np.array([yaw_of(p.rotation.T) for p in poses])

    lm = cfg.landmarks
    n = lm.count
    anchor = rng.integers(0, cfg.frames, size=n)
    side = rng.choice([-1.0, 1.0], size=n)
    local = np.stack(
        [
            side * rng.uniform(*lm.lateral, size=n),
            rng.uniform(*lm.height, size=n),
            rng.uniform(*lm.ahead, size=n),
        ],
        axis=1,
    )
    landmarks = np.array([poses[a] @ p for a, p in zip(anchor, local)]).reshape(-1, 3)

    states, labels, ys, pts = {}, {}, {}, {}
    for o in cfg.objects:
        arr = np.full((cfg.frames, FULL_DIM), np.nan)
        lab: list = [None] * cfg.frames
        x, y, z, th = (float(v) for v in o.start)
        s = np.array([x, z, wrap_angle(th), 0.0, 0.0])
        t = o.first_frame
        for seg in o.segments:
            model = ModelId[seg.model]
            for _ in range(seg.duration):
                s[3] = seg.v if model is not ModelId.CP else 0.0
                s[4] = seg.omega if model is ModelId.CTRV else 0.0
                arr[t] = s
                lab[t] = model.value
                s = transition_array(model, s[: model.dim], dt)
                s = np.concatenate([s, np.zeros(FULL_DIM - model.dim)])
                s[2] = wrap_angle(s[2])
                t += 1
        states[o.id] = arr
        labels[o.id] = lab
        ys[o.id] = y
        pts[o.id] = _BODY_POINTS[: o.points].copy()
    return GroundTruth(
        ego_poses=poses,
        ego_yaw=ego_yaw,
        landmark_ids=np.arange(n),
        landmarks=landmarks,
        object_ids=[o.id for o in cfg.objects],
        object_states=states,
        object_y=ys,
        object_labels=labels,
        object_points=pts,
    )


def _in_image(uv: np.ndarray, size) -> np.ndarray:
    w, h = size
    return (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)


def observe_frame(truth: GroundTruth, t: int, cfg: ScenarioConfig, rng: np.random.Generator) -> FrameMeasurements:
    """Noisy measurements at frame ``t``; draws from ``rng`` in a fixed order."""
    if not 0 <= t < len(truth.ego_poses):
        raise IndexError(f"frame {t} out of range")
    K = cfg.camera
    noise = cfg.noise
    T_cw = truth.ego_poses[t].inverse()

    ids = [truth.landmark_ids]
    pts = [truth.landmarks]
    owner = [np.full(len(truth.landmark_ids), -1)]
    for oid in truth.object_ids:
        if np.isnan(truth.object_states[oid][t][0]):
            continue
        P = truth.object_point_world(oid, t)
        ids.append(OBJECT_POINT_BASE + 100 * oid + np.arange(len(P)))
        pts.append(P)
        owner.append(np.full(len(P), oid))
    ids = np.concatenate(ids)
    pts = np.concatenate(pts).reshape(-1, 3)
    owner = np.concatenate(owner)

    Xc = T_cw @ pts
    vis = (Xc[:, 2] > 0.1) & (Xc[:, 2] < cfg.max_range)
    uv = np.full((len(pts), 2), np.nan)
    uv[vis] = K.project(Xc[vis])
    vis &= _in_image(np.nan_to_num(uv, nan=-1.0), cfg.image_size)
    pix_noise = rng.normal(0.0, 1.0, size=(int(vis.sum()), 2)) * noise.pixel
    uv_obs = uv[vis] + pix_noise
    inside = _in_image(uv_obs, cfg.image_size)
    vid, vown = ids[vis][inside], owner[vis][inside]
    pixels = {int(i): p for i, p in zip(vid, uv_obs[inside])}
    labels = {int(i): int(o) for i, o in zip(vid, vown) if o >= 0}

    if t == 0:
        odo = Se3Pose.identity()
    else:
        rel = T_cw @ truth.ego_poses[t - 1]
        xi = rng.normal(0.0, 1.0, size=6) * np.array([noise.odo_rot] * 3 + [noise.odo_trans] * 3)
        odo = Se3Pose.from_matrix(se3_exp(xi) @ rel.matrix())

    objects = {}
    for oid in truth.object_ids:
        s = truth.object_states[oid][t]
        if np.isnan(s[0]):
            continue
        c = T_cw @ np.array([s[0], truth.object_y[oid], s[1]])
        if not (0.5 < c[2] < cfg.max_range):
            continue
        if not _in_image(K.project(c[None]), cfg.image_size)[0]:
            continue
        eps = rng.normal(0.0, 1.0, size=4) * np.array([noise.obj_pos] * 3 + [noise.obj_heading])
        if noise.heavy_tail:
            if rng.uniform() < noise.heavy_tail_prob:
                eps = eps * noise.heavy_tail_scale
        heading = wrap_angle(s[2] - truth.ego_yaw[t] + eps[3])
        objects[oid] = np.array([c[0] + eps[0], c[1] + eps[1], c[2] + eps[2], heading])
    return FrameMeasurements(t, pixels, labels, odo, objects)


def simulate(cfg: ScenarioConfig) -> tuple[GroundTruth, list[FrameMeasurements]]:
    truth = generate_scenario(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    return truth, [observe_frame(truth, t, cfg, rng) for t in range(cfg.frames)]


# --------------------------------------------------------------------------
# builtin scenarios


def _obj(oid, x, z, theta, segments, y=0.8, first=0):
    return ObjectScript(oid, [x, y, z, theta], [ObjectSegment(*s) for s in segments], first_frame=first)


def _base(name, frames, speed, objects, transition, landmarks=120, ego=None, noise=None) -> ScenarioConfig:
    return ScenarioConfig(
        name=name,
        frames=frames,
        ego=ego or [EgoSegment(frames, speed)],
        landmarks=LandmarkConfig(count=landmarks),
        objects=objects,
        noise=noise or NoiseLevels(),
        transition=transition,
    )


HALF_PI = math.pi / 2


def builtin_scenarios() -> dict:
    """Named scenario archetypes; every one carries a transition segment."""
    n = 60
    scen = {}
    # parked cars along both kerbs, one car that pulls away
    parked = [_obj(i, (-1) ** i * 5.0, 14.0 + 7.0 * i, HALF_PI, [("CP", n)]) for i in range(1, 6)]
    scen["mostly-static"] = _base(
        "mostly-static", n, 6.0,
        parked + [_obj(6, -2.5, 16.0, HALF_PI, [("CP", 25), ("CV", 35, 6.0)])],
        (20, 40),
    )
    # oncoming traffic in the opposite lane, ego far from most of it
    scen["oncoming"] = _base(
        "oncoming", n, 6.0,
        [
            _obj(1, 4.0, 70.0, -HALF_PI, [("CV", n, 7.0)]),
            _obj(2, 4.5, 90.0, -HALF_PI, [("CV", n, 5.0)]),
            _obj(3, 3.5, 55.0, -HALF_PI, [("CV", 20, 6.0), ("CTRV", 15, 5.0, -0.5), ("CV", 25, 5.0)]),
            _obj(4, -6.0, 35.0, HALF_PI, [("CP", n)]),
        ],
        (15, 40),
    )
    scen["mixed"] = _base(
        "mixed", n, 6.0,
        [
            _obj(1, -5.0, 20.0, HALF_PI, [("CP", n)]),
            _obj(2, 5.5, 30.0, HALF_PI, [("CP", n)]),
            _obj(3, -5.0, 40.0, HALF_PI, [("CP", n)]),
            _obj(4, -2.0, 15.0, HALF_PI, [("CV", 30, 7.0), ("CP", 30)]),
            _obj(5, 3.0, 25.0, HALF_PI, [("CV", 20, 8.0), ("CTRV", 20, 7.0, 0.4), ("CV", 20, 7.0)]),
        ],
        (20, 45),
    )
    scen["highway"] = _base(
        "highway", n, 10.0,
        [
            _obj(1, -3.5, 20.0, HALF_PI, [("CV", n, 11.0)]),
            _obj(2, 3.5, 25.0, HALF_PI, [("CV", n, 9.0)]),
            _obj(3, 0.0, 30.0, HALF_PI, [("CV", 20, 12.0), ("CTRV", 10, 12.0, 0.3), ("CTRV", 10, 12.0, -0.3), ("CV", 20, 12.0)]),
            _obj(4, -3.5, 40.0, HALF_PI, [("CV", n, 12.0)]),
            _obj(5, 3.5, 45.0, HALF_PI, [("CTRV", 30, 10.5, 0.05), ("CV", 30, 10.5)]),
        ],
        (20, 40),
    )
    # dense motion-pattern changes: stop, start, turn
    scen["transition"] = _base(
        "transition", n, 5.0,
        [
            _obj(1, -2.5, 14.0, HALF_PI, [("CV", 25, 7.0), ("CP", 35)]),
            _obj(2, 3.5, 20.0, HALF_PI, [("CP", 25), ("CV", 35, 7.0)]),
            _obj(3, -4.0, 26.0, HALF_PI, [("CV", 20, 6.0), ("CTRV", 25, 6.0, 0.45), ("CV", 15, 6.0)]),
            _obj(4, 5.0, 30.0, HALF_PI, [("CP", n)]),
            _obj(5, -5.5, 36.0, HALF_PI, [("CP", n)]),
        ],
        (20, 45),
        landmarks=80,
    )
    scen["diagnostic"] = _base(
        "diagnostic", 40, 6.0,
        [
            _obj(1, -5.0, 20.0, HALF_PI, [("CP", 40)]),
            _obj(2, -2.0, 15.0, HALF_PI, [("CV", 20, 7.0), ("CP", 20)]),
            _obj(3, 3.0, 25.0, HALF_PI, [("CV", 15, 7.0), ("CTRV", 25, 7.0, 0.3)]),
        ],
        (15, 30),
        noise=NoiseLevels(0.0, 0.0, 0.0, 0.0, 0.0),
    )
    scen["identification"] = _base(
        "identification", 40, 5.0,
        [
            _obj(1, -5.0, 25.0, HALF_PI, [("CP", 40)]),
            _obj(2, -2.0, 15.0, HALF_PI, [("CV", 40, 7.0)]),
            _obj(3, 4.0, 30.0, HALF_PI, [("CTRV", 40, 6.0, 0.4)]),
        ],
        (0, 39),
    )
    scen["runtime"] = _base(
        "runtime", 30, 5.0,
        [
            _obj(1, -5.0, 25.0, HALF_PI, [("CP", 30)]),
            _obj(2, -2.0, 15.0, HALF_PI, [("CV", 30, 7.0)]),
            _obj(3, 4.0, 30.0, HALF_PI, [("CTRV", 30, 6.0, 0.4)]),
            _obj(4, 2.5, 20.0, HALF_PI, [("CV", 15, 6.0), ("CP", 15)]),
            _obj(5, -4.5, 35.0, HALF_PI, [("CP", 30)]),
        ],
        (10, 20),
        landmarks=200,
    )
    scen["runtime"].landmarks = LandmarkConfig(count=200, ahead=(15.0, 45.0), lateral=(3.0, 12.0), height=(-2.0, 1.2))
    return scen


def get_scenario(name: str) -> ScenarioConfig:
    scen = builtin_scenarios()
    if name not in scen:
        raise ScenarioError("scenario", f"unknown builtin {name!r}; choose from {sorted(scen)}")
    return scen[name]
