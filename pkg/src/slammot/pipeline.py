"""End-to-end estimation at the four cooperation levels.

L0  pose/point bundle adjustment; points on moving objects are not filtered.
L1  object points removed from SLAM; objects smoothed afterwards by a CV EKF
    on measurements placed in the world with the estimated pose.
L2  poses, points and CV object vertices solved jointly in one window.
L3  as L2 with the CP/CV/CTRV bank, IMM weights scaling each model's edges,
    and the optimized states fed back into the IMM.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import (
    CameraIntrinsics,
    FrameInput,
    GraphConfig,
    InfoWeights,
    MapInput,
    ObjectInput,
    SolverConfig,
    build_window,
    optimize,
)
from .imm import (
    WEIGHT_FLOOR,
    ImmOptions,
    ImmTrack,
    Measurement,
    imm_step,
    init_track,
    predict_track,
    set_means,
    synthesize,
    transition_matrix,
)
from .lie import Se3Pose, se3_inv, yaw_of
from .motion import ALL_MODELS, FULL_DIM, ModelId, NoiseConfig, wrap_angle

log = logging.getLogger(__name__)

CHI2_2DOF_95 = 5.991


class LevelId(enum.Enum):
    L0 = 0
    L1 = 1
    L2 = 2
    L3 = 3

    def __str__(self) -> str:
        return self.name


@dataclass
class PipelineConfig:
    intrinsics: CameraIntrinsics
    dt: float = 0.1
    window: int = 10
    stride: int = 1
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    pixel_sigma: float = 1.0
    odo_sigma: tuple = (0.1, 0.2)  # rotation (rad), translation (m)
    tau: float = 0.02
    weight_floor: float = WEIGHT_FLOOR
    likelihood: str = "prior"
    init_weights: tuple | None = None
    coast: int = 2
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(rel_tol=1e-5, max_iterations=10))
    chi2: float = CHI2_2DOF_95
    min_parallax_deg: float = 1.0
    # world-frame translation added to the pose L1 uses to place its objects
    pose_bias: tuple | None = None
    info: InfoWeights | None = None

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must hold at least two frames")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @classmethod
    def for_scenario(cls, scenario, sigma_floor: float = 1e-3, **kw) -> "PipelineConfig":
        """Filter and graph noise matched to the scenario's sigmas (floored)."""
        n = scenario.noise
        pos, head = max(n.obj_pos, sigma_floor), max(n.obj_heading, sigma_floor)
        noise = kw.pop("noise", None) or NoiseConfig(r=(pos**2, pos**2, head**2))
        return cls(
            intrinsics=scenario.camera,
            dt=scenario.dt,
            noise=noise,
            pixel_sigma=max(n.pixel, sigma_floor),
            odo_sigma=(max(n.odo_rot, sigma_floor), max(n.odo_trans, sigma_floor)),
            **kw,
        )

    def graph_info(self) -> InfoWeights:
        if self.info is not None:
            return self.info
        return InfoWeights.from_noise(self.noise, self.pixel_sigma, self.odo_sigma)


@dataclass
class EstimateLog:
    level: LevelId
    poses: list = field(default_factory=list)  # world-from-camera Se3Pose per frame
    objects: list = field(default_factory=list)  # per frame {id: (x, y, z, theta, v, omega)}
    weights: list = field(default_factory=list)  # per frame {id: {model name: weight}}
    timing_ms: list = field(default_factory=list)
    iterations: list = field(default_factory=list)  # solver iterations per frame (0 if no solve)
    last_graph: object = None

    @property
    def frames(self) -> int:
        return len(self.poses)


def _graph_from_motion(s: np.ndarray, y: float, model: ModelId) -> np.ndarray:
    g = np.zeros(FULL_DIM + 1)
    g[0], g[1], g[2] = s[0], y, s[1]
    g[3 : 3 + len(s) - 2] = s[2:]
    return g[: model.dim + 1]


def _motion_from_graph(g: np.ndarray) -> np.ndarray:
    full = np.zeros(FULL_DIM)
    full[0], full[1] = g[0], g[2]
    full[2 : 2 + len(g) - 3] = g[3:]
    return full


def triangulate(poses_cw: np.ndarray, uv: np.ndarray, mask: np.ndarray, K: CameraIntrinsics):
    """Batched linear (DLT) triangulation.

    ``poses_cw`` (N, k, 4, 4), ``uv`` (N, k, 2), ``mask`` (N, k) marks valid
    slots. Returns (N, 3) points; rows that cannot be solved are NaN.
    """
    xn = (uv[..., 0] - K.cx) / K.fx
    yn = (uv[..., 1] - K.cy) / K.fy
    P = poses_cw[..., :3, :]
    r1 = xn[..., None] * P[..., 2, :] - P[..., 0, :]
    r2 = yn[..., None] * P[..., 2, :] - P[..., 1, :]
    A = np.concatenate([r1, r2], axis=1) * np.concatenate([mask, mask], axis=1)[..., None]
    _, _, Vt = np.linalg.svd(A)
    h = Vt[:, -1, :]
    ok = np.abs(h[:, 3]) > 1e-12
    X = np.full((len(h), 3), np.nan)
    X[ok] = h[ok, :3] / h[ok, 3:4]
    return X


class _Runner:
    def __init__(self, level: LevelId, cfg: PipelineConfig):
        self.level = level
        self.cfg = cfg
        self.K = cfg.intrinsics
        self.models = ALL_MODELS if level is LevelId.L3 else (ModelId.CV,)
        self.coupled = level in (LevelId.L2, LevelId.L3)
        self.C = transition_matrix(cfg.tau, len(self.models))
        self.imm_opts = ImmOptions(cfg.weight_floor, cfg.likelihood)
        self.gcfg = GraphConfig(
            self.K, cfg.dt, cfg.graph_info(), single_model=ModelId.CV if level is LevelId.L2 else None
        )
        self.poses: dict[int, np.ndarray] = {}  # camera-from-world
        self.odo: dict[int, Se3Pose] = {}
        self.obs: dict[int, dict[int, np.ndarray]] = {}  # point -> frame -> pixel
        self.frame_points: dict[int, list] = {}
        self.map: dict[int, np.ndarray] = {}
        self.bad: set[int] = set()
        self.outlier_obs: set[tuple[int, int]] = set()
        self.tracks: dict[int, ImmTrack] = {}
        self.track_frame: dict[int, int] = {}
        self.obj_y: dict[int, float] = {}
        self.hist: dict[int, dict[int, dict]] = {}
        self.log = EstimateLog(level)

    # ---- geometry helpers ----------------------------------------------------

    def _to_world(self, T_cw: np.ndarray, z: np.ndarray, bias=None):
        T_wc = se3_inv(T_cw)
        p = T_wc[:3, :3] @ z[:3] + T_wc[:3, 3]
        if bias is not None:
            p = p + np.asarray(bias, dtype=float)
        theta = wrap_angle(z[3] + float(yaw_of(T_cw[:3, :3])))
        return p, theta

    # ---- per-frame stages ------------------------------------------------------

    def _ingest_pixels(self, t: int, m) -> None:
        keep_dynamic = self.level is LevelId.L0
        pts = []
        for pid, uv in m.pixels.items():
            if not keep_dynamic and pid in m.labels:
                continue
            self.obs.setdefault(pid, {})[t] = np.asarray(uv, dtype=float)
            pts.append(pid)
        self.frame_points[t] = pts

    def _window_frames(self, t: int) -> list[int]:
        return list(range(max(0, t - self.cfg.window + 1), t + 1))

    def _triangulate_new(self, t: int, frames: list[int]) -> None:
        fset = set(frames)
        cands, slots = [], []
        for pid in self.frame_points[t]:
            if pid in self.map or pid in self.bad:
                continue
            views = [(f, uv) for f, uv in self.obs[pid].items() if f in fset and (pid, f) not in self.outlier_obs]
            if len(views) >= 2:
                cands.append(pid)
                slots.append(views)
        if not cands:
            return
        kmax = max(len(v) for v in slots)
        n = len(cands)
        Ts = np.tile(np.eye(4), (n, kmax, 1, 1))
        uv = np.zeros((n, kmax, 2))
        mask = np.zeros((n, kmax))
        for i, views in enumerate(slots):
            for j, (f, p) in enumerate(views):
                Ts[i, j] = self.poses[f]
                uv[i, j] = p
                mask[i, j] = 1.0
        X = triangulate(Ts, uv, mask, self.K)
        Xc = np.einsum("nkij,nj->nki", Ts[..., :3, :3], np.nan_to_num(X)) + Ts[..., :3, 3]
        depth_ok = np.all((Xc[..., 2] > 0.1) | (mask == 0), axis=1) & np.all(np.isfinite(X), axis=1)
        Z = np.where(mask > 0, Xc[..., 2], 1.0)
        proj = np.stack([self.K.fx * Xc[..., 0] / Z + self.K.cx, self.K.fy * Xc[..., 1] / Z + self.K.cy], axis=-1)
        chi2 = np.sum((proj - uv) ** 2, axis=-1) / self.cfg.pixel_sigma**2
        reproj_ok = np.all((chi2 < self.cfg.chi2) | (mask == 0), axis=1)
        # parallax between the rays of the first and last views
        centers = -np.einsum("nkji,nkj->nki", Ts[..., :3, :3], Ts[..., :3, 3])
        last = (mask.sum(axis=1) - 1).astype(int)
        c0 = centers[:, 0]
        c1 = centers[np.arange(n), last]
        d0 = X - c0
        d1 = X - c1
        cosang = np.sum(d0 * d1, axis=1) / (np.linalg.norm(d0, axis=1) * np.linalg.norm(d1, axis=1) + 1e-300)
        parallax_ok = cosang < math.cos(math.radians(self.cfg.min_parallax_deg))
        good = depth_ok & reproj_ok & parallax_ok
        for pid, X_i, ok in zip(cands, X, good):
            if ok:
                self.map[pid] = X_i

    def _object_inputs(self, frames: list[int]) -> list[ObjectInput]:
        out = []
        fset = set(frames)
        for oid in sorted(self.hist):
            h = self.hist[oid]
            fs = [f for f in sorted(h) if f in fset]
            if not fs:
                continue
            out.append(
                ObjectInput(
                    oid, fs, [h[f]["z"] for f in fs], [h[f]["w"] for f in fs], [h[f]["state"] for f in fs]
                )
            )
        return out

    def _solve_window(self, t: int, frames: list[int]) -> int:
        finputs = []
        for i, f in enumerate(frames):
            finputs.append(
                FrameInput(f, Se3Pose.from_matrix(self.poses[f]), self.odo[f] if i > 0 else None, fixed=(i == 0))
            )
        pids = set()
        for f in frames:
            pids.update(p for p in self.frame_points[f] if p in self.map)
        fset = set(frames)
        obs = {
            p: [(f, uv) for f, uv in self.obs[p].items() if f in fset and (p, f) not in self.outlier_obs]
            for p in sorted(pids)
        }
        map_in = MapInput({p: self.map[p] for p in obs}, obs)
        objs = self._object_inputs(frames) if self.coupled else []
        g = build_window(finputs, map_in, objs, self.gcfg)
        iters = optimize(g, self.cfg.solver).iterations
        if math.isfinite(self.cfg.chi2) and len(g.rp_pose):
            # rejected observations leave the graph from the next window on
            bad = g.reprojection_chi2() > self.cfg.chi2
            for a, j in zip(g.rp_pose[bad], g.rp_point[bad]):
                self.outlier_obs.add((g.point_ids[j], g.frames[a]))
        self._write_back(g)
        self.log.last_graph = g
        return iters

    def _write_back(self, g) -> None:
        for f, T in zip(g.frames, g.poses):
            self.poses[f] = T.copy()
        for pid, p in zip(g.point_ids, g.points):
            self.map[pid] = p.copy()
        # points whose observations were mostly rejected are retired
        for pid in g.point_ids:
            n_obs = len(self.obs[pid])
            n_bad = sum((pid, f) in self.outlier_obs for f in self.obs[pid])
            if n_obs >= 2 and 2 * n_bad >= n_obs:
                del self.map[pid]
                self.bad.add(pid)
        for (oid, f), states in g.object_states().items():
            if oid in self.hist and f in self.hist[oid]:
                self.hist[oid][f]["state"].update(states)

    def _track_objects(self, t: int, m) -> dict:
        """IMM cycle for every measured object; returns {id: world meas}."""
        cfg = self.cfg
        world = {}
        T_cw = self.poses[t]
        bias = cfg.pose_bias if self.level is LevelId.L1 else None
        for oid in sorted(m.objects):
            z = np.asarray(m.objects[oid], dtype=float)
            p, theta = self._to_world(T_cw, z, bias)
            meas = Measurement(oid, float(p[0]), float(p[2]), float(theta), t)
            if oid not in self.tracks:
                w0 = None
                if cfg.init_weights is not None and len(self.models) == len(ALL_MODELS):
                    w0 = cfg.init_weights
                tr = init_track(oid, meas, cfg.noise, self.models, weights=w0)
                self.hist.pop(oid, None)
            else:
                dt = (t - self.track_frame[oid]) * cfg.dt
                tr, _, _ = imm_step(self.tracks[oid], meas, dt, self.C, cfg.noise, self.imm_opts)
            self.tracks[oid] = tr
            self.track_frame[oid] = t
            self.obj_y[oid] = float(p[1])
            world[oid] = p
            if self.coupled:
                w = {mdl: tr.weight(mdl) for mdl in tr.models}
                state = {mdl: _graph_from_motion(tr.estimate(mdl).mean.vec, float(p[1]), mdl) for mdl in tr.models}
                self.hist.setdefault(oid, {})[t] = {"z": z, "w": w, "state": state}
        return world

    def _coast(self, t: int, measured) -> None:
        for oid in sorted(self.tracks):
            if oid in measured:
                continue
            tr = self.tracks[oid]
            if t - tr.last_update > self.cfg.coast:
                del self.tracks[oid]
                self.hist.pop(oid, None)
                continue
            dt = (t - self.track_frame[oid]) * self.cfg.dt
            self.tracks[oid] = predict_track(tr, dt, self.C, self.cfg.noise, self.imm_opts)
            self.track_frame[oid] = t

    def _feedback(self, t: int) -> None:
        for oid, tr in self.tracks.items():
            if tr.last_update != t or oid not in self.hist or t not in self.hist[oid]:
                continue
            states = self.hist[oid][t]["state"]
            self.tracks[oid] = set_means(tr, {mdl: _motion_from_graph(s) for mdl, s in states.items()})
            self.obj_y[oid] = self._fused_height(tr, states)

    def _fused_height(self, tr, states) -> float:
        """IMM-weighted mean of the per-model vertex heights."""
        ys = [(tr.weight(mdl), s[1]) for mdl, s in states.items()]
        tot = sum(w for w, _ in ys)
        if tot > 0:
            return sum(w * v for w, v in ys) / tot
        return float(np.mean([v for _, v in ys]))

    def _report_objects(self, t: int) -> None:
        objs, wts = {}, {}
        for oid in sorted(self.tracks):
            tr = self.tracks[oid]
            x, _ = synthesize(tr)
            if self.coupled and tr.last_update == t and oid in self.hist and t in self.hist[oid]:
                y = self._fused_height(tr, self.hist[oid][t]["state"])
            else:
                y = self.obj_y[oid]
            objs[oid] = np.array([x[0], y, x[1], x[2], x[3], x[4]])
            wts[oid] = {str(mdl): tr.weight(mdl) for mdl in tr.models}
        self.log.objects.append(objs)
        self.log.weights.append(wts)

    # ---- driver ------------------------------------------------------------------

    def step(self, t: int, m) -> None:
        t0 = time.perf_counter()
        if t == 0:
            self.poses[0] = np.eye(4)
        else:
            self.odo[t] = m.odometry
            self.poses[t] = m.odometry.matrix() @ self.poses[t - 1]
        self._ingest_pixels(t, m)

        measured = {}
        if self.coupled:
            measured = self._track_objects(t, m)
            self._coast(t, measured)

        iters = 0
        frames = self._window_frames(t)
        if len(frames) >= 2 and (t % self.cfg.stride == 0):
            self._triangulate_new(t, frames)
            iters = self._solve_window(t, frames)

        if self.coupled:
            self._feedback(t)
            self._report_objects(t)
        elif self.level is LevelId.L1:
            measured = self._track_objects(t, m)
            self._coast(t, measured)
            self._report_objects(t)
        else:
            self.log.objects.append({})
            self.log.weights.append({})
        self.log.iterations.append(iters)
        self.log.timing_ms.append(1e3 * (time.perf_counter() - t0))

    def finish(self) -> EstimateLog:
        self.log.poses = [Se3Pose.from_matrix(se3_inv(self.poses[f])) for f in sorted(self.poses)]
        return self.log


def run_level(level: LevelId, meas, cfg: PipelineConfig) -> EstimateLog:
    meas = list(meas)
    if len(meas) < 2:
        raise ValueError("need at least two frames")
    for i, m in enumerate(meas):
        if m.frame != i:
            raise ValueError(f"frames must be contiguous from 0; got {m.frame} at position {i}")
    runner = _Runner(LevelId(level), cfg)
    for t, m in enumerate(meas):
        runner.step(t, m)
    return runner.finish()


def run_level0(meas, cfg: PipelineConfig) -> EstimateLog:
    return run_level(LevelId.L0, meas, cfg)


def run_level1(meas, cfg: PipelineConfig) -> EstimateLog:
    return run_level(LevelId.L1, meas, cfg)


def run_level2(meas, cfg: PipelineConfig) -> EstimateLog:
    return run_level(LevelId.L2, meas, cfg)


def run_level3(meas, cfg: PipelineConfig) -> EstimateLog:
    return run_level(LevelId.L3, meas, cfg)


def pinned_cv_config(cfg: PipelineConfig) -> PipelineConfig:
    """L3 settings under which the bank degenerates to the single CV model."""
    return replace(cfg, tau=0.0, weight_floor=0.0, init_weights=(0.0, 1.0, 0.0))
