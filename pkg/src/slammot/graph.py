"""Sliding-window factor graph coupling ego poses, static map points and
per-model object states.

Pose vertices hold camera-from-world transforms ``T_cw`` and are updated on
the manifold by left multiplication, ``T <- exp(delta) T``. Object vertices
use the layout ``(x, y, z, theta[, v[, omega]])`` in world coordinates with
4/5/6 components for CP/CV/CTRV.

Every residual is whitened by ``sqrt(model_weight * information)`` so the
optimized objective is the plain sum of squares of the stacked residual.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .lie import (
    Se3Pose,
    hat,
    orthonormalize,
    se3_adjoint,
    se3_exp,
    se3_inv,
    se3_left_jacobian_inv,
    se3_log,
    se3_right_jacobian_inv,
    yaw_of,
)
from .motion import ALL_MODELS, ModelId, NoiseConfig, jacobian_array, transition_array, wrap_angle

log = logging.getLogger(__name__)

VERTEX_DIM = {ModelId.CP: 4, ModelId.CV: 5, ModelId.CTRV: 6}
VELOCITY_DIM = {ModelId.CP: 0, ModelId.CV: 1, ModelId.CTRV: 2}
# graph layout (x, y, z, theta, v, omega) -> motion-model layout (x, z, theta, v, omega)
_TO_MOTION = [0, 2, 3, 4, 5]


class CheiralityError(ValueError):
    """Point lies at or behind the camera centre."""


class SingularSystemError(np.linalg.LinAlgError):
    def __init__(self, iteration: int, msg: str = "normal equations are singular"):
        super().__init__(f"{msg} (iteration {iteration})")
        self.iteration = iteration


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def project(self, Xc: np.ndarray) -> np.ndarray:
        Xc = np.asarray(Xc, dtype=float)
        Z = Xc[..., 2]
        return np.stack([self.fx * Xc[..., 0] / Z + self.cx, self.fy * Xc[..., 1] / Z + self.cy], axis=-1)

    def backproject(self, uv, depth) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        depth = np.asarray(depth, dtype=float)
        x = (uv[..., 0] - self.cx) / self.fx * depth
        y = (uv[..., 1] - self.cy) / self.fy * depth
        return np.stack([x, y, depth * np.ones_like(x)], axis=-1)


@dataclass(frozen=True)
class InfoWeights:
    """Diagonal information (inverse variance) per residual component."""

    pixel: float = 1.0
    odometry: tuple[float, ...] = (100.0, 100.0, 100.0, 25.0, 25.0, 25.0)
    obj_meas: tuple[float, ...] = (4.0, 4.0, 4.0, 100.0)
    system: dict = field(
        default_factory=lambda: {m: (100.0, 100.0, 100.0, 400.0) for m in ALL_MODELS}
    )
    constant: dict = field(
        default_factory=lambda: {ModelId.CV: (25.0,), ModelId.CTRV: (25.0, 100.0)}
    )

    @classmethod
    def from_noise(
        cls,
        noise: NoiseConfig,
        pixel_sigma: float = 1.0,
        odo_sigma: tuple[float, float] = (0.1, 0.2),
    ) -> "InfoWeights":
        r = noise.r
        system, constant = {}, {}
        for m in ALL_MODELS:
            q = noise.q_for(m)
            # y has no process noise of its own; it shares the x entry
            system[m] = (1 / q[0], 1 / q[0], 1 / q[1], 1 / q[2])
            if m is not ModelId.CP:
                constant[m] = tuple(1 / e for e in q[3:])
        return cls(
            pixel=1.0 / pixel_sigma**2,
            odometry=(1 / odo_sigma[0] ** 2,) * 3 + (1 / odo_sigma[1] ** 2,) * 3,
            obj_meas=(1 / r[0], 1 / r[0], 1 / r[1], 1 / r[2]),
            system=system,
            constant=constant,
        )


@dataclass(frozen=True)
class SolverConfig:
    damping: float = 1e-4
    factor: float = 10.0
    max_iterations: int = 20
    rel_tol: float = 1e-9
    abs_tol: float = 1e-24
    step_tol: float = 1e-8  # relative to the parameter norm
    max_damping: float = 1e12
    huber: float | None = None


@dataclass
class OptimizeReport:
    iterations: int
    initial_cost: float
    final_cost: float
    accepted: int = 0


# --------------------------------------------------------------------------
# residual kernels (batched); each returns (residual, jacobian blocks...)


def _reproj_kernel(T, m, uv, intr: CameraIntrinsics, jac=True):
    R, t = T[:, :3, :3], T[:, :3, 3]
    Xc = np.einsum("eij,ej->ei", R, m) + t
    X, Y, Z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    iz = 1.0 / Z
    e = np.empty((len(m), 2))
    e[:, 0] = uv[:, 0] - (intr.fx * X * iz + intr.cx)
    e[:, 1] = uv[:, 1] - (intr.fy * Y * iz + intr.cy)
    if not jac:
        return e, Xc
    dp = np.zeros((len(m), 2, 3))
    dp[:, 0, 0] = -intr.fx * iz
    dp[:, 0, 2] = intr.fx * X * iz * iz
    dp[:, 1, 1] = -intr.fy * iz
    dp[:, 1, 2] = intr.fy * Y * iz * iz
    dX = np.zeros((len(m), 3, 6))
    dX[:, :, :3] = -hat(Xc)
    dX[:, :, 3:] = np.eye(3)
    return e, Xc, dp @ dX, dp @ R


def _odo_kernel(Ta, Tb, Trel, jac=True):
    # error expressed in the newer camera frame so a world shift leaves it unchanged
    E = Tb @ se3_inv(Ta) @ se3_inv(Trel)
    e = se3_log(E)
    if not jac:
        return (e,)
    Jb = se3_left_jacobian_inv(e)
    Ja = -se3_right_jacobian_inv(e) @ se3_adjoint(Trel)
    return e, Ja, Jb


def _yaw_grad(R):
    """d yaw / d omega under a left rotation perturbation (only rotation part)."""
    r00, r02 = R[:, 0, 0], R[:, 0, 2]
    d00 = np.stack([np.zeros_like(r00), R[:, 2, 0], -R[:, 1, 0]], axis=-1)
    d02 = np.stack([np.zeros_like(r00), R[:, 2, 2], -R[:, 1, 2]], axis=-1)
    den = (r00 * r00 + r02 * r02)[:, None]
    return (r00[:, None] * d02 - r02[:, None] * d00) / den


def _objmeas_kernel(T, s, z, jac=True):
    R, t = T[:, :3, :3], T[:, :3, 3]
    p = s[:, :3]
    Xc = np.einsum("eij,ej->ei", R, p) + t
    phi = yaw_of(R)
    e = np.empty((len(s), 4))
    e[:, :3] = Xc - z[:, :3]
    e[:, 3] = wrap_angle(s[:, 3] - phi - z[:, 3])
    if not jac:
        return (e,)
    n, d = s.shape
    Jp = np.zeros((n, 4, 6))
    Jp[:, :3, :3] = -hat(Xc)
    Jp[:, :3, 3:] = np.eye(3)
    Jp[:, 3, :3] = -_yaw_grad(R)
    Js = np.zeros((n, 4, d))
    Js[:, :3, :3] = R
    Js[:, 3, 3] = 1.0
    return e, Jp, Js


def motion_graph(model: ModelId, s: np.ndarray, dt) -> np.ndarray:
    """Propagate graph-layout states; y is carried unchanged."""
    d = VERTEX_DIM[model]
    idx = _TO_MOTION[: d - 1]
    out = np.array(s, dtype=float, copy=True)
    dt = np.asarray(dt, dtype=float)
    if model is ModelId.CP:
        return out
    # transition kernels broadcast over dt when it is per-edge
    mot = s[..., idx]
    if dt.ndim:
        res = np.empty_like(mot)
        for u in np.unique(dt):
            sel = dt == u
            res[sel] = transition_array(model, mot[sel], float(u))
        out[..., idx] = res
    else:
        out[..., idx] = transition_array(model, mot, float(dt))
    return out


def _motion_jac_graph(model: ModelId, s: np.ndarray, dt: np.ndarray) -> np.ndarray:
    n, d = s.shape
    idx = _TO_MOTION[: d - 1]
    J = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    if model is ModelId.CP:
        return J
    mot = s[:, idx]
    A = np.empty((n, d - 1, d - 1))
    for u in np.unique(dt):
        sel = dt == u
        A[sel] = jacobian_array(model, mot[sel], float(u))
    J[np.ix_(np.arange(n), idx, idx)] = A
    return J


def _sys_kernel(model: ModelId, sa, sb, dt, jac=True):
    g = motion_graph(model, sa, dt)
    e = sb[:, :4] - g[:, :4]
    e[:, 3] = wrap_angle(e[:, 3])
    if not jac:
        return (e,)
    n, d = sa.shape
    Ja = -_motion_jac_graph(model, sa, dt)[:, :4, :]
    Jb = np.zeros((n, 4, d))
    Jb[:, :, :4] = np.eye(4)
    return e, Ja, Jb


def _cst_kernel(model: ModelId, sa, sb, jac=True):
    k = VELOCITY_DIM[model]
    e = sb[:, 4:] - sa[:, 4:]
    if not jac:
        return (e,)
    n, d = sa.shape
    Jb = np.zeros((n, k, d))
    Jb[:, :, 4:] = np.eye(k)
    return e, -Jb, Jb


# --------------------------------------------------------------------------
# single-edge API


def _as_T(pose: Se3Pose) -> np.ndarray:
    return pose.matrix()[None]


def residual_reprojection(pose: Se3Pose, point, pixel, K: CameraIntrinsics) -> np.ndarray:
    """Pixel minus the projection of world ``point`` through camera-from-world ``pose``."""
    m = np.asarray(point, dtype=float)[None]
    e, Xc = _reproj_kernel(_as_T(pose), m, np.asarray(pixel, dtype=float)[None], K, jac=False)
    if Xc[0, 2] <= 0.0:
        raise CheiralityError(f"point depth {Xc[0, 2]:.3g} is not positive")
    return e[0]


def residual_odometry(T_t: Se3Pose, T_t1: Se3Pose, T_rel: Se3Pose) -> np.ndarray:
    """log(T_t1 T_t^-1 T_rel^-1) as (rotation, translation); zero iff T_t1 = T_rel T_t."""
    return _odo_kernel(_as_T(T_t), _as_T(T_t1), _as_T(T_rel), jac=False)[0][0]


def ego_yaw(pose: Se3Pose) -> float:
    return float(yaw_of(pose.rotation))


def residual_object_measurement(pose: Se3Pose, obj_state, z, ego_yaw_angle: float | None = None) -> np.ndarray:
    """Camera-frame object pose predicted from the world-frame vertex minus ``z``.

    ``obj_state`` is a graph-layout vertex; ``z`` is (x, y, z, theta) in the
    camera frame. The heading offset defaults to the yaw of ``pose``.
    """
    s = np.asarray(obj_state, dtype=float)[None]
    zz = np.asarray(z, dtype=float)[None]
    e = _objmeas_kernel(_as_T(pose), s, zz, jac=False)[0][0]
    if ego_yaw_angle is not None:
        e[3] = wrap_angle(s[0, 3] - ego_yaw_angle - zz[0, 3])
    return e


def residual_object_system(model: ModelId, s_t, o_t1, dt: float) -> np.ndarray:
    s = np.asarray(s_t, dtype=float)[None]
    o = np.asarray(o_t1, dtype=float)[None, :4]
    return _sys_kernel(model, s, o, np.array([dt]), jac=False)[0][0]


def residual_constant_motion(model: ModelId, v_t, v_t1) -> np.ndarray:
    if model is ModelId.CP:
        raise ValueError("constant-motion residual is undefined for CP")
    v_t = np.atleast_1d(np.asarray(v_t, dtype=float))
    v_t1 = np.atleast_1d(np.asarray(v_t1, dtype=float))
    if v_t.shape != (VELOCITY_DIM[model],) or v_t1.shape != v_t.shape:
        raise ValueError(f"{model} velocity state has {VELOCITY_DIM[model]} entries")
    return v_t1 - v_t


# --------------------------------------------------------------------------
# window inputs


@dataclass
class FrameInput:
    frame: int
    pose: Se3Pose  # camera-from-world estimate
    odometry: Se3Pose | None = None  # measured T_{c_t <- c_{t-1}}
    fixed: bool = False


@dataclass
class MapInput:
    positions: dict  # point id -> (3,) world position estimate
    observations: dict  # point id -> list of (frame, (2,) pixel)


@dataclass
class ObjectInput:
    """Measurements of one object inside the window, oldest first."""

    object_id: int
    frames: list
    z: list  # (x, y, z, theta) camera frame
    weights: list  # dict model -> weight, per frame
    init: list  # dict model -> graph-layout state, per frame


@dataclass(frozen=True)
class GraphConfig:
    intrinsics: CameraIntrinsics
    dt: float
    info: InfoWeights = InfoWeights()
    single_model: ModelId | None = None  # CV for the single-model coupled variant


@dataclass
class _ModelBlock:
    keys: list = field(default_factory=list)  # (object_id, frame)
    states: np.ndarray = None
    meas_pose: np.ndarray = None
    meas_vert: np.ndarray = None
    meas_z: np.ndarray = None
    meas_w: np.ndarray = None
    sys_a: np.ndarray = None
    sys_b: np.ndarray = None
    sys_dt: np.ndarray = None
    sys_w: np.ndarray = None


class SlammotGraph:
    """Vertices and edges of one optimization window."""

    def __init__(self, cfg: GraphConfig):
        self.cfg = cfg
        self.frames: list[int] = []
        self.poses = np.zeros((0, 4, 4))
        self.fixed = np.zeros(0, dtype=bool)
        self.point_ids: list[int] = []
        self.points = np.zeros((0, 3))
        self.rp_pose = np.zeros(0, dtype=int)
        self.rp_point = np.zeros(0, dtype=int)
        self.rp_uv = np.zeros((0, 2))
        self.odo_a = np.zeros(0, dtype=int)
        self.odo_b = np.zeros(0, dtype=int)
        self.odo_T = np.zeros((0, 4, 4))
        self.objects: dict[ModelId, _ModelBlock] = {}
        self.dropped_cheirality = 0
        self._plan = None

    # ---- bookkeeping -----------------------------------------------------

    @property
    def models(self) -> list[ModelId]:
        return [m for m in ALL_MODELS if m in self.objects]

    def counts(self) -> dict:
        c = {
            "pose_vertices": len(self.frames),
            "point_vertices": len(self.point_ids),
            "object_vertices": sum(len(b.keys) for b in self.objects.values()),
            "reprojection_edges": len(self.rp_pose),
            "odometry_edges": len(self.odo_a),
            "measurement_edges": sum(len(b.meas_vert) for b in self.objects.values()),
            "system_edges": sum(len(b.sys_a) for b in self.objects.values()),
            "constant_edges": sum(len(b.sys_a) for m, b in self.objects.items() if m is not ModelId.CP),
        }
        return c

    def object_state(self, model: ModelId, object_id: int, frame: int) -> np.ndarray:
        b = self.objects[model]
        return b.states[b.keys.index((object_id, frame))].copy()

    def object_states(self) -> dict:
        """{(object_id, frame): {model: state}} for every object vertex."""
        out: dict = {}
        for m, b in self.objects.items():
            for k, s in zip(b.keys, b.states):
                out.setdefault(k, {})[m] = s.copy()
        return out

    def model_weights(self) -> dict:
        out: dict = {}
        for m, b in self.objects.items():
            for v, w in zip(b.meas_vert, b.meas_w):
                out.setdefault(b.keys[v], {})[m] = float(w)
        return out

    def pose(self, frame: int) -> Se3Pose:
        return Se3Pose.from_matrix(self.poses[self.frames.index(frame)])

    # ---- parameter layout --------------------------------------------------

    def _layout(self):
        col = 0
        pose_col = np.full(len(self.frames), -1)
        for i, f in enumerate(self.fixed):
            if not f:
                pose_col[i] = col
                col += 6
        point_col = col + 3 * np.arange(len(self.point_ids))
        col += 3 * len(self.point_ids)
        obj_col = {}
        for m in self.models:
            d = VERTEX_DIM[m]
            n = len(self.objects[m].keys)
            obj_col[m] = col + d * np.arange(n)
            col += d * n
        return pose_col, point_col, obj_col, col

    def _scatter_plan(self) -> "_ScatterPlan":
        if self._plan is None:
            self._plan = _ScatterPlan(self)
        return self._plan

    @property
    def n_params(self) -> int:
        return self._layout()[3]

    # ---- evaluation --------------------------------------------------------

    def _blocks(self, poses, points, states, jac: bool):
        """Yield (whitened residual (E,k), [(J (E,k,p), cols (E,))...])."""
        cfg, info = self.cfg, self.cfg.info
        pose_col, point_col, obj_col, _ = self._layout() if jac else (None, None, None, None)
        if len(self.rp_pose):
            out = _reproj_kernel(poses[self.rp_pose], points[self.rp_point], self.rp_uv, cfg.intrinsics, jac)
            s = math.sqrt(info.pixel)
            if jac:
                yield s * out[0], [(s * out[2], pose_col[self.rp_pose]), (s * out[3], point_col[self.rp_point])]
            else:
                yield s * out[0], []
        if len(self.odo_a):
            out = _odo_kernel(poses[self.odo_a], poses[self.odo_b], self.odo_T, jac)
            s = np.sqrt(np.asarray(info.odometry))
            if jac:
                yield s * out[0], [
                    (s[:, None] * out[1], pose_col[self.odo_a]),
                    (s[:, None] * out[2], pose_col[self.odo_b]),
                ]
            else:
                yield s * out[0], []
        for m in self.models:
            b = self.objects[m]
            S = states[m]
            if len(b.meas_vert):
                out = _objmeas_kernel(poses[b.meas_pose], S[b.meas_vert], b.meas_z, jac)
                s = np.sqrt(b.meas_w[:, None] * np.asarray(info.obj_meas)[None])
                if jac:
                    yield s * out[0], [
                        (s[..., None] * out[1], pose_col[b.meas_pose]),
                        (s[..., None] * out[2], obj_col[m][b.meas_vert]),
                    ]
                else:
                    yield s * out[0], []
            if len(b.sys_a):
                out = _sys_kernel(m, S[b.sys_a], S[b.sys_b], b.sys_dt, jac)
                s = np.sqrt(b.sys_w[:, None] * np.asarray(info.system[m])[None])
                if jac:
                    yield s * out[0], [
                        (s[..., None] * out[1], obj_col[m][b.sys_a]),
                        (s[..., None] * out[2], obj_col[m][b.sys_b]),
                    ]
                else:
                    yield s * out[0], []
                if m is not ModelId.CP:
                    out = _cst_kernel(m, S[b.sys_a], S[b.sys_b], jac)
                    s = np.sqrt(b.sys_w[:, None] * np.asarray(info.constant[m])[None])
                    if jac:
                        yield s * out[0], [
                            (s[..., None] * out[1], obj_col[m][b.sys_a]),
                            (s[..., None] * out[2], obj_col[m][b.sys_b]),
                        ]
                    else:
                        yield s * out[0], []

    def _state(self):
        return self.poses, self.points, {m: b.states for m, b in self.objects.items()}

    def residual_vector(self, state=None) -> np.ndarray:
        poses, points, states = state or self._state()
        parts = [r.reshape(-1) for r, _ in self._blocks(poses, points, states, jac=False)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def linearize(self, state=None, huber: float | None = None):
        """Whitened residual ``r`` and sparse Jacobian ``J`` of ``r``."""
        poses, points, states = state or self._state()
        n = self.n_params
        rs, rows, cols, vals = [], [], [], []
        row0 = 0
        for r, blocks in self._blocks(poses, points, states, jac=True):
            E, k = r.shape
            if huber is not None:
                nrm = np.linalg.norm(r, axis=1)
                scale = np.where(nrm > huber, np.sqrt(huber / np.maximum(nrm, 1e-300)), 1.0)
                r = r * scale[:, None]
                blocks = [(J * scale[:, None, None], c) for J, c in blocks]
            rs.append(r.reshape(-1))
            ridx = row0 + np.arange(E * k).reshape(E, k)
            for J, c in blocks:
                p = J.shape[2]
                keep = c >= 0
                if not np.any(keep):
                    continue
                rr = np.broadcast_to(ridx[keep][:, :, None], (int(keep.sum()), k, p))
                cc = np.broadcast_to(c[keep][:, None, None] + np.arange(p)[None, None, :], rr.shape)
                rows.append(rr.reshape(-1))
                cols.append(cc.reshape(-1))
                vals.append(J[keep].reshape(-1))
            row0 += E * k
        r = np.concatenate(rs) if rs else np.zeros(0)
        if rows:
            J = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(row0, n)
            )
        else:
            J = sp.csr_matrix((row0, n))
        return r, J

    def cost(self, state=None, huber: float | None = None) -> float:
        if huber is None:
            r = self.residual_vector(state)
            return float(r @ r)
        return _huber_cost(self, state or self._state(), huber)

    def gradient(self, state=None) -> np.ndarray:
        """Gradient of :meth:`cost` with respect to the manifold increment."""
        r, J = self.linearize(state)
        return 2.0 * (J.T @ r)

    def retract(self, delta: np.ndarray, state=None):
        poses, points, states = state or self._state()
        pose_col, point_col, obj_col, _ = self._layout()
        new_poses = poses.copy()
        free = pose_col >= 0
        if np.any(free):
            xi = delta[pose_col[free][:, None] + np.arange(6)]
            P = se3_exp(xi) @ poses[free]
            P[:, :3, :3] = orthonormalize(P[:, :3, :3])
            new_poses[free] = P
        new_points = points + delta[point_col[:, None] + np.arange(3)] if len(point_col) else points.copy()
        new_states = {}
        for m, S in states.items():
            d = VERTEX_DIM[m]
            S2 = S + delta[obj_col[m][:, None] + np.arange(d)]
            S2[:, 3] = wrap_angle(S2[:, 3])
            new_states[m] = S2
        return new_poses, new_points, new_states

    def set_state(self, state) -> None:
        poses, points, states = state
        self.poses = poses
        self.points = points
        for m, S in states.items():
            self.objects[m].states = S

    def reprojection_chi2(self) -> np.ndarray:
        if not len(self.rp_pose):
            return np.zeros(0)
        e, _ = _reproj_kernel(
            self.poses[self.rp_pose], self.points[self.rp_point], self.rp_uv, self.cfg.intrinsics, jac=False
        )
        return self.cfg.info.pixel * np.sum(e * e, axis=1)

    def remove_reprojection_edges(self, mask: np.ndarray) -> None:
        """Drop edges where ``mask`` is true, then points left with < 2 edges."""
        self._plan = None
        keep = ~np.asarray(mask, dtype=bool)
        self.rp_pose, self.rp_point, self.rp_uv = self.rp_pose[keep], self.rp_point[keep], self.rp_uv[keep]
        counts = np.bincount(self.rp_point, minlength=len(self.point_ids))
        alive = counts >= 2
        if np.all(alive):
            return
        remap = np.cumsum(alive) - 1
        e_keep = alive[self.rp_point]
        self.rp_pose, self.rp_uv = self.rp_pose[e_keep], self.rp_uv[e_keep]
        self.rp_point = remap[self.rp_point[e_keep]]
        self.point_ids = [p for p, a in zip(self.point_ids, alive) if a]
        self.points = self.points[alive]

    def dump(self, path) -> None:
        """Plain-text edge list, one vertex or edge per line."""
        with open(path, "w", encoding="utf-8") as fh:
            for f, T, fx in zip(self.frames, self.poses, self.fixed):
                fh.write(f"POSE {f} {int(fx)} " + " ".join(f"{v:.12g}" for v in T[:3].reshape(-1)) + "\n")
            for pid, p in zip(self.point_ids, self.points):
                fh.write(f"POINT {pid} " + " ".join(f"{v:.12g}" for v in p) + "\n")
            for m, b in self.objects.items():
                for (oid, f), s in zip(b.keys, b.states):
                    fh.write(f"OBJECT {m} {oid} {f} " + " ".join(f"{v:.12g}" for v in s) + "\n")
            for a, j, uv in zip(self.rp_pose, self.rp_point, self.rp_uv):
                fh.write(f"EDGE_REPROJ {self.frames[a]} {self.point_ids[j]} {uv[0]:.12g} {uv[1]:.12g}\n")
            for a, c in zip(self.odo_a, self.odo_b):
                fh.write(f"EDGE_ODO {self.frames[a]} {self.frames[c]}\n")
            for m, b in self.objects.items():
                for v, w in zip(b.meas_vert, b.meas_w):
                    fh.write(f"EDGE_OBJ_MEAS {m} {b.keys[v][0]} {b.keys[v][1]} {w:.12g}\n")
                for a, c, w in zip(b.sys_a, b.sys_b, b.sys_w):
                    tag = "EDGE_OBJ_SYS+CST" if m is not ModelId.CP else "EDGE_OBJ_SYS"
                    fh.write(f"{tag} {m} {b.keys[a][0]} {b.keys[a][1]} {b.keys[c][1]} {w:.12g}\n")


def _huber_cost(graph: SlammotGraph, state, delta: float) -> float:
    # Huber is applied per edge on the whitened residual norm
    total = 0.0
    poses, points, states = state
    for rb, _ in graph._blocks(poses, points, states, jac=False):
        nrm = np.linalg.norm(rb, axis=1)
        total += float(np.sum(np.where(nrm <= delta, nrm * nrm, 2 * delta * nrm - delta * delta)))
    return total


# --------------------------------------------------------------------------
# construction and solve


def build_window(
    frames: list[FrameInput],
    map_obs: MapInput | None,
    tracks: list[ObjectInput],
    cfg: GraphConfig,
) -> SlammotGraph:
    if len(frames) < 2:
        raise ValueError("a window needs at least two frames")
    g = SlammotGraph(cfg)
    g.frames = [f.frame for f in frames]
    if len(set(g.frames)) != len(g.frames):
        raise ValueError("duplicate frame in window")
    fidx = {f: i for i, f in enumerate(g.frames)}
    g.poses = np.stack([f.pose.matrix() for f in frames])
    g.fixed = np.array([f.fixed for f in frames], dtype=bool)

    oa, ob, oT = [], [], []
    for i in range(1, len(frames)):
        if frames[i].odometry is not None:
            oa.append(i - 1)
            ob.append(i)
            oT.append(frames[i].odometry.matrix())
    g.odo_a, g.odo_b = np.array(oa, dtype=int), np.array(ob, dtype=int)
    g.odo_T = np.array(oT).reshape(-1, 4, 4)

    if map_obs is not None:
        cand, cand_pose, cand_uv = [], [], []
        for pid in sorted(map_obs.observations):
            if pid not in map_obs.positions:
                continue
            obs = [(fidx[f], uv) for f, uv in map_obs.observations[pid] if f in fidx]
            if len(obs) < 2:
                continue
            cand.append((pid, len(obs)))
            cand_pose.extend(i for i, _ in obs)
            cand_uv.extend(uv for _, uv in obs)
        cand_pose = np.array(cand_pose, dtype=int)
        counts = np.array([c for _, c in cand], dtype=int)
        cand_pts = np.array([map_obs.positions[pid] for pid, _ in cand], dtype=float).reshape(-1, 3)
        owner = np.repeat(np.arange(len(cand)), counts)
        T = g.poses[cand_pose]
        depth = np.einsum("ej,ej->e", T[:, 2, :3], cand_pts[owner]) + T[:, 2, 3] if len(owner) else np.zeros(0)
        front = depth > 1e-9
        g.dropped_cheirality = int(np.sum(~front))
        keep_pt = np.bincount(owner[front], minlength=len(cand)) >= 2
        edge = front & keep_pt[owner]
        new_index = np.cumsum(keep_pt) - 1
        pids = [pid for (pid, _), k in zip(cand, keep_pt) if k]
        pts = cand_pts[keep_pt]
        rp_pose = cand_pose[edge]
        rp_point = new_index[owner[edge]]
        rp_uv = np.array(cand_uv, dtype=float).reshape(-1, 2)[edge]
        if g.dropped_cheirality:
            log.debug("dropped %d reprojection edges behind the camera", g.dropped_cheirality)
        g.point_ids = pids
        g.points = np.array(pts).reshape(-1, 3)
        g.rp_pose = np.array(rp_pose, dtype=int)
        g.rp_point = np.array(rp_point, dtype=int)
        g.rp_uv = np.array(rp_uv, dtype=float).reshape(-1, 2)

    models = (cfg.single_model,) if cfg.single_model is not None else ALL_MODELS
    for m in models:
        b = _ModelBlock()
        states, mp, mv, mz, mw, sa, sb, sdt, sw = [], [], [], [], [], [], [], [], []
        for tr in tracks:
            prev = None
            for f, z, w, init in zip(tr.frames, tr.z, tr.weights, tr.init):
                if f not in fidx:
                    continue
                wt = 1.0 if cfg.single_model is not None else float(w.get(m, 0.0))
                if wt <= 0.0:
                    prev = None
                    continue
                k = len(b.keys)
                b.keys.append((tr.object_id, f))
                states.append(np.asarray(init[m], dtype=float)[: VERTEX_DIM[m]])
                mp.append(fidx[f])
                mv.append(k)
                mz.append(np.asarray(z, dtype=float))
                mw.append(wt)
                if prev is not None:
                    pk, pf, pw = prev
                    sa.append(pk)
                    sb.append(k)
                    sdt.append((f - pf) * cfg.dt)
                    sw.append(pw)
                prev = (k, f, wt)
        if not b.keys:
            continue
        b.states = np.array(states).reshape(-1, VERTEX_DIM[m])
        b.states[:, 3] = wrap_angle(b.states[:, 3])
        b.meas_pose, b.meas_vert = np.array(mp, dtype=int), np.array(mv, dtype=int)
        b.meas_z, b.meas_w = np.array(mz).reshape(-1, 4), np.array(mw)
        b.sys_a, b.sys_b = np.array(sa, dtype=int), np.array(sb, dtype=int)
        b.sys_dt, b.sys_w = np.array(sdt, dtype=float), np.array(sw, dtype=float)
        g.objects[m] = b
    return g


def total_cost(graph: SlammotGraph) -> float:
    return graph.cost()


def _state_norm(state) -> float:
    poses, points, states = state
    sq = float(np.sum(poses[:, :3, 3] ** 2)) + float(np.sum(points**2))
    sq += sum(float(np.sum(S**2)) for S in states.values())
    return math.sqrt(sq)


class _ScatterPlan:
    """Where every Jacobian product of a graph lands in the block system.

    Depends only on the graph structure, so it is computed once per graph.
    """

    def __init__(self, graph: SlammotGraph):
        pose_col, point_col, obj_col, n = graph._layout()
        self.n = n
        self.P = P = 6 * int(np.sum(pose_col >= 0))
        self.p0 = p0 = P
        self.o0 = o0 = P + 3 * len(point_col)
        self.n_pts = len(point_col)
        self.No = No = n - o0
        self.ops = []  # per edge type: list of (kind, i, j, row mask or None, key)
        idx = {k: [] for k in ("pp", "ep", "pt", "oo", "g")}
        state = graph._state()
        for _, blocks in graph._blocks(*state, jac=True):
            kinds = []
            for _, c in blocks:
                v = c[c >= 0]
                kinds.append(None if len(v) == 0 else ("pose" if v[0] < P else ("point" if v[0] < o0 else "obj")))
            ops = []
            for i, ((J, c), kind) in enumerate(zip(blocks, kinds)):
                if kind is None:
                    continue
                ok = c >= 0
                ops.append(("g", i, i, None if ok.all() else ok, "g"))
                idx["g"].append((c[ok][:, None] + np.arange(J.shape[2])).ravel())
            for i, ((Ja, ca), ka) in enumerate(zip(blocks, kinds)):
                for j, ((Jb, cb), kb) in enumerate(zip(blocks, kinds)):
                    if ka is None or kb is None:
                        continue
                    if kb == "pose":
                        key = "pp" if ka == "pose" else "ep"
                    elif ka == kb:
                        key = "pt" if ka == "point" else "oo"
                    else:
                        continue
                    ok = (ca >= 0) & (cb >= 0)
                    if not np.any(ok):
                        continue
                    pa, pb = Ja.shape[2], Jb.shape[2]
                    ra = ca[ok][:, None, None] + np.arange(pa)[None, :, None]
                    rb = cb[ok][:, None, None] + np.arange(pb)[None, None, :]
                    if key == "pp":
                        flat = ra * P + rb
                    elif key == "ep":
                        flat = (ra - P) * P + rb
                    elif key == "pt":
                        # point blocks are 3x3 and aligned, so local offsets index them
                        base = (ca[ok] - p0) // 3 * 9
                        flat = base[:, None, None] + np.arange(3)[None, :, None] * 3 + np.arange(3)[None, None, :]
                    else:
                        flat = (ra - o0) * No + (rb - o0)
                    ops.append(("pair", i, j, None if ok.all() else ok, key))
                    idx[key].append(flat.ravel())
            self.ops.append(ops)
        self.idx = {k: (np.concatenate(v) if v else np.zeros(0, dtype=int)) for k, v in idx.items()}
        self.sizes = {"pp": P * P, "ep": (n - P) * P, "pt": self.n_pts * 9, "oo": No * No, "g": n}
        # contiguous column runs of one (model, object) chain
        self.groups = []
        for m in graph.models:
            keys = graph.objects[m].keys
            cols = obj_col[m]
            d = VERTEX_DIM[m]
            start = 0
            for i in range(1, len(keys) + 1):
                if i == len(keys) or keys[i][0] != keys[start][0]:
                    self.groups.append((int(cols[start]) - o0, int(cols[i - 1]) + d - o0))
                    start = i


class _NormalEquations:
    """Gauss-Newton system ``H dx = -g`` assembled per variable block.

    Map points and per-(model, object) state chains only couple to pose
    variables, so they are eliminated first and the dense reduced system
    over the free poses is solved last.
    """

    def __init__(self, graph: SlammotGraph, state, huber: float | None):
        plan = graph._scatter_plan()
        self.n, self.P, self.p0, self.o0 = plan.n, plan.P, plan.p0, plan.o0
        self.n_pts, self.groups = plan.n_pts, plan.groups
        vals = {k: [] for k in plan.idx}
        for (r, blocks), ops in zip(graph._blocks(*state, jac=True), plan.ops):
            if huber is not None:
                nrm = np.linalg.norm(r, axis=1)
                scale = np.where(nrm > huber, np.sqrt(huber / np.maximum(nrm, 1e-300)), 1.0)
                r = r * scale[:, None]
                blocks = [(J * scale[:, None, None], c) for J, c in blocks]
            for kind, i, j, ok, key in ops:
                A = blocks[i][0]
                if kind == "g":
                    rr = r
                    if ok is not None:
                        A, rr = A[ok], r[ok]
                    vals["g"].append(np.einsum("ekp,ek->ep", A, rr).ravel())
                    continue
                B = blocks[j][0]
                if ok is not None:
                    A, B = A[ok], B[ok]
                vals[key].append(np.matmul(A.transpose(0, 2, 1), B).ravel())
        tot = {}
        for k, v in vals.items():
            if v:
                tot[k] = np.bincount(plan.idx[k], np.concatenate(v), minlength=plan.sizes[k])
            else:
                tot[k] = np.zeros(plan.sizes[k])
        P, n = plan.P, plan.n
        self.Hpp = tot["pp"].reshape(P, P)
        self.Hep = tot["ep"].reshape(n - P, P)
        self.D = tot["pt"].reshape(-1, 3, 3)
        self.Hoo = tot["oo"].reshape(plan.No, plan.No)
        self.g = tot["g"]

    def solve(self, lam: float) -> np.ndarray:
        P, p0, o0, g = self.P, self.p0, self.o0, self.g
        gp, gt, go = g[:P], g[p0:o0], g[o0:]
        S = self.Hpp + np.diag(lam * np.ones(len(self.Hpp)))
        rhs = -gp.copy()
        delta = np.zeros(self.n)
        if self.n_pts:
            D = self.D.copy()
            dd = np.einsum("nii->ni", D)
            D[:, np.arange(3), np.arange(3)] = dd + lam
            Dinv = np.linalg.inv(D)
            Bt = self.Hep[: o0 - P].reshape(-1, 3, P)
            gt3 = gt.reshape(-1, 3)
            DB = Dinv @ Bt
            S -= Bt.reshape(-1, P).T @ DB.reshape(-1, P)
            rhs += DB.reshape(-1, P).T @ gt
        if self.groups:
            # chains padded with identity to one size and solved as a batch
            M = max(b - a for a, b in self.groups)
            G = len(self.groups)
            Hg = np.tile(np.eye(M), (G, 1, 1))
            Bg = np.zeros((G, M, P))
            rg = np.zeros((G, M))
            for i, (a, b) in enumerate(self.groups):
                blk = self.Hoo[a:b, a:b]
                dg = np.diag(blk)
                Hg[i, : b - a, : b - a] = blk + lam * np.eye(len(dg))
                Bg[i, : b - a] = self.Hep[o0 - P + a : o0 - P + b]
                rg[i, : b - a] = go[a:b]
            X = np.linalg.solve(Hg, np.concatenate([Bg, rg[..., None]], axis=2))
            Bf = Bg.reshape(-1, P)
            S -= Bf.T @ X[..., :P].reshape(-1, P)
            rhs += Bf.T @ X[..., P].reshape(-1)
        if P:
            delta[:P] = np.linalg.solve(S, rhs)
            dp = delta[:P]
        else:
            dp = np.zeros(0)
        if self.n_pts:
            delta[p0:o0] = np.einsum("nij,nj->ni", Dinv, -gt3 - np.einsum("nip,p->ni", Bt, dp)).ravel()
        if self.groups:
            xo = np.linalg.solve(Hg, (-rg - Bg @ dp)[..., None])[..., 0]
            for i, (a, b) in enumerate(self.groups):
                delta[o0 + a : o0 + b] = xo[i, : b - a]
        return delta


def optimize(graph: SlammotGraph, solver: SolverConfig = SolverConfig()) -> OptimizeReport:
    """Levenberg-Marquardt over all non-fixed vertices; updates ``graph`` in place.

    ``iterations`` counts linear solves, rejected trial steps included. The
    loop stops when the relative cost decrease of an accepted step, or the
    decrease predicted by the linear model, falls below ``rel_tol``.
    """
    if not np.any(graph.fixed):
        raise ValueError("at least one pose vertex must be fixed")
    huber = solver.huber
    state = graph._state()
    cost = graph.cost(state, huber)
    if not math.isfinite(cost):
        raise ValueError("initial cost is not finite")
    report = OptimizeReport(0, cost, cost)
    if graph.n_params == 0:
        return report
    lam = solver.damping
    ne = _NormalEquations(graph, state, huber)
    while report.iterations < solver.max_iterations and cost > solver.abs_tol:
        report.iterations += 1
        try:
            delta = ne.solve(lam)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SingularSystemError(report.iterations, str(exc)) from exc
        if not np.all(np.isfinite(delta)):
            raise SingularSystemError(report.iterations)
        predicted = -float(ne.g @ delta)
        if predicted <= solver.rel_tol * cost:
            break
        # an update this small relative to the state cannot change the estimate
        if np.linalg.norm(delta) <= solver.step_tol * (_state_norm(state) + solver.step_tol):
            break
        cand = graph.retract(delta, state)
        new_cost = graph.cost(cand, huber)
        if not (math.isfinite(new_cost) and new_cost < cost):
            lam *= solver.factor
            if lam > solver.max_damping:
                break
            continue
        report.accepted += 1
        decrease = (cost - new_cost) / cost
        state, cost = cand, new_cost
        graph.set_state(state)
        lam = max(lam / solver.factor, 1e-12)
        if decrease < solver.rel_tol or cost <= solver.abs_tol:
            break
        ne = _NormalEquations(graph, state, huber)
    graph.set_state(state)
    report.final_cost = cost
    return report
