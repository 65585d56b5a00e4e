"""Planar object motion models: constant position, constant velocity and
constant turn rate and velocity.

States live in the x-z plane of a y-down camera/world frame:

    CP   = [x, z, theta]
    CV   = [x, z, theta, v]
    CTRV = [x, z, theta, v, omega]

``theta`` is the heading measured from the +x axis towards +z, so a CV object
advances by ``v * (cos theta, sin theta) * dt``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


class ModelId(enum.Enum):
    CP = "CP"
    CV = "CV"
    CTRV = "CTRV"

    @property
    def dim(self) -> int:
        return _DIMS[self._value_]

    def __str__(self) -> str:
        return self.value


_DIMS = {"CP": 3, "CV": 4, "CTRV": 5}  # keyed by value: enum hashing is slow in hot loops

ALL_MODELS: tuple[ModelId, ...] = (ModelId.CP, ModelId.CV, ModelId.CTRV)
FULL_DIM = 5


def wrap_angle(a):
    """Wrap an angle (scalar or array) to (-pi, pi]; in-range values pass through exactly."""
    if isinstance(a, (float, int, np.floating)):
        return a if -math.pi < a <= math.pi else math.pi - (math.pi - a) % (2.0 * math.pi)
    a = np.asarray(a)
    if np.abs(a).max(initial=0.0) < np.pi:  # common case; pi itself takes the slow path
        return a.copy() if a.ndim else a[()]
    out = np.where((a > -np.pi) & (a <= np.pi), a, np.pi - np.mod(np.pi - a, 2.0 * np.pi))
    return out if out.ndim else out[()]


def _check_dt(dt: float) -> None:
    if not (math.isfinite(dt) and dt > 0.0):
        raise ValueError(f"dt must be finite and positive, got {dt!r}")


@dataclass(frozen=True)
class ModelState:
    """Object state under one motion model; ``vec`` has ``model.dim`` entries."""

    model: ModelId
    vec: np.ndarray

    def __post_init__(self):
        vec = np.array(self.vec, dtype=float).reshape(-1)
        if len(vec) != self.model.dim:
            raise ValueError(
                f"{self.model} state needs {self.model.dim} components, got {vec.shape[0]}"
            )
        if not np.isfinite(vec).all():
            raise ValueError(f"non-finite state {vec}")
        vec[2] = wrap_angle(float(vec[2]))
        vec.flags.writeable = False
        object.__setattr__(self, "vec", vec)

    @classmethod
    def _checked(cls, model: "ModelId", vec: np.ndarray) -> "ModelState":
        """Build from a vector the caller has already validated and wrapped."""
        self = object.__new__(cls)
        vec = vec.copy()
        vec.flags.writeable = False
        object.__setattr__(self, "model", model)
        object.__setattr__(self, "vec", vec)
        return self

    @property
    def x(self) -> float:
        return float(self.vec[0])

    @property
    def z(self) -> float:
        return float(self.vec[1])

    @property
    def theta(self) -> float:
        return float(self.vec[2])

    @property
    def v(self) -> float:
        return float(self.vec[3]) if self.model.dim > 3 else 0.0

    @property
    def omega(self) -> float:
        return float(self.vec[4]) if self.model.dim > 4 else 0.0


@dataclass(frozen=True)
class NoiseConfig:
    """Diagonal process noise per state component and measurement noise.

    ``q`` holds the variances for (x, z, theta, v, omega); each model takes the
    leading entries matching its dimension. ``r`` holds (x, z, theta)
    measurement variances.
    """

    q: tuple[float, ...] = (0.01, 0.01, 0.0025, 0.04, 0.01)
    r: tuple[float, ...] = (0.25, 0.25, 0.01)
    # per-model overrides of q, keyed by model name
    q_model: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.q) != FULL_DIM or len(self.r) != 3:
            raise ValueError("q needs 5 entries and r needs 3")
        for name, arr in [("q", self.q), ("r", self.r), *self.q_model.items()]:
            if not all(math.isfinite(e) and e > 0 for e in arr):
                raise ValueError(f"noise entries must be finite and > 0: {name}={arr}")

    def q_for(self, model: ModelId) -> np.ndarray:
        q = self.q_model.get(model.value, self.q[: model.dim])
        if len(q) != model.dim:
            raise ValueError(f"q override for {model} must have {model.dim} entries")
        return np.asarray(q, dtype=float)

    @property
    def R(self) -> np.ndarray:
        return np.diag(np.asarray(self.r, dtype=float))

    def to_dict(self) -> dict:
        return {"q": list(self.q), "r": list(self.r), "q_model": {k: list(v) for k, v in self.q_model.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseConfig":
        return cls(
            q=tuple(d.get("q", cls.q)),
            r=tuple(d.get("r", cls.r)),
            q_model={k: tuple(v) for k, v in d.get("q_model", {}).items()},
        )


# Array-level kernels. ``s`` is (..., d) with the model's component layout.

def transition_array(model: ModelId, s: np.ndarray, dt: float) -> np.ndarray:
    out = np.array(s, dtype=float, copy=True)
    if model is ModelId.CP:
        return out
    if out.ndim == 1:
        return _transition_one(model, out, dt)
    theta, v = s[..., 2], s[..., 3]
    if model is ModelId.CV:
        out[..., 0] = s[..., 0] + v * np.cos(theta) * dt
        out[..., 1] = s[..., 1] + v * np.sin(theta) * dt
        return out
    omega = s[..., 4]
    mid = theta + 0.5 * omega * dt
    out[..., 0] = s[..., 0] + v * np.cos(mid) * dt
    out[..., 1] = s[..., 1] + v * np.sin(mid) * dt
    out[..., 2] = theta + omega * dt
    return out


def _transition_one(model, out, dt):
    # single state: plain floats avoid per-element array overhead
    x, z, theta, v = out[:4].tolist()
    if model is ModelId.CV:
        out[0] = x + v * math.cos(theta) * dt
        out[1] = z + v * math.sin(theta) * dt
        return out
    omega = float(out[4])
    mid = theta + 0.5 * omega * dt
    out[0] = x + v * math.cos(mid) * dt
    out[1] = z + v * math.sin(mid) * dt
    out[2] = theta + omega * dt
    return out


def _jacobian_one(model, s, dt):
    theta, v = float(s[2]), float(s[3])
    if model is ModelId.CV:
        c, sn = math.cos(theta), math.sin(theta)
        return np.array([[1.0, 0.0, -v * sn * dt, c * dt], [0.0, 1.0, v * c * dt, sn * dt], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    mid = theta + 0.5 * float(s[4]) * dt
    c, sn = math.cos(mid), math.sin(mid)
    return np.array(
        [
            [1.0, 0.0, -v * sn * dt, c * dt, -0.5 * v * sn * dt * dt],
            [0.0, 1.0, v * c * dt, sn * dt, 0.5 * v * c * dt * dt],
            [0.0, 0.0, 1.0, 0.0, dt],
            [0.0, 0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 1.0],
        ]
    )


def jacobian_array(model: ModelId, s: np.ndarray, dt: float) -> np.ndarray:
    d = model.dim
    s = np.asarray(s, dtype=float)
    if s.ndim == 1 and model is not ModelId.CP:
        return _jacobian_one(model, s, dt)
    A = np.broadcast_to(np.eye(d), s.shape[:-1] + (d, d)).copy()
    if model is ModelId.CP:
        return A
    theta, v = s[..., 2], s[..., 3]
    if model is ModelId.CV:
        c, sn = np.cos(theta), np.sin(theta)
        A[..., 0, 2] = -v * sn * dt
        A[..., 1, 2] = v * c * dt
        A[..., 0, 3] = c * dt
        A[..., 1, 3] = sn * dt
        return A
    omega = s[..., 4]
    mid = theta + 0.5 * omega * dt
    c, sn = np.cos(mid), np.sin(mid)
    A[..., 0, 2] = -v * sn * dt
    A[..., 1, 2] = v * c * dt
    A[..., 0, 3] = c * dt
    A[..., 1, 3] = sn * dt
    A[..., 0, 4] = -0.5 * v * sn * dt * dt
    A[..., 1, 4] = 0.5 * v * c * dt * dt
    A[..., 2, 4] = dt
    return A


def propagate(state: ModelState, dt: float) -> ModelState:
    """Advance ``state`` by ``dt`` seconds under its own motion model."""
    _check_dt(dt)
    return ModelState(state.model, transition_array(state.model, state.vec, dt))


def jacobian(state: ModelState, dt: float) -> np.ndarray:
    """Jacobian of :func:`propagate` with respect to the state, at ``state``."""
    _check_dt(dt)
    return jacobian_array(state.model, state.vec, dt)


def lift(state: ModelState) -> np.ndarray:
    """Zero-pad a model state to the 5-component full state."""
    full = np.zeros(FULL_DIM)
    full[: state.model.dim] = state.vec
    return full


def truncate(full: np.ndarray, model: ModelId) -> ModelState:
    return ModelState(model, np.asarray(full)[: model.dim])


def process_noise(model: ModelId, cfg: NoiseConfig) -> np.ndarray:
    return np.diag(cfg.q_for(model))
