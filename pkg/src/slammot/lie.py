"""SE(3) helpers.

Tangent vectors are ordered rotation first, translation second:
``xi = (omega, upsilon)``. All batched functions accept a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

_SMALL = 1e-3


def hat(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    flat = w.reshape(-1, 3)
    return Rotation.from_rotvec(flat).as_matrix().reshape(w.shape[:-1] + (3, 3))


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    return Rotation.from_matrix(flat).as_rotvec().reshape(R.shape[:-2] + (3,))


def _coeffs(theta: np.ndarray):
    """(1-cos)/t^2, (t-sin)/t^3 with series fallbacks."""
    t2 = theta * theta
    small = theta < _SMALL
    ts = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(ts)) / (ts * ts))
    b = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (ts - np.sin(ts)) / (ts**3))
    return a, b


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    a, b = _coeffs(theta)
    W = hat(w)
    return np.eye(3) + a[..., None, None] * W + b[..., None, None] * (W @ W)


def so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    small = theta < _SMALL
    ts = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0 + theta * theta / 720.0 + theta**4 / 30240.0,
        1.0 / (ts * ts) - (1.0 + np.cos(ts)) / (2.0 * ts * np.sin(ts)),
    )
    W = hat(w)
    return np.eye(3) - 0.5 * W + c[..., None, None] * (W @ W)


def _q_block(w: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Off-diagonal block of the SE(3) left Jacobian."""
    theta = np.linalg.norm(w, axis=-1)
    t2 = theta * theta
    small = theta < 1e-3
    ts = np.where(small, 1.0, theta)
    c1 = np.where(small, 1.0 / 6.0 - t2 / 120.0, (ts - np.sin(ts)) / ts**3)
    c2 = np.where(small, 1.0 / 24.0 - t2 / 720.0, (ts * ts + 2.0 * np.cos(ts) - 2.0) / (2.0 * ts**4))
    c3 = np.where(
        small,
        1.0 / 120.0 - t2 / 2520.0,
        (2.0 * ts - 3.0 * np.sin(ts) + ts * np.cos(ts)) / (2.0 * ts**5),
    )
    W, U = hat(w), hat(u)
    WU, UW = W @ U, U @ W
    WUW = WU @ W
    return (
        0.5 * U
        + c1[..., None, None] * (WU + UW + WUW)
        + c2[..., None, None] * (W @ WU + UW @ W - 3.0 * WUW)
        + c3[..., None, None] * (WUW @ W + W @ WUW)
    )


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    w, u = xi[..., :3], xi[..., 3:]
    Ji = so3_left_jacobian_inv(w)
    Q = _q_block(w, u)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Ji
    out[..., 3:, 3:] = Ji
    out[..., 3:, :3] = -Ji @ Q @ Ji
    return out


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def se3_exp(xi: np.ndarray) -> np.ndarray:
    """Tangent vector(s) to 4x4 homogeneous matrices."""
    xi = np.asarray(xi, dtype=float)
    w, u = xi[..., :3], xi[..., 3:]
    T = np.zeros(xi.shape[:-1] + (4, 4))
    T[..., :3, :3] = so3_exp(w)
    T[..., :3, 3] = np.einsum("...ij,...j->...i", so3_left_jacobian(w), u)
    T[..., 3, 3] = 1.0
    return T


def se3_log(T: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    w = so3_log(T[..., :3, :3])
    u = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(w), T[..., :3, 3])
    return np.concatenate([w, u], axis=-1)


def se3_inv(T: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    out = np.zeros_like(T)
    Rt = np.swapaxes(T[..., :3, :3], -1, -2)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, T[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def se3_adjoint(T: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    R, t = T[..., :3, :3], T[..., :3, 3]
    Ad = np.zeros(T.shape[:-2] + (6, 6))
    Ad[..., :3, :3] = R
    Ad[..., 3:, 3:] = R
    Ad[..., 3:, :3] = hat(t) @ R
    return Ad


def orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    D = np.ones(R.shape[:-1])
    D[..., -1] = np.sign(np.linalg.det(U @ Vt))
    return (U * D[..., None, :]) @ Vt


def yaw_of(R: np.ndarray):
    """Rotation angle about +y of a (mostly) yaw-only rotation matrix."""
    R = np.asarray(R, dtype=float)
    return np.arctan2(R[..., 0, 2], R[..., 0, 0])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class Se3Pose:
    """Rigid transform ``x' = R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Se3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Se3Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def exp(cls, xi) -> "Se3Pose":
        return cls.from_matrix(se3_exp(np.asarray(xi, dtype=float)))

    def log(self) -> np.ndarray:
        return se3_log(self.matrix())

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Se3Pose":
        Rt = self.rotation.T
        return Se3Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other):
        if isinstance(other, Se3Pose):
            return Se3Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)
        p = np.asarray(other, dtype=float)
        return p @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) < tol)
