"""Interacting multiple model (IMM) estimator over the CP/CV/CTRV bank.

One cycle is merge -> per-model EKF predict/update -> weight update ->
output synthesis. Model states of unequal dimension are mixed after lifting
them to the 5-component full state (absent entries zero), then truncated back
to each destination model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .motion import (
    ALL_MODELS,
    FULL_DIM,
    ModelId,
    ModelState,
    NoiseConfig,
    jacobian_array,
    transition_array,
    wrap_angle,
)

WEIGHT_FLOOR = 1e-6
MERGE_FLOOR = 1e-12
MAX_INNOVATION_COND = 1e12
INIT_COV_DIAG = (1e4, 1e4, 1e2, 1e2, 1e2)


class DegenerateUpdateError(ArithmeticError):
    """Innovation covariance is numerically singular."""


@dataclass(frozen=True)
class ModelEstimate:
    mean: ModelState
    cov: np.ndarray

    @property
    def model(self) -> ModelId:
        return self.mean.model


@dataclass(frozen=True)
class Measurement:
    """World-frame (x, z, theta) observation of one object."""

    object_id: int
    x: float
    z: float
    theta: float
    frame: int = 0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.z, self.theta)):
            raise ValueError("measurement must be finite")
        object.__setattr__(self, "theta", float(wrap_angle(self.theta)))

    @property
    def vec(self) -> np.ndarray:
        return np.array([self.x, self.z, self.theta])


@dataclass(frozen=True)
class ImmTrack:
    object_id: int
    estimates: tuple[ModelEstimate, ...]
    weights: np.ndarray
    last_update: int = 0

    @property
    def models(self) -> tuple[ModelId, ...]:
        return tuple(e.model for e in self.estimates)

    def estimate(self, model: ModelId) -> ModelEstimate:
        return self.estimates[self.models.index(model)]

    def weight(self, model: ModelId) -> float:
        return float(self.weights[self.models.index(model)])


@dataclass(frozen=True)
class ImmOptions:
    """Knobs for :func:`imm_step`.

    ``likelihood`` selects which residual drives the weight update:
    ``"posterior"`` evaluates z - H x_hat with S = H P_hat H' + R (the form the
    update is usually written in for this method), ``"prior"`` uses the
    standard predicted innovation and its covariance.
    """

    weight_floor: float = WEIGHT_FLOOR
    likelihood: str = "posterior"


def transition_matrix(tau: float, n: int = 3) -> np.ndarray:
    """Symmetric model-switching matrix: 1 - (n-1) tau on the diagonal."""
    if n == 1:
        return np.ones((1, 1))
    if not (0.0 <= tau < 1.0 / (n - 1)) or not math.isfinite(tau):
        raise ValueError(f"tau must lie in [0, {1.0 / (n - 1)}), got {tau!r}")
    C = np.full((n, n), float(tau))
    np.fill_diagonal(C, 1.0 - (n - 1) * tau)
    return C


def init_track(
    object_id: int,
    first_meas: Measurement,
    cfg: NoiseConfig | None = None,
    models: tuple[ModelId, ...] = ALL_MODELS,
    init_cov: tuple[float, ...] = INIT_COV_DIAG,
    weights=None,
) -> ImmTrack:
    """Seed every model from the first measurement with zero motion."""
    full = np.zeros(FULL_DIM)
    full[:3] = first_meas.vec
    ests = tuple(
        ModelEstimate(ModelState(m, full[: m.dim]), np.diag(np.asarray(init_cov[: m.dim], float)))
        for m in models
    )
    if weights is None:
        w = np.full(len(models), 1.0 / len(models))
    else:
        w = np.asarray(weights, dtype=float)
    return ImmTrack(object_id, ests, w, first_meas.frame)


_EYE = np.eye(FULL_DIM)


# The cycle runs on stacks of model banks: means (T, n, 5) and covariances
# (T, n, 5, 5) for T tracks of n models, zero beyond each model's own
# dimension. Padding only ever adds exact zeros, so every model sees the same
# arithmetic as on its own, and one track is simply the case T = 1.


def _lift(tracks) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    models = tracks[0].models
    T, n = len(tracks), len(models)
    X = np.zeros((T, n, FULL_DIM))
    P = np.zeros((T, n, FULL_DIM, FULL_DIM))
    for t, tr in enumerate(tracks):
        if tr.models != models:
            raise ValueError("all tracks in a batch must share one model set")
        for k, e in enumerate(tr.estimates):
            d = e.model.dim
            X[t, k, :d] = e.mean.vec
            P[t, k, :d, :d] = e.cov
    W = np.array([tr.weights for tr in tracks], dtype=float)
    return X, P, W


def _unlift(models, X, P) -> tuple[ModelEstimate, ...]:
    """One track's bank (n, 5), (n, 5, 5) back to per-model estimates."""
    if not np.isfinite(X).all():
        raise ValueError(f"non-finite state {X}")
    out = []
    for k, m in enumerate(models):
        d = m.dim
        out.append(ModelEstimate(ModelState._checked(m, X[k, :d]), P[k, :d, :d].copy()))
    return tuple(out)


@lru_cache(maxsize=16)
def _dim_mask(models) -> np.ndarray:
    return np.array([[1.0] * m.dim + [0.0] * (FULL_DIM - m.dim) for m in models])


def _truncate(models, X, P):
    """Zero every entry beyond each model's own dimension."""
    keep = _dim_mask(models)
    return X * keep, P * (keep[:, :, None] * keep[:, None, :])


def _wrap_headings(X: np.ndarray) -> np.ndarray:
    h = X[..., 2]
    if h.max() > np.pi or h.min() <= -np.pi:
        X[..., 2] = wrap_angle(h)
    return X


def _sym_bank(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def _merge_bank(X, P, W, C, floor):
    """Mix every bank through its transition matrix; ``C`` is (T, n, n), rows: from.

    Entries beyond a destination's dimension are left in place; they never
    reach that model's own block and are zeroed by :func:`_truncate`.
    """
    T, n = W.shape
    w_merged = np.einsum("tcd,tc->td", C, W)
    if floor > 0.0 and w_merged.min() < floor:
        w_merged = np.maximum(w_merged, floor)
        w_merged = w_merged / w_merged.sum(axis=1, keepdims=True)
    mix = C * W[:, :, None]  # mix[t, c, d] before normalisation
    norms = mix.sum(axis=1)
    ok = norms >= MERGE_FLOOR
    mix = mix / np.where(ok, norms, 1.0)[:, None, :]
    # heading differences are taken relative to each destination model so
    # that mixing across the +-pi seam stays continuous
    ref = X[:, :, 2]
    dX = np.broadcast_to(X[:, None], (T, n, n, FULL_DIM)).copy()  # dX[t, d, c]
    dX[..., 2] = ref[:, :, None] + wrap_angle(X[:, None, :, 2] - ref[:, :, None])
    X_m = np.einsum("tcd,tdcj->tdj", mix, dX)
    E = dX - X_m[:, :, None, :]
    # elementwise sums of symmetric terms, so P_m is exactly symmetric
    P_m = np.einsum("tcd,tdcjk->tdjk", mix, P[:, None] + E[..., :, None] * E[..., None, :])
    if not ok.all():
        X_m = np.where(ok[..., None], X_m, X)
        P_m = np.where(ok[..., None, None], P_m, P)
    return _wrap_headings(X_m), P_m, w_merged


def _predict_bank(models, X, P, dt, cfg):
    """``dt`` is (T,)."""
    T, n = X.shape[:2]
    A = np.zeros((T, n, FULL_DIM, FULL_DIM))
    Qd = np.zeros((n, FULL_DIM))
    Xp = X.copy()
    for k, m in enumerate(models):
        d = m.dim
        A[:, k, d:, d:] = _EYE[d:, d:]
        A[:, k, :d, :d] = jacobian_array(m, X[:, k, :d], dt)
        Xp[:, k, :d] = transition_array(m, X[:, k, :d], dt)
        Qd[k, :d] = cfg.q_for(m)
    return _wrap_headings(Xp), _sym_bank(A @ P @ np.swapaxes(A, -1, -2) + Qd[:, :, None] * _EYE)


def _innovations(Z, X):
    """``Z`` is (T, 3); returns (T, n, 3) wrapped residuals."""
    r = Z[:, None, :] - X[..., :3]
    r[..., 2] = wrap_angle(r[..., 2])
    return r


def _update_bank(X, P, Z, R, ids):
    """Kalman update of every model; returns posterior X, P and prior innovations, S."""
    innov = _innovations(Z, X)
    S = P[..., :3, :3] + R  # symmetric because P and R are
    # condition number as an eigenvalue ratio; NaN fails the test too
    finite = np.isfinite(S).all(axis=(-1, -2))
    eig = np.linalg.eigvalsh(np.where(finite[..., None, None], S, np.eye(3)))
    good = finite & (eig[..., 0] > 0.0) & (eig[..., -1] <= MAX_INNOVATION_COND * eig[..., 0])
    if not good.all():
        t = int(np.argwhere(~good)[0, 0])
        raise DegenerateUpdateError(f"innovation covariance is singular or not finite (object {ids[t]})")
    K = np.swapaxes(np.linalg.solve(S, P[..., :3, :]), -1, -2)  # (T, n, 5, 3)
    Xu = X + np.einsum("tnij,tnj->tni", K, innov)
    IKH = np.broadcast_to(_EYE, P.shape).copy()
    IKH[..., :3] -= K  # I - K H with H selecting (x, z, theta)
    return _wrap_headings(Xu), _sym_bank(IKH @ P), innov, S


def _reweight(w_m, r, S, floor):
    """Likelihood reweighting over the last axis; rows whose likelihoods all vanish keep ``w_m``."""
    maha = np.einsum("...ki,...ki->...k", r, np.linalg.solve(S, r[..., None])[..., 0])
    raw = w_m / np.sqrt(np.linalg.det(S)) * np.exp(-0.5 * maha)
    total = raw.sum(axis=-1, keepdims=True)
    usable = (total > 0.0) & np.isfinite(total)
    w = np.where(usable, raw / np.where(usable, total, 1.0), w_m)
    if floor > 0.0 and w.min() < floor:
        w = np.maximum(w, floor)
    return w / w.sum(axis=-1, keepdims=True)


def _synthesize_bank(X, P, W):
    """Weighted output per track; zero-weight models contribute exact zeros."""
    T = len(W)
    ref = X[np.arange(T), np.argmax(W, axis=1), 2]
    Xs = X.copy()
    Xs[..., 2] = ref[:, None] + wrap_angle(X[..., 2] - ref[:, None])
    x_out = np.einsum("tk,tkj->tj", W, Xs)
    E = Xs - x_out[:, None, :]
    # elementwise sum of symmetric terms, so the result is exactly symmetric
    P_out = np.einsum("tk,tkij->tij", W, P + E[..., :, None] * E[..., None, :])
    x_out[:, 2] = wrap_angle(x_out[:, 2])
    return x_out, P_out


def _transitions(C, T, n) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    if C.shape == (n, n):
        return np.broadcast_to(C, (T, n, n))
    if C.shape != (T, n, n):
        raise ValueError(f"transition matrix must be {n}x{n}")
    return C


def merge(track: ImmTrack, C: np.ndarray, floor: float = MERGE_FLOOR) -> ImmTrack:
    """Mix the model bank through the transition matrix ``C`` (rows: from)."""
    X, P, W = _lift([track])
    X_m, P_m, w_merged = _merge_bank(X, P, W, _transitions(C, 1, len(track.estimates)), floor)
    return replace(track, estimates=_unlift(track.models, X_m[0], P_m[0]), weights=w_merged[0])


def ekf_predict(est: ModelEstimate, dt: float, cfg: NoiseConfig) -> ModelEstimate:
    X, P = np.zeros((1, 1, FULL_DIM)), np.zeros((1, 1, FULL_DIM, FULL_DIM))
    d = est.model.dim
    X[0, 0, :d], P[0, 0, :d, :d] = est.mean.vec, est.cov
    Xp, Pp = _predict_bank((est.model,), X, P, np.array([dt], dtype=float), cfg)
    return _unlift((est.model,), Xp[0], Pp[0])[0]


def ekf_update(est: ModelEstimate, z: Measurement, cfg: NoiseConfig, R: np.ndarray | None = None):
    """Kalman update with the (x, z, theta) selector.

    Returns the posterior estimate, the predicted innovation and its
    covariance ``S = H P H' + R``.
    """
    R = cfg.R if R is None else R
    X, P = np.zeros((1, 1, FULL_DIM)), np.zeros((1, 1, FULL_DIM, FULL_DIM))
    d = est.model.dim
    X[0, 0, :d], P[0, 0, :d, :d] = est.mean.vec, est.cov
    Xu, Pu, innov, S = _update_bank(X, P, z.vec[None], R, [z.object_id])
    return _unlift((est.model,), Xu[0], Pu[0])[0], innov[0, 0], S[0, 0]


def update_weights(merged_weights, innovations, S_matrices, floor: float = WEIGHT_FLOOR) -> np.ndarray:
    """Measurement-likelihood reweighting of the merged model probabilities."""
    return _reweight(
        np.asarray(merged_weights, dtype=float),
        np.asarray(innovations, dtype=float),
        np.asarray(S_matrices, dtype=float),
        floor,
    )


def synthesize(track: ImmTrack) -> tuple[np.ndarray, np.ndarray]:
    """Weighted 5-state mean and covariance including the model spread."""
    X, P, W = _lift([track])
    x, Pout = _synthesize_bank(X, P, W)
    return x[0], Pout[0]


def predict_track(track: ImmTrack, dt: float, C: np.ndarray, cfg: NoiseConfig, opts: ImmOptions = ImmOptions()) -> ImmTrack:
    """Merge and predict without a measurement (used while coasting)."""
    floor = MERGE_FLOOR if opts.weight_floor > 0 else 0.0
    models = track.models
    X, P, W = _lift([track])
    X, P, w = _merge_bank(X, P, W, _transitions(C, 1, len(models)), floor)
    X, P = _truncate(models, *_predict_bank(models, X, P, np.array([dt], dtype=float), cfg))
    return replace(track, estimates=_unlift(models, X[0], P[0]), weights=w[0])


def imm_step_many(
    tracks,
    measurements,
    dts,
    C: np.ndarray,
    cfg: NoiseConfig,
    opts: ImmOptions = ImmOptions(),
    R: np.ndarray | None = None,
):
    """Advance several independent tracks by one IMM cycle each.

    ``C`` is one transition matrix or one per track. All tracks must share a
    model set. Returns ``(tracks, full_states (T, 5), full_covs (T, 5, 5))``;
    row ``t`` equals ``imm_step(tracks[t], measurements[t], dts[t], ...)``.
    """
    tracks, measurements = list(tracks), list(measurements)
    if len(tracks) != len(measurements):
        raise ValueError("one measurement per track")
    if not tracks:
        return [], np.zeros((0, FULL_DIM)), np.zeros((0, FULL_DIM, FULL_DIM))
    for tr, z in zip(tracks, measurements):
        if z.object_id != tr.object_id:
            raise ValueError(f"measurement for object {z.object_id} fed to track {tr.object_id}")
    R = cfg.R if R is None else R
    models = tracks[0].models
    T, n = len(tracks), len(models)
    dt = np.broadcast_to(np.asarray(dts, dtype=float), (T,))
    Z = np.array([[z.x, z.z, z.theta] for z in measurements])
    ids = [z.object_id for z in measurements]
    X, P, W = _lift(tracks)
    X, P, w_merged = _merge_bank(X, P, W, _transitions(C, T, n), MERGE_FLOOR if opts.weight_floor > 0 else 0.0)
    X, P = _predict_bank(models, X, P, dt, cfg)
    X, P, innov, S = _update_bank(X, P, Z, R, ids)
    X, P = _truncate(models, X, P)
    if opts.likelihood == "prior":
        lik_r, lik_S = innov, S
    else:
        lik_r, lik_S = _innovations(Z, X), P[..., :3, :3] + R
    w = _reweight(w_merged, lik_r, lik_S, opts.weight_floor)
    x_out, P_out = _synthesize_bank(X, P, w)
    out = [ImmTrack(tr.object_id, _unlift(models, X[t], P[t]), w[t], z.frame) for t, (tr, z) in enumerate(zip(tracks, measurements))]
    return out, x_out, P_out


def imm_step(
    track: ImmTrack,
    z: Measurement,
    dt: float,
    C: np.ndarray,
    cfg: NoiseConfig,
    opts: ImmOptions = ImmOptions(),
    R: np.ndarray | None = None,
):
    """One full IMM cycle. Returns ``(track, full_state, full_cov)``."""
    out, x, P = imm_step_many([track], [z], [dt], C, cfg, opts, R)
    return out[0], x[0], P[0]


def set_means(track: ImmTrack, full_states: dict) -> ImmTrack:
    """Overwrite model means with externally refined 5-states, keyed by model."""
    ests = []
    for e in track.estimates:
        if e.model in full_states:
            ests.append(ModelEstimate(ModelState(e.model, np.asarray(full_states[e.model])[: e.model.dim]), e.cov))
        else:
            ests.append(e)
    return replace(track, estimates=tuple(ests))
