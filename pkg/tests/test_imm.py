import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_diff
from oracles import plain_kf
from slammot.imm import (
    INIT_COV_DIAG,
    DegenerateUpdateError,
    ImmOptions,
    ImmTrack,
    Measurement,
    ModelEstimate,
    ekf_predict,
    ekf_update,
    imm_step,
    imm_step_many,
    init_track,
    merge,
    predict_track,
    synthesize,
    transition_matrix,
    update_weights,
)
from slammot.motion import ALL_MODELS, ModelId, ModelState, NoiseConfig, propagate, wrap_angle


def random_track(rng, weights=None, oid=1):
    ests = []
    base = rng.uniform(-2.5, 2.5)
    for m in ALL_MODELS:
        d = m.dim
        vec = np.concatenate([rng.uniform(-20, 20, 2), [base + rng.uniform(-0.3, 0.3)], rng.uniform(-5, 5, 2)])[:d]
        A = rng.normal(size=(d, d))
        ests.append(ModelEstimate(ModelState(m, vec), A @ A.T + 0.1 * np.eye(d)))
    w = rng.dirichlet(np.ones(3)) if weights is None else np.asarray(weights, float)
    return ImmTrack(oid, tuple(ests), w)


def lifted(est):
    d = est.model.dim
    x, P = np.zeros(5), np.zeros((5, 5))
    x[:d], P[:d, :d] = est.mean.vec, est.cov
    return x, P


def assert_track_invariants(tr):
    assert abs(tr.weights.sum() - 1.0) < 1e-12
    assert np.all(tr.weights >= 0) and np.all(tr.weights <= 1)
    for e in tr.estimates:
        assert np.max(np.abs(e.cov - e.cov.T)) <= 1e-12
        assert np.min(np.linalg.eigvalsh(e.cov)) >= -1e-10


# ---- transition matrix --------------------------------------------------------


def test_transition_matrix_default_tau():
    C = transition_matrix(0.02)
    np.testing.assert_allclose(np.diag(C), 0.96)
    assert np.all(C[~np.eye(3, dtype=bool)] == 0.02)
    np.testing.assert_allclose(C.sum(axis=1), 1.0, atol=1e-12)


def test_transition_matrix_limits():
    np.testing.assert_array_equal(transition_matrix(0.0), np.eye(3))
    np.testing.assert_allclose(transition_matrix(1 / 3 - 1e-15), np.full((3, 3), 1 / 3), atol=1e-12)


@pytest.mark.parametrize("tau", [-0.01, 0.5, 0.7, math.nan])
def test_transition_matrix_rejects_out_of_range(tau):
    with pytest.raises(ValueError):
        transition_matrix(tau)


# ---- initialization -------------------------------------------------------------


def test_init_track_from_first_measurement():
    tr = init_track(4, Measurement(4, 5.0, 2.0, 0.1), NoiseConfig())
    np.testing.assert_allclose(tr.weights, [1 / 3] * 3)
    for e in tr.estimates:
        np.testing.assert_array_equal(e.mean.vec[:3], [5.0, 2.0, 0.1])
        assert np.all(e.mean.vec[3:] == 0.0)
        np.testing.assert_array_equal(np.diag(e.cov), INIT_COV_DIAG[: e.model.dim])


def test_init_prior_converges_on_exact_cv_target():
    cfg = NoiseConfig(q=(1e-9,) * 5, r=(1e-8, 1e-8, 1e-8))
    truth = ModelState(ModelId.CV, [0.0, 10.0, 0.4, 3.0])
    tr = None
    for t in range(10):
        m = Measurement(1, *truth.vec[:3], frame=t)
        if tr is None:
            tr = init_track(1, m, cfg)
        else:
            tr, x, _ = imm_step(tr, m, 0.1, transition_matrix(0.02), cfg)
        truth = propagate(truth, 0.1)
    assert np.hypot(x[0] - m.x, x[1] - m.z) < 0.05


# ---- merge ----------------------------------------------------------------------------


def test_merge_identity_transition_is_noop(rng):
    tr = random_track(rng)
    out = merge(tr, np.eye(3))
    np.testing.assert_allclose(out.weights, tr.weights, atol=1e-15)
    for a, b in zip(out.estimates, tr.estimates):
        np.testing.assert_allclose(a.mean.vec, b.mean.vec, atol=1e-15)
        np.testing.assert_allclose(a.cov, b.cov, atol=1e-15)


def test_merge_symmetric_bank_is_fixed_point():
    x = np.array([1.0, 2.0, 0.3, 0.0, 0.0])
    ests = tuple(ModelEstimate(ModelState(m, x[: m.dim]), np.eye(m.dim)) for m in ALL_MODELS)
    tr = ImmTrack(1, ests, np.full(3, 1 / 3))
    out = merge(tr, transition_matrix(0.02))
    np.testing.assert_allclose(out.weights, 1 / 3, atol=1e-15)
    for e in out.estimates:
        np.testing.assert_allclose(e.mean.vec, x[: e.model.dim], atol=1e-15)


def merge_oracle(tr, C):
    """Mixing equations evaluated term by term in the lifted space."""
    w = tr.weights
    L = [lifted(e) for e in tr.estimates]
    wm = np.array([sum(C[c, d] * w[c] for c in range(3)) for d in range(3)])
    out = []
    for d in range(3):
        mu = np.array([C[c, d] * w[c] / wm[d] for c in range(3)])
        xm = sum(mu[c] * L[c][0] for c in range(3))
        Pm = sum(mu[c] * (L[c][1] + np.outer(L[c][0] - xm, L[c][0] - xm)) for c in range(3))
        k = ALL_MODELS[d].dim
        out.append((xm[:k], Pm[:k, :k]))
    return wm, out


def test_merge_matches_direct_formula(rng):
    tr = random_track(rng, weights=(0.5, 0.3, 0.2))
    C = transition_matrix(0.02)
    wm, ref = merge_oracle(tr, C)
    out = merge(tr, C)
    np.testing.assert_allclose(out.weights, wm, atol=1e-12)
    for e, (x, P) in zip(out.estimates, ref):
        np.testing.assert_allclose(e.mean.vec, x, atol=1e-12)
        np.testing.assert_allclose(e.cov, P, atol=1e-12)


def test_merge_floors_starved_weights():
    tr = random_track(np.random.default_rng(0), weights=(1.0, 0.0, 0.0))
    out = merge(tr, np.eye(3))
    assert np.all(out.weights >= 1e-12 * (1 - 1e-9))
    assert abs(out.weights.sum() - 1) < 1e-15


# ---- EKF ----------------------------------------------------------------------------------


def test_predict_cp_adds_process_noise(rng):
    cfg = NoiseConfig()
    e = ModelEstimate(ModelState(ModelId.CP, [1, 2, 0.3]), np.diag([1.0, 2.0, 3.0]))
    p = ekf_predict(e, 0.1, cfg)
    np.testing.assert_array_equal(p.mean.vec, e.mean.vec)
    np.testing.assert_allclose(p.cov, e.cov + np.diag(cfg.q[:3]), atol=1e-15)


def test_predict_cv_without_noise_is_apat():
    cfg = NoiseConfig(q=(1e-300,) * 5)
    P = np.diag([1.0, 2.0, 0.1, 0.5])
    s = np.array([0.0, 0.0, 0.4, 2.0])
    p = ekf_predict(ModelEstimate(ModelState(ModelId.CV, s), P), 0.5, cfg)
    c, sn = math.cos(0.4), math.sin(0.4)
    A = np.array([[1, 0, -2 * sn * 0.5, c * 0.5], [0, 1, 2 * c * 0.5, sn * 0.5], [0, 0, 1, 0], [0, 0, 0, 1]])
    np.testing.assert_allclose(p.cov, A @ P @ A.T, atol=1e-14)


def test_predict_ctrv_matches_finite_difference_oracle(rng):
    cfg = NoiseConfig()
    for _ in range(50):
        s = np.array([*rng.uniform(-10, 10, 2), rng.uniform(-3, 3), rng.uniform(-8, 8), rng.uniform(-1, 1)])
        B = rng.normal(size=(5, 5))
        P = B @ B.T
        dt = rng.uniform(0.05, 0.3)
        out = ekf_predict(ModelEstimate(ModelState(ModelId.CTRV, s), P), dt, cfg)
        A = central_diff(lambda x: propagate(ModelState(ModelId.CTRV, x), dt).vec + 0 * x, s)
        # the heading row may jump across the seam; only smooth draws are compared
        if np.max(np.abs(A)) > 100:
            continue
        np.testing.assert_allclose(out.cov, A @ P @ A.T + np.diag(cfg.q), atol=1e-5)


def test_update_with_exact_measurement_keeps_mean():
    e = ModelEstimate(ModelState(ModelId.CV, [1, 2, 0.3, 4]), np.eye(4))
    post, innov, S = ekf_update(e, Measurement(1, 1, 2, 0.3), NoiseConfig())
    np.testing.assert_array_equal(post.mean.vec, e.mean.vec)
    np.testing.assert_array_equal(innov, 0)


def test_update_uninformative_measurement():
    e = ModelEstimate(ModelState(ModelId.CTRV, [1, 2, 0.3, 4, 0.1]), np.eye(5))
    post, _, _ = ekf_update(e, Measurement(1, 9, -7, 1.2), NoiseConfig(), R=np.eye(3) * 1e12)
    np.testing.assert_allclose(post.mean.vec, e.mean.vec, atol=1e-6)


def test_update_unit_covariances_halves_innovation():
    e = ModelEstimate(ModelState(ModelId.CP, [0, 0, 0]), np.eye(3))
    post, innov, S = ekf_update(e, Measurement(1, 2, -4, 0.6), NoiseConfig(), R=np.eye(3))
    np.testing.assert_allclose(S, 2 * np.eye(3), atol=1e-15)
    np.testing.assert_allclose(post.mean.vec, [1, -2, 0.3], atol=1e-15)
    np.testing.assert_allclose(post.cov, 0.5 * np.eye(3), atol=1e-15)


def test_update_wraps_heading_innovation():
    e = ModelEstimate(ModelState(ModelId.CP, [0, 0, 3.1]), np.eye(3))
    _, innov, _ = ekf_update(e, Measurement(1, 0, 0, -3.1), NoiseConfig())
    assert innov[2] == pytest.approx(2 * math.pi - 6.2)


def test_update_degenerate_innovation_covariance():
    e = ModelEstimate(ModelState(ModelId.CP, [0, 0, 0]), np.zeros((3, 3)))
    with pytest.raises(DegenerateUpdateError):
        ekf_update(e, Measurement(1, 0, 0, 0), NoiseConfig(), R=np.diag([1e13, 1e-3, 1e-3]))


# ---- weights ---------------------------------------------------------------------------------


def test_equal_likelihoods_keep_merged_weights():
    w = update_weights([0.2, 0.5, 0.3], [np.ones(3)] * 3, [np.eye(3) * 2] * 3)
    np.testing.assert_allclose(w, [0.2, 0.5, 0.3], atol=1e-15)


def test_smallest_innovation_wins():
    w = update_weights([1 / 3] * 3, [np.full(3, 4.0), np.zeros(3), np.full(3, 3.0)], [np.eye(3)] * 3)
    assert np.argmax(w) == 1 and w[1] > w[0] and w[1] > w[2]


def test_weight_update_matches_direct_formula():
    innov = [np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([2.0, 0, 0])]
    w = update_weights([1 / 3] * 3, innov, [np.eye(3)] * 3)
    ref = np.array([1.0, math.exp(-0.5), math.exp(-2.0)])
    np.testing.assert_allclose(w, ref / ref.sum(), atol=1e-12)


def test_weight_underflow_falls_back_to_merged():
    w = update_weights([0.1, 0.6, 0.3], [np.full(3, 1e4)] * 3, [np.eye(3)] * 3)
    np.testing.assert_allclose(w, [0.1, 0.6, 0.3])


def test_weight_floor():
    w = update_weights([1 / 3] * 3, [np.zeros(3), np.full(3, 30.0), np.full(3, 30.0)], [np.eye(3)] * 3)
    assert np.all(w >= 1e-6 / (1 + 2e-6))
    assert abs(w.sum() - 1) < 1e-15


# ---- synthesis -------------------------------------------------------------------------------


def test_synthesize_single_model():
    tr = random_track(np.random.default_rng(3), weights=(1.0, 0.0, 0.0))
    x, P = synthesize(tr)
    xr, Pr = lifted(tr.estimates[0])
    np.testing.assert_array_equal(x, xr)
    np.testing.assert_array_equal(P, Pr)


def test_synthesize_zero_spread():
    x0 = np.array([1.0, 2.0, 0.3, 0.0, 0.0])
    covs = [np.eye(m.dim) * (k + 1) for k, m in enumerate(ALL_MODELS)]
    ests = tuple(ModelEstimate(ModelState(m, x0[: m.dim]), c) for m, c in zip(ALL_MODELS, covs))
    w = np.array([0.2, 0.3, 0.5])
    x, P = synthesize(ImmTrack(1, ests, w))
    np.testing.assert_allclose(x, x0, atol=1e-15)
    ref = sum(wk * lifted(e)[1] for wk, e in zip(w, ests))
    np.testing.assert_allclose(P, ref, atol=1e-15)


def test_synthesize_spread_term():
    delta = 1.7
    a = ModelEstimate(ModelState(ModelId.CP, [0.0, 0.0, 0.0]), np.eye(3))
    b = ModelEstimate(ModelState(ModelId.CV, [delta, 0.0, 0.0, 0.0]), np.eye(4))
    c = ModelEstimate(ModelState(ModelId.CTRV, [5.0, 5.0, 0.0, 0.0, 0.0]), np.eye(5))
    x, P = synthesize(ImmTrack(1, (a, b, c), np.array([0.5, 0.5, 0.0])))
    assert x[0] == pytest.approx(delta / 2, abs=1e-12)
    assert P[0, 0] == pytest.approx(1.0 + 0.25 * delta**2, abs=1e-12)


@given(seed=st.integers(0, 2**32 - 1))
def test_synthesized_covariance_dominates_mean_covariance(seed):
    tr = random_track(np.random.default_rng(seed))
    _, P = synthesize(tr)
    mean_cov = sum(w * lifted(e)[1] for w, e in zip(tr.weights, tr.estimates))
    assert np.trace(P) >= np.trace(mean_cov) - 1e-9
    assert np.min(np.linalg.eigvalsh(P - mean_cov)) >= -1e-9


# ---- full cycle ---------------------------------------------------------------------------------


@given(seed=st.integers(0, 2**32 - 1))
def test_imm_step_invariants(seed):
    rng = np.random.default_rng(seed)
    tr = random_track(rng)
    z = Measurement(1, *rng.uniform(-20, 20, 2), rng.uniform(-3, 3))
    out, x, P = imm_step(tr, z, rng.uniform(0.05, 0.3), transition_matrix(0.02), NoiseConfig())
    assert_track_invariants(out)
    assert np.max(np.abs(P - P.T)) <= 1e-12
    assert out.last_update == z.frame


def test_imm_step_rejects_other_object():
    tr = init_track(1, Measurement(1, 0, 0, 0))
    with pytest.raises(ValueError):
        imm_step(tr, Measurement(2, 0, 0, 0), 0.1, transition_matrix(0.02), NoiseConfig())


@pytest.mark.parametrize("model", [ModelId.CP, ModelId.CV])
def test_single_model_bank_is_plain_kalman_filter(model):
    rng = np.random.default_rng(11)
    cfg = NoiseConfig()
    zs = [np.array([0.3 * t, 10 + 0.1 * t, 0.2]) + rng.normal(0, 0.3, 3) for t in range(100)]
    first = Measurement(1, *zs[0])
    tr = init_track(1, first, cfg, models=(model,))
    got = []
    for t, z in enumerate(zs[1:], start=1):
        tr, x, _ = imm_step(tr, Measurement(1, *z, frame=t), 0.1, np.ones((1, 1)), cfg)
        got.append(tr.estimates[0].mean.vec.copy())
        assert tr.weights[0] == 1.0
    x0 = np.zeros(model.dim)
    x0[:3] = zs[0]
    ref = plain_kf(model, x0, np.diag(INIT_COV_DIAG[: model.dim]), zs[1:], 0.1, cfg)
    np.testing.assert_allclose(np.array(got), np.array(ref), atol=1e-12, rtol=0)


def run_stationary(lik, noisy, seed, steps=50):
    rng = np.random.default_rng(seed)
    cfg = NoiseConfig()
    tr = None
    for t in range(steps):
        z = np.array([5.0, 2.0, 0.3]) + (rng.normal(0, 1, 3) * [0.5, 0.5, 0.1] if noisy else 0)
        m = Measurement(1, *z, frame=t)
        tr = init_track(1, m, cfg) if tr is None else imm_step(tr, m, 0.1, transition_matrix(0.02), cfg, ImmOptions(likelihood=lik))[0]
    return tr


def test_stationary_exact_target_prefers_cp():
    tr = run_stationary("posterior", noisy=False, seed=0)
    assert tr.weight(ModelId.CP) > tr.weight(ModelId.CV)
    assert tr.weight(ModelId.CP) > tr.weight(ModelId.CTRV)


@pytest.mark.parametrize("seed", range(5))
def test_stationary_noisy_target_prefers_cp_with_predicted_innovation(seed):
    tr = run_stationary("prior", noisy=True, seed=seed)
    assert int(np.argmax(tr.weights)) == 0


def test_model_order_permutation_is_consistent(rng):
    tr = random_track(rng)
    perm = [2, 0, 1]
    trp = ImmTrack(1, tuple(tr.estimates[i] for i in perm), tr.weights[perm])
    z = Measurement(1, 1.0, 2.0, 0.4, frame=1)
    C = transition_matrix(0.02)
    a, xa, Pa = imm_step(tr, z, 0.1, C, NoiseConfig())
    b, xb, Pb = imm_step(trp, z, 0.1, C, NoiseConfig())
    np.testing.assert_allclose(b.weights, a.weights[perm], atol=1e-12)
    for i, k in enumerate(perm):
        np.testing.assert_allclose(b.estimates[i].mean.vec, a.estimates[k].mean.vec, atol=1e-12)
    np.testing.assert_allclose(xb, xa, atol=1e-12)
    np.testing.assert_allclose(Pb, Pa, atol=1e-10)


def test_coasting_keeps_pinned_weights_without_floor():
    tr = init_track(1, Measurement(1, 0.0, 5.0, 0.3), weights=(0.0, 1.0, 0.0))
    out = predict_track(tr, 0.1, transition_matrix(0.0), NoiseConfig(), ImmOptions(weight_floor=0.0))
    assert out.weights.tolist() == [0.0, 1.0, 0.0]
    floored = predict_track(tr, 0.1, transition_matrix(0.0), NoiseConfig())
    assert floored.weights[0] > 0.0


def test_batched_cycle_matches_single_tracks():
    rng = np.random.default_rng(5)
    cfg = NoiseConfig()
    tracks, zs, dts, Cs = [], [], [], []
    for i in range(6):
        tr = init_track(i, Measurement(i, *rng.uniform(-5, 5, 2), rng.uniform(-3, 3)))
        for _ in range(i % 3):
            tr, _, _ = imm_step(tr, Measurement(i, *rng.uniform(-5, 5, 2), rng.uniform(-3, 3)), 0.1, transition_matrix(0.05), cfg)
        tracks.append(tr)
        zs.append(Measurement(i, *rng.uniform(-5, 5, 2), rng.uniform(-3, 3)))
        dts.append(rng.uniform(0.05, 0.3))
        Cs.append(transition_matrix(rng.uniform(0, 0.2)))
    outs, X, P = imm_step_many(tracks, zs, dts, np.array(Cs), cfg)
    for t, (tr, z, dt, C) in enumerate(zip(tracks, zs, dts, Cs)):
        one, x1, P1 = imm_step(tr, z, dt, C, cfg)
        np.testing.assert_array_equal(outs[t].weights, one.weights)
        np.testing.assert_allclose(X[t], x1, rtol=0, atol=1e-12)
        np.testing.assert_allclose(P[t], P1, rtol=0, atol=1e-9)
        for a, b in zip(outs[t].estimates, one.estimates):
            np.testing.assert_allclose(a.mean.vec, b.mean.vec, rtol=0, atol=1e-12)


def test_batched_cycle_rejects_mismatched_measurement():
    tr = init_track(1, Measurement(1, 0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        imm_step_many([tr], [Measurement(2, 0.0, 0.0, 0.0)], [0.1], transition_matrix(0.05), NoiseConfig())
