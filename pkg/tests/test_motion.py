import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_diff
from slammot.motion import (
    ALL_MODELS,
    ModelId,
    ModelState,
    NoiseConfig,
    jacobian,
    lift,
    process_noise,
    propagate,
    truncate,
    wrap_angle,
)

finite = st.floats(-50, 50, allow_nan=False)
angle = st.floats(-math.pi, math.pi, allow_nan=False)
speed = st.floats(-15, 15, allow_nan=False)
rate = st.floats(-1.5, 1.5, allow_nan=False)
step = st.floats(0.01, 0.5)


def states(model):
    parts = [finite, finite, angle, speed, rate][: model.dim]
    return st.tuples(*parts).map(lambda v: ModelState(model, np.array(v)))


def ref_propagate(model, s, dt):
    """Motion equations written out component by component."""
    x, z, th = s[0], s[1], s[2]
    if model is ModelId.CP:
        return np.array([x, z, th])
    v = s[3]
    if model is ModelId.CV:
        return np.array([x + v * math.cos(th) * dt, z + v * math.sin(th) * dt, th, v])
    w = s[4]
    h = th + w * dt / 2
    return np.array([x + v * math.cos(h) * dt, z + v * math.sin(h) * dt, th + w * dt, v, w])


def test_model_set_is_closed():
    assert len(ModelId) == 3
    assert [m.dim for m in ALL_MODELS] == [3, 4, 5]


def test_cp_propagate_is_identity():
    s = ModelState(ModelId.CP, [3, -1, 0.7])
    np.testing.assert_array_equal(propagate(s, 0.1).vec, [3, -1, 0.7])


def test_cv_propagate_example():
    s = ModelState(ModelId.CV, [0, 0, 0, 2])
    np.testing.assert_allclose(propagate(s, 0.5).vec, [1, 0, 0, 2], atol=1e-15)


def test_ctrv_half_angle_example():
    s = ModelState(ModelId.CTRV, [0, 0, 0, 1, math.pi])
    out = propagate(s, 1.0)
    np.testing.assert_allclose(out.vec, [0, 1, math.pi, 1, math.pi], atol=1e-12)
    assert out.model is ModelId.CTRV


def test_heading_stored_wrapped():
    s = ModelState(ModelId.CP, [0, 0, 3 * math.pi])
    assert s.theta == pytest.approx(math.pi)
    assert ModelState(ModelId.CP, [0, 0, -math.pi]).theta == pytest.approx(math.pi)


@pytest.mark.parametrize("dt", [0.0, -0.1, math.nan, math.inf])
def test_bad_dt_rejected(dt):
    with pytest.raises(ValueError):
        propagate(ModelState(ModelId.CV, [0, 0, 0, 1]), dt)


def test_non_finite_state_rejected():
    with pytest.raises(ValueError):
        ModelState(ModelId.CV, [0, math.nan, 0, 1])
    with pytest.raises(ValueError):
        ModelState(ModelId.CV, [0, 0, 0])


def test_wrap_angle_range():
    a = np.linspace(-20, 20, 4001)
    w = wrap_angle(a)
    assert np.all(w > -math.pi) and np.all(w <= math.pi)
    np.testing.assert_allclose(np.cos(w), np.cos(a), atol=1e-12)
    np.testing.assert_allclose(np.sin(w), np.sin(a), atol=1e-12)


@pytest.mark.parametrize("model", ALL_MODELS)
@given(data=st.data(), dt=step)
def test_propagate_matches_written_out_equations(model, data, dt):
    s = data.draw(states(model))
    out = propagate(s, dt).vec
    ref = ref_propagate(model, s.vec, dt)
    ref[2] = wrap_angle(ref[2])
    np.testing.assert_allclose(out[:2], ref[:2], atol=1e-12)
    assert abs(wrap_angle(out[2] - ref[2])) < 1e-12
    np.testing.assert_allclose(out[3:], ref[3:], atol=1e-12)


def test_cp_jacobian_identity():
    np.testing.assert_array_equal(jacobian(ModelState(ModelId.CP, [1, 2, 3]), 0.1), np.eye(3))


@pytest.mark.parametrize(
    "model,vec,dt",
    [(ModelId.CV, [0, 0, 0, 2], 0.5), (ModelId.CTRV, [1, 2, 0.3, 1.5, 0.2], 0.1)],
)
def test_jacobian_examples_match_finite_differences(model, vec, dt):
    J = jacobian(ModelState(model, vec), dt)
    Jn = central_diff(lambda s: ref_propagate(model, s, dt), np.array(vec, float))
    np.testing.assert_allclose(J, Jn, atol=1e-6)


@pytest.mark.parametrize("model", ALL_MODELS)
def test_jacobian_randomized_relative(model):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        s = np.array([*rng.uniform(-50, 50, 2), rng.uniform(-3, 3), rng.uniform(-15, 15), rng.uniform(-1.5, 1.5)])[: model.dim]
        dt = rng.uniform(0.02, 0.5)
        J = jacobian(ModelState(model, s), dt)
        Jn = central_diff(lambda x: ref_propagate(model, x, dt), s)
        worst = max(worst, np.max(np.abs(J - Jn)) / max(1.0, np.max(np.abs(Jn))))
    assert worst < 1e-6


@pytest.mark.parametrize("model", [ModelId.CP, ModelId.CV])
@given(data=st.data(), d1=step, d2=step)
def test_time_additivity_linear_models(model, data, d1, d2):
    s = data.draw(states(model))
    a = propagate(propagate(s, d1), d2).vec
    b = propagate(s, d1 + d2).vec
    np.testing.assert_allclose(a, b, atol=1e-9)


@given(data=st.data(), d1=step, d2=step)
def test_ctrv_heading_additivity(data, d1, d2):
    s = data.draw(states(ModelId.CTRV))
    a = propagate(propagate(s, d1), d2)
    b = propagate(s, d1 + d2)
    assert abs(wrap_angle(a.theta - b.theta)) < 1e-9
    assert a.omega == b.omega and a.v == b.v


@given(data=st.data(), dt=step, w=st.floats(-1e-9, 1e-9))
def test_ctrv_small_turn_rate_matches_cv(data, dt, w):
    cv = data.draw(states(ModelId.CV))
    ctrv = ModelState(ModelId.CTRV, [*cv.vec, w])
    a, b = propagate(ctrv, dt).vec, propagate(cv, dt).vec
    np.testing.assert_allclose(a[:2], b[:2], atol=1e-8)
    assert abs(wrap_angle(a[2] - b[2])) < 1e-8


def test_lift_examples():
    np.testing.assert_array_equal(lift(ModelState(ModelId.CP, [1, 2, 0.5])), [1, 2, 0.5, 0, 0])
    np.testing.assert_array_equal(lift(ModelState(ModelId.CV, [1, 2, 0.5, 3])), [1, 2, 0.5, 3, 0])
    np.testing.assert_array_equal(lift(ModelState(ModelId.CTRV, [1, 2, 0.5, 3, 0.1])), [1, 2, 0.5, 3, 0.1])


@pytest.mark.parametrize("model", ALL_MODELS)
@given(data=st.data())
def test_lift_truncate_roundtrip(model, data):
    s = data.draw(states(model))
    back = truncate(lift(s), model)
    assert back.model is model
    np.testing.assert_array_equal(back.vec, s.vec)


def test_process_noise_shapes():
    cfg = NoiseConfig(q=(1, 2, 3, 4, 5))
    np.testing.assert_array_equal(process_noise(ModelId.CP, cfg), np.diag([1, 2, 3]))
    np.testing.assert_array_equal(process_noise(ModelId.CV, cfg), np.diag([1, 2, 3, 4]))
    np.testing.assert_array_equal(process_noise(ModelId.CTRV, cfg), np.diag([1, 2, 3, 4, 5]))
    for m in ALL_MODELS:
        assert np.all(np.linalg.eigvalsh(process_noise(m, NoiseConfig())) > 0)


def test_noise_defaults_and_validation():
    cfg = NoiseConfig()
    assert cfg.q == (0.01, 0.01, 0.0025, 0.04, 0.01)
    assert cfg.r == (0.25, 0.25, 0.01)
    with pytest.raises(ValueError):
        NoiseConfig(q=(0.01, 0.0, 0.1, 0.1, 0.1))
    with pytest.raises(ValueError):
        NoiseConfig(r=(1.0, 1.0))
    assert NoiseConfig.from_dict(cfg.to_dict()) == cfg
