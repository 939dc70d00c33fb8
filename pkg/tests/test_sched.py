import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ascseg import oracles
from ascseg.sched import AdamState, ScheduleConfig, adam_step, ema_update, poly_lr, ramp_lambda


def test_poly_lr_examples():
    cfg = ScheduleConfig(epochs_total=100)
    assert poly_lr(0, cfg) == 1e-4
    assert poly_lr(100, cfg) == 0
    assert poly_lr(50, cfg) == pytest.approx(1e-4 * 0.5**0.9)
    assert poly_lr(50, cfg) == pytest.approx(5.359e-5, rel=1e-4)


def test_poly_lr_monotone():
    cfg = ScheduleConfig(epochs_total=30)
    vals = [poly_lr(e, cfg) for e in range(31)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert max(vals) <= cfg.lr_init


def test_ramp_examples():
    cfg = ScheduleConfig(gamma=200, t_max=300)
    assert ramp_lambda(300, cfg) == 200
    assert ramp_lambda(0, cfg) / 200 == pytest.approx(math.exp(-5), abs=1e-9)
    assert ramp_lambda(150, cfg) == pytest.approx(200 * math.exp(-1.25))


@settings(max_examples=50, deadline=None)
@given(gamma=st.floats(1e-3, 1e4), t_max=st.integers(1, 10_000))
def test_ramp_bounded_nondecreasing(gamma, t_max):
    cfg = ScheduleConfig(gamma=gamma, t_max=t_max)
    ts = np.linspace(0, t_max, 50).astype(int)
    vals = [ramp_lambda(int(t), cfg) for t in ts]
    assert all(0 <= v <= gamma * (1 + 1e-12) for v in vals)
    assert all(b >= a for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("bad", [dict(ema_alpha=1.0), dict(ema_alpha=-0.1), dict(gamma=0), dict(poly_power=0), dict(t_max=0)])
def test_schedule_config_rejects(bad):
    with pytest.raises(ValueError):
        ScheduleConfig(**bad)


def test_adam_zero_gradient():
    p = np.array([1.0, -2.0], np.float32)
    new, st_ = adam_step(p, np.zeros(2), AdamState.zeros(2), 1e-3)
    assert np.array_equal(new, p) and st_.t == 1


def test_adam_first_step_is_lr(rng):
    p = rng.standard_normal(50)
    g = rng.standard_normal(50)
    new, _ = adam_step(p, g, AdamState.zeros(50), 1e-3)
    assert np.allclose(np.abs(new - p), 1e-3, rtol=1e-4)
    assert np.all(np.sign(p - new) == np.sign(g))


def test_adam_matches_scalar_oracle():
    grad = lambda x: 2 * (x - 3.0)
    ref = oracles.scalar_adam(0.5, grad, 0.05, 100)
    p, state = np.array([0.5]), AdamState.zeros(1)
    for k in range(100):
        p, state = adam_step(p, np.array([grad(p[0])]), state, 0.05)
        assert abs(p[0] - ref[k]) < 1e-10


def test_adam_length_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.zeros(3), np.zeros(2), AdamState.zeros(3), 1e-3)


def test_ema_examples(rng):
    s = rng.standard_normal(10)
    assert np.array_equal(ema_update(s, s, 0.99), s)
    assert np.array_equal(ema_update(rng.standard_normal(10), s, 0.0), s)


def test_ema_contraction(rng):
    student = rng.standard_normal(100)
    teacher = rng.standard_normal(100)
    d0 = np.linalg.norm(teacher - student)
    for k in range(1, 11):
        teacher = ema_update(teacher, student, 0.99)
        assert np.linalg.norm(teacher - student) == pytest.approx(0.99**k * d0, rel=1e-6)


def test_ema_shape_mismatch():
    with pytest.raises(ValueError):
        ema_update(np.zeros(3), np.zeros(4), 0.5)
