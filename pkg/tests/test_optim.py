import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbslab.errors import NumericFault
from cbslab.optim import (
    AdamHyper,
    LrSchedule,
    OptimizerState,
    adam_step,
    lr_at,
    scale_lr,
    sgd_step,
)


# ---------------------------------------------------------------------------
# SGD
# ---------------------------------------------------------------------------


def test_sgd_hand_values():
    state, params = sgd_step(OptimizerState.sgd(), np.array([1.0, 1.0]), np.array([2.0, 0.0]), 0.5)
    np.testing.assert_array_equal(params, [0.0, 1.0])
    assert state.step_count == 1


def test_sgd_zero_lr_identity():
    start = np.array([0.3, -0.7])
    _, params = sgd_step(OptimizerState.sgd(), start, np.array([5.0, 5.0]), 0.0)
    np.testing.assert_array_equal(params, start)


def test_sgd_geometric_contraction():
    # Noiseless bowl with unit curvature: each step multiplies the residual by
    # (1 - lr), so 100 steps from residual 1 land at 0.9**100.
    params = np.array([1.0])
    state = OptimizerState.sgd()
    for _ in range(100):
        state, params = sgd_step(state, params, params, 0.1)
    assert params[0] == pytest.approx(0.9**100, rel=1e-12)


def test_sgd_rejects_nonfinite():
    with pytest.raises(NumericFault):
        sgd_step(OptimizerState.sgd(), np.zeros(2), np.array([1.0, math.nan]), 0.1)
    with pytest.raises(ValueError):
        sgd_step(OptimizerState.sgd(), np.zeros(2), np.zeros(2), -0.1)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def reference_adam(params, grads, lr, beta1, beta2, eps):
    """Bias-corrected update written out in plain scalar arithmetic."""
    m = [0.0] * len(params)
    v = [0.0] * len(params)
    out = list(params)
    for t, grad in enumerate(grads, start=1):
        for i, g in enumerate(grad):
            m[i] = beta1 * m[i] + (1 - beta1) * g
            v[i] = beta2 * v[i] + (1 - beta2) * g * g
            m_hat = m[i] / (1 - beta1**t)
            v_hat = v[i] / (1 - beta2**t)
            out[i] -= lr * m_hat / (math.sqrt(v_hat) + eps)
    return out


def test_adam_first_step_matches_reference():
    hyper = AdamHyper(beta1=0.9, beta2=0.999, eps=1e-8)
    state = OptimizerState.adam(1, hyper)
    _, params = adam_step(state, np.array([1.0]), np.array([0.3]), 0.01)
    expected = reference_adam([1.0], [[0.3]], 0.01, 0.9, 0.999, 1e-8)
    assert params[0] == pytest.approx(expected[0], rel=1e-15)
    # bias correction makes the first step nearly the full learning rate
    assert params[0] == pytest.approx(1.0 - 0.01, abs=1e-9)


def test_adam_first_step_is_signed_lr():
    hyper = AdamHyper(beta1=0.9, beta2=0.999, eps=1e-8)
    for g in (0.003, -2.5, 40.0):
        state = OptimizerState.adam(1, hyper)
        _, params = adam_step(state, np.array([0.0]), np.array([g]), 0.01)
        # off from exactly lr by eps/|g| after bias correction
        assert params[0] == pytest.approx(-0.01 * math.copysign(1.0, g), rel=1e-5)


def test_adam_trajectory_matches_reference():
    hyper = AdamHyper(beta1=0.9, beta2=0.95, eps=1e-8)
    gen = np.random.default_rng(4)
    grads = gen.normal(size=(10, 3))
    state = OptimizerState.adam(3, hyper)
    params = np.zeros(3)
    for grad in grads:
        state, params = adam_step(state, params, grad, 0.02)
    expected = reference_adam([0.0] * 3, grads.tolist(), 0.02, 0.9, 0.95, 1e-8)
    np.testing.assert_allclose(params, expected, rtol=1e-12)
    assert state.step_count == 10


def test_adam_zero_grad_zero_moments_is_identity():
    state = OptimizerState.adam(2)
    start = np.array([1.0, -1.0])
    _, params = adam_step(state, start, np.zeros(2), 0.5)
    np.testing.assert_array_equal(params, start)


def test_adam_streamed_equals_replayed():
    hyper = AdamHyper()
    grads = np.random.default_rng(8).normal(size=(10, 4))

    def run():
        state = OptimizerState.adam(4, hyper)
        params = np.ones(4)
        for grad in grads:
            state, params = adam_step(state, params, grad, 0.01)
        return params

    np.testing.assert_array_equal(run(), run())


def test_adam_step_magnitude_bounded_on_random_trajectory():
    state = OptimizerState.adam(8)
    params = np.zeros(8)
    gen = np.random.default_rng(17)
    lr = 0.01
    max_move = 0.0
    for t in range(500):
        state, new_params = adam_step(state, params, gen.normal(size=8), lr)
        if t >= 50:  # let the moments warm up first
            max_move = max(max_move, float(np.max(np.abs(new_params - params))))
        params = new_params
    assert max_move <= lr * 1.5


def test_adam_requires_adam_state():
    with pytest.raises(ValueError):
        adam_step(OptimizerState.sgd(), np.zeros(1), np.zeros(1), 0.1)
    with pytest.raises(ValueError):
        AdamHyper(beta1=1.0)
    with pytest.raises(ValueError):
        AdamHyper(eps=0.0)


# ---------------------------------------------------------------------------
# Learning-rate schedules
# ---------------------------------------------------------------------------


def test_constant_schedule():
    sched = LrSchedule(kind="constant", base_lr=0.3, total_tokens=100)
    assert lr_at(sched, 0) == 0.3
    assert lr_at(sched, 100) == 0.3


def test_cosine_schedule_shape():
    sched = LrSchedule(kind="cosine", base_lr=1.0, total_tokens=1000, warmup_tokens=100)
    assert lr_at(sched, 0) == 0.0
    assert lr_at(sched, 50) == pytest.approx(0.5)
    assert lr_at(sched, 100) == pytest.approx(1.0)
    assert lr_at(sched, 550) == pytest.approx(0.5)
    assert lr_at(sched, 1000) == pytest.approx(0.0, abs=1e-15)


def test_anneal_tail_linearity():
    sched = LrSchedule(kind="linear_anneal_tail", base_lr=0.4, total_tokens=1000, anneal_tokens=200)
    assert lr_at(sched, 800) == pytest.approx(0.4)
    assert lr_at(sched, 900) == pytest.approx(0.2)
    assert lr_at(sched, 1000) == pytest.approx(0.0)


def test_anneal_tail_over_cosine():
    sched = LrSchedule(kind="cosine", base_lr=1.0, total_tokens=1000, anneal_tokens=100)
    v0 = lr_at(sched, 900)
    assert lr_at(sched, 950) == pytest.approx(v0 / 2)
    assert lr_at(sched, 1000) == pytest.approx(0.0, abs=1e-15)


def test_lr_out_of_range():
    sched = LrSchedule(kind="constant", base_lr=0.1, total_tokens=10)
    with pytest.raises(ValueError):
        lr_at(sched, 11)
    with pytest.raises(ValueError):
        lr_at(sched, -1)


def test_schedule_validation():
    with pytest.raises(ValueError):
        LrSchedule(kind="constant", base_lr=0.0, total_tokens=10)
    with pytest.raises(ValueError):
        LrSchedule(kind="linear_anneal_tail", base_lr=0.1, total_tokens=10)
    with pytest.raises(ValueError):
        LrSchedule(kind="cosine", base_lr=0.1, total_tokens=10, warmup_tokens=10)
    with pytest.raises(ValueError):
        LrSchedule(kind="constant", base_lr=0.1, total_tokens=10, warmup_tokens=6, anneal_tokens=6)


@pytest.mark.parametrize(
    "sched",
    [
        LrSchedule(kind="cosine", base_lr=1.0, total_tokens=10_000, warmup_tokens=1000),
        LrSchedule(kind="linear_anneal_tail", base_lr=1.0, total_tokens=10_000, anneal_tokens=4000),
        LrSchedule(kind="cosine", base_lr=1.0, total_tokens=10_000, warmup_tokens=500, anneal_tokens=2000),
    ],
)
def test_lr_nonincreasing_after_warmup(sched):
    values = [lr_at(sched, t) for t in range(sched.warmup_tokens, sched.total_tokens + 1, 37)]
    assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------------------
# Scaling rules
# ---------------------------------------------------------------------------


def test_scale_lr_sqrt_doubling():
    assert scale_lr("sqrt", 2.0, 0.0004) == pytest.approx(0.0004 * math.sqrt(2), rel=1e-15)
    assert scale_lr("sqrt", 2.0, 0.0004) == pytest.approx(0.00056569, abs=5e-9)


def test_scale_lr_identity_and_sqrt4():
    assert scale_lr("linear", 1.0, 0.123) == 0.123
    assert scale_lr("sqrt", 1.0, 0.123) == 0.123
    assert scale_lr("sqrt", 4.0, 0.0004) == pytest.approx(0.0008, rel=1e-15)


def test_scale_lr_rejects_bad_input():
    with pytest.raises(ValueError):
        scale_lr("linear", 0.0, 0.1)
    with pytest.raises(ValueError):
        scale_lr("cube", 2.0, 0.1)


@settings(max_examples=200, deadline=None)
@given(
    rule=st.sampled_from(["linear", "sqrt"]),
    k1=st.floats(0.01, 100.0),
    k2=st.floats(0.01, 100.0),
    base=st.floats(1e-6, 1.0),
)
def test_scale_lr_multiplicative(rule, k1, k2, base):
    combined = scale_lr(rule, k1 * k2, base)
    nested = scale_lr(rule, k1, scale_lr(rule, k2, base))
    assert combined == pytest.approx(nested, rel=1e-9)
