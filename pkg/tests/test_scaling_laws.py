import math

import numpy as np
import pytest

from cbslab.errors import SingularFit
from cbslab.scaling_laws import (
    CbsCurveModel,
    average_cbs_log,
    average_cbs_numeric,
    average_cbs_power,
    fit_cbs_curve,
    l2_residual,
)


# ---------------------------------------------------------------------------
# Time averages
# ---------------------------------------------------------------------------


def test_average_of_constant():
    assert average_cbs_numeric(lambda t: np.full_like(t, 7.0), 50.0) == pytest.approx(7.0)


def test_average_of_linear_curve():
    assert average_cbs_numeric(lambda t: t, 10.0) == pytest.approx(5.0, rel=1e-12)


def test_sqrt_curve_quadrature_matches_closed_form():
    horizon = 1e4
    numeric = average_cbs_numeric(np.sqrt, horizon, n_points=1_000_001)
    assert numeric == pytest.approx((2.0 / 3.0) * 100.0, rel=1e-6)
    assert average_cbs_power(0.5, horizon) == pytest.approx((2.0 / 3.0) * 100.0, rel=1e-15)


def test_power_closed_form_values():
    assert average_cbs_power(1.0, 10.0) == pytest.approx(5.0)
    assert average_cbs_power(2.0, 3.0) == pytest.approx(3.0)
    assert average_cbs_power(0.5, 9.0) == pytest.approx(2.0)  # (2/3) * sqrt(9)


@pytest.mark.parametrize("exponent", [0.25, 0.5, 1.0, 2.0])
@pytest.mark.parametrize("horizon", [1e2, 1e4, 1e6])
def test_power_family_quadrature_agreement(exponent, horizon):
    numeric = average_cbs_numeric(lambda t: np.power(t, exponent), horizon, n_points=1_000_001)
    closed = average_cbs_power(exponent, horizon)
    assert abs(numeric - closed) / closed < 1e-6


def test_log_closed_form_vs_quadrature():
    horizon = 1e3
    numeric = average_cbs_numeric(np.log1p, horizon, n_points=1_000_001)
    assert average_cbs_log(horizon) == pytest.approx(numeric, rel=1e-9)


def test_log_average_small_horizon_exact():
    # integral of log(t+1) over [0, e-1] is exactly 1
    horizon = math.e - 1.0
    assert average_cbs_log(horizon) == pytest.approx(1.0 / horizon, rel=1e-12)


def test_log_average_large_horizon_approximation():
    horizon = 1e6
    reference = math.log(horizon + 1.0) * horizon / (horizon + 1.0) - 1.0
    assert abs(average_cbs_log(horizon) - reference) / reference < 1e-4
    assert average_cbs_log(horizon) == pytest.approx(math.log(horizon), rel=0.1)


def test_average_validation():
    with pytest.raises(ValueError):
        average_cbs_numeric(np.sqrt, 0.0)
    with pytest.raises(ValueError):
        average_cbs_numeric(np.sqrt, 10.0, n_points=1)
    with pytest.raises(ValueError):
        average_cbs_power(0.0, 10.0)
    with pytest.raises(ValueError):
        average_cbs_log(-1.0)


def test_quadrature_linearity():
    f = lambda t: np.sqrt(t)
    g = lambda t: np.log1p(t)
    combo = lambda t: 2.0 * f(t) + 3.0 * g(t)
    horizon = 100.0
    lhs = average_cbs_numeric(combo, horizon, 20_001)
    rhs = 2.0 * average_cbs_numeric(f, horizon, 20_001) + 3.0 * average_cbs_numeric(g, horizon, 20_001)
    assert lhs == pytest.approx(rhs, rel=1e-12)


# ---------------------------------------------------------------------------
# L2 residual minimizer
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "curve,horizon,optimum",
    [
        (lambda t: np.sqrt(t), 1e4, average_cbs_power(0.5, 1e4)),
        (lambda t: np.power(t, 2.0), 30.0, average_cbs_power(2.0, 30.0)),
        (lambda t: np.log1p(t), 1e3, average_cbs_log(1e3)),
    ],
)
def test_time_average_minimizes_l2_residual(curve, horizon, optimum):
    grid = np.linspace(0.5 * optimum, 1.5 * optimum, 41)
    residuals = [l2_residual(curve, b, horizon, 20_001) for b in grid]
    best = grid[int(np.argmin(residuals))]
    cell = grid[1] - grid[0]
    assert abs(best - optimum) <= cell


# ---------------------------------------------------------------------------
# Curve fitting
# ---------------------------------------------------------------------------


def test_fit_recovers_exact_power_law():
    tokens = np.logspace(1, 5, 12)
    points = [(t, t**0.5) for t in tokens]
    model = fit_cbs_curve(points, "power")
    assert model.exponent == pytest.approx(0.5, abs=1e-6)
    assert model.scale == pytest.approx(1.0, rel=1e-6)
    assert model.residual_sum < 1e-12


def test_fit_model_selection_on_clean_log_data():
    tokens = np.logspace(1, 5, 12)
    points = [(t, 3.0 * math.log1p(t)) for t in tokens]
    log_model = fit_cbs_curve(points, "log")
    power_model = fit_cbs_curve(points, "power")
    assert log_model.scale == pytest.approx(3.0, rel=1e-9)
    assert log_model.residual_sum < power_model.residual_sum


def test_fit_recovers_power_law_under_noise():
    tokens = np.logspace(2, 6, 16)
    gen = np.random.default_rng(42)
    hits = 0
    trials = 40
    for _ in range(trials):
        noise = gen.normal(0.0, 0.05, size=len(tokens))
        points = [(t, (t**0.5) * math.exp(n)) for t, n in zip(tokens, noise)]
        model = fit_cbs_curve(points, "power")
        hits += abs(model.exponent - 0.5) <= 0.05
    assert hits >= int(0.95 * trials) - 1


def test_fit_validation():
    with pytest.raises(ValueError):
        fit_cbs_curve([(1.0, 1.0), (2.0, 2.0)], "power")
    with pytest.raises(SingularFit):
        fit_cbs_curve([(5.0, 1.0), (5.0, 2.0), (5.0, 3.0)], "power")
    with pytest.raises(ValueError):
        fit_cbs_curve([(0.0, 1.0), (2.0, 2.0), (3.0, 3.0)], "power")
    with pytest.raises(ValueError):
        fit_cbs_curve([(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)], "cubic")


def test_model_predict_and_average():
    power = CbsCurveModel(family="power", scale=2.0, exponent=0.5)
    assert power.predict(0.0) == 0.0
    assert power.predict(9.0) == pytest.approx(6.0)
    assert power.average_to(9.0) == pytest.approx(2.0 * average_cbs_power(0.5, 9.0))
    log_model = CbsCurveModel(family="log", scale=2.0)
    assert log_model.predict(0.0) == 0.0
    assert log_model.average_to(10.0) == pytest.approx(2.0 * average_cbs_log(10.0))


def test_model_validation():
    with pytest.raises(ValueError):
        CbsCurveModel(family="power", scale=1.0, exponent=-0.5)
    with pytest.raises(ValueError):
        CbsCurveModel(family="log", scale=1.0, exponent=0.5)
    with pytest.raises(ValueError):
        CbsCurveModel(family="power", scale=0.0, exponent=0.5)
