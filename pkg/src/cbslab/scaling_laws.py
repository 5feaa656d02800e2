"""Aggregate critical batch size from the local CBS curve.

If a whole run must use one fixed batch size, the value minimizing the L2
deviation from the local CBS curve f(t) over [0, T] is the curve's time
average (shown by differentiating the squared residual in the batch size).
This module provides that average numerically for arbitrary curves, in closed
form for power-law and logarithmic growth, and fits measured CBS points to
either family. Whether L2 deviation is the right closeness measure is an open
question; overshooting the critical batch size is plausibly worse than
undershooting it, and no asymmetric variant is implemented here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericFault, SingularFit

CURVE_FAMILIES = ("power", "log")


@dataclass(frozen=True)
class CbsCurveModel:
    """Fitted CBS growth curve: scale * t**exponent or scale * log(t + 1).

    Both families satisfy f(0) = 0, matching the observation that the critical
    batch size starts near zero.
    """

    family: str
    scale: float
    exponent: float | None = None  # power family only
    residual_sum: float = 0.0

    def __post_init__(self):
        if self.family not in CURVE_FAMILIES:
            raise ValueError(f"family must be one of {CURVE_FAMILIES}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.family == "power":
            if self.exponent is None or self.exponent <= 0:
                raise ValueError("power family needs exponent > 0")
        elif self.exponent is not None:
            raise ValueError("log family takes no exponent")

    def predict(self, tokens):
        t = np.asarray(tokens, dtype=np.float64)
        if self.family == "power":
            value = self.scale * np.power(t, self.exponent)
        else:
            value = self.scale * np.log1p(t)
        return float(value) if np.isscalar(tokens) else value

    def average_to(self, horizon: float) -> float:
        """Time-average of the fitted curve over [0, horizon]."""
        if self.family == "power":
            return self.scale * average_cbs_power(self.exponent, horizon)
        return self.scale * average_cbs_log(horizon)


def average_cbs_numeric(
    f: Callable[[np.ndarray], np.ndarray], horizon: float, n_points: int = 100_001
) -> float:
    """Composite-trapezoid approximation of the curve's time average.

    The integrands in play are smooth and monotone, so plain trapezoid with a
    dense grid beats adaptive machinery on simplicity; crank ``n_points`` for
    accuracy near integrable endpoint singularities like t**0.25.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    ts = np.linspace(0.0, horizon, n_points)
    ys = np.asarray(f(ts), dtype=np.float64)
    if ys.shape != ts.shape:
        ys = np.array([float(f(t)) for t in ts])
    if not np.all(np.isfinite(ys)):
        raise NumericFault("curve produced non-finite values on the quadrature grid")
    return float(np.trapezoid(ys, ts) / horizon)


def average_cbs_power(exponent: float, horizon: float) -> float:
    """Closed-form time average of t**exponent over [0, horizon].

    Equals horizon**exponent / (exponent + 1); with exponent 1/2 this is the
    (2/3) * sqrt(horizon) form behind square-root batch-size scaling laws.
    """
    if exponent <= 0:
        raise ValueError("exponent must be positive")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    return horizon**exponent / (exponent + 1.0)


def average_cbs_log(horizon: float) -> float:
    """Closed-form time average of log(t + 1) over [0, horizon].

    Integrating gives ((T+1)/T) * log(T+1) - 1, which approaches log(T) for
    large T.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    return (horizon + 1.0) / horizon * math.log1p(horizon) - 1.0


def l2_residual(
    f: Callable[[np.ndarray], np.ndarray], batch: float, horizon: float, n_points: int = 100_001
) -> float:
    """sqrt(integral of (batch - f(t))**2 over [0, horizon]) by trapezoid."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    ts = np.linspace(0.0, horizon, n_points)
    ys = np.asarray(f(ts), dtype=np.float64)
    if not np.all(np.isfinite(ys)):
        raise NumericFault("curve produced non-finite values on the quadrature grid")
    diff = batch - ys
    return float(math.sqrt(np.trapezoid(diff * diff, ts)))


def fit_cbs_curve(points: Sequence[tuple[float, float]], family: str) -> CbsCurveModel:
    """Least-squares fit of measured (tokens, cbs) points to a growth family.

    The power family fits a line in log-log coordinates (slope becomes the
    exponent); the log family solves the one-parameter scale directly. The
    reported residual sum is over the original coordinates for both families
    so they can be compared.
    """
    if family not in CURVE_FAMILIES:
        raise ValueError(f"family must be one of {CURVE_FAMILIES}")
    if len(points) < 3:
        raise ValueError(f"need at least 3 points, got {len(points)}")
    tokens = np.array([float(t) for t, _ in points])
    values = np.array([float(v) for _, v in points])
    if np.any(tokens <= 0):
        raise ValueError("token positions must be positive")
    if np.all(tokens == tokens[0]):
        raise SingularFit("all points share one token position")

    if family == "power":
        if np.any(values <= 0):
            raise ValueError("power-family fit needs positive cbs values")
        slope, intercept = np.polyfit(np.log(tokens), np.log(values), 1)
        model = CbsCurveModel(family="power", scale=float(np.exp(intercept)), exponent=float(slope))
    else:
        basis = np.log1p(tokens)
        scale = float((values @ basis) / (basis @ basis))
        model = CbsCurveModel(family="log", scale=scale)

    residual = float(np.sum((values - model.predict(tokens)) ** 2))
    return CbsCurveModel(
        family=model.family, scale=model.scale, exponent=model.exponent, residual_sum=residual
    )
