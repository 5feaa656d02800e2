"""Two-batch-size gradient-noise-scale estimator with confidence intervals.

Squared gradient norms measured at a small and a large batch size combine into
unbiased per-pair estimates of the gradient variance trace and of the squared
full-gradient norm. Their averaged ratio estimates the noise scale, the
classic proxy for the critical batch size. Intervals treat the variance-trace
samples as exponential-like (normal-approximation interval for an exponential
mean) and the squared-norm samples as normal; negative quantities clamp to
zero, and a nonpositive denominator bound sends the upper limit to infinity.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .csvio import write_csv
from .rng import RngStream
from .tasks import TaskSpec

DEFAULT_B_SMALL = 1
DEFAULT_B_BIG = 64
DEFAULT_N_PAIRS = 4096

NOISE_CSV_HEADER = [
    "checkpoint_tokens", "n_pairs", "b_small", "b_big",
    "s_mean", "g2_mean", "b_simple", "ci_low", "ci_high",
]


@dataclass(frozen=True)
class NoiseSamplePair:
    """Squared gradient norms at two batch sizes, measured on fresh data."""

    g2_small: float
    g2_big: float
    b_small: int
    b_big: int

    def __post_init__(self):
        if self.b_small < 1 or self.b_big < 1:
            raise ValueError("batch sizes must be positive")
        if self.b_small >= self.b_big:
            raise ValueError("b_small must be smaller than b_big")
        if self.g2_small < 0 or self.g2_big < 0:
            raise ValueError("squared norms cannot be negative")


@dataclass(frozen=True)
class NoiseScaleEstimate:
    s_mean: float  # estimate of the gradient-covariance trace
    g2_mean: float  # estimate of the squared full-gradient norm
    b_simple: float  # their ratio, clamped to [0, +inf]
    ci_low: float
    ci_high: float
    n_pairs: int


def collect_pairs(
    task: TaskSpec,
    params: np.ndarray,
    b_small: int,
    b_big: int,
    n_pairs: int,
    rng: RngStream,
) -> list[NoiseSamplePair]:
    """Measure squared gradient norms on ``n_pairs`` independent batch pairs.

    Both batches in a pair are fresh, independent draws at fixed ``params``;
    each pair uses its own child stream, so collection order is irrelevant and
    the result is a pure function of the stream key.
    """
    if n_pairs < 2:
        raise ValueError("n_pairs must be >= 2")
    pairs = []
    for i in range(n_pairs):
        child = rng.child(f"pair-{i}")
        _, grad_small = task.loss_and_grad(params, task.sample_batch(child, b_small))
        _, grad_big = task.loss_and_grad(params, task.sample_batch(child, b_big))
        pairs.append(
            NoiseSamplePair(
                g2_small=float(grad_small @ grad_small),
                g2_big=float(grad_big @ grad_big),
                b_small=b_small,
                b_big=b_big,
            )
        )
    return pairs


def _per_pair_stats(pairs: list[NoiseSamplePair]) -> tuple[np.ndarray, np.ndarray]:
    if len(pairs) < 2:
        raise ValueError("need at least 2 pairs")
    b_small, b_big = pairs[0].b_small, pairs[0].b_big
    if any(p.b_small != b_small or p.b_big != b_big for p in pairs):
        raise ValueError("pairs mix different batch sizes")
    g2_small = np.array([p.g2_small for p in pairs])
    g2_big = np.array([p.g2_big for p in pairs])
    trace_samples = (g2_small - g2_big) / (1.0 / b_small - 1.0 / b_big)
    norm_samples = (b_big * g2_big - b_small * g2_small) / (b_big - b_small)
    return trace_samples, norm_samples


def _ratio(s_mean: float, g2_mean: float) -> float:
    if s_mean <= 0.0:
        return 0.0
    if g2_mean <= 0.0:
        return math.inf
    return s_mean / g2_mean


def confidence_interval(pairs: list[NoiseSamplePair], level: float = 0.95) -> tuple[float, float]:
    """Interval for the noise-scale ratio from per-component intervals.

    The variance-trace mean gets the approximate exponential-mean interval
    [mean/(1+z/sqrt(n)), mean/(1-z/sqrt(n))]; the squared-norm mean gets a
    normal interval. The ratio interval divides crosswise, clamping negative
    endpoints to zero. Below 30 pairs the approximations are shaky; a warning
    is emitted and the interval computed anyway.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    trace_samples, norm_samples = _per_pair_stats(pairs)
    n = len(pairs)
    if n < 30:
        warnings.warn(f"only {n} pairs; confidence interval will be wide and approximate")
    z = 1.96 if level == 0.95 else NormalDist().inv_cdf(0.5 + level / 2.0)

    s_mean = float(trace_samples.mean())
    rel = z / math.sqrt(n)
    s_low = s_mean / (1.0 + rel)
    s_high = s_mean / (1.0 - rel) if rel < 1.0 else math.inf

    g2_mean = float(norm_samples.mean())
    g2_half = z * float(norm_samples.std(ddof=1)) / math.sqrt(n)
    g2_low = g2_mean - g2_half
    g2_high = g2_mean + g2_half

    s_low, s_high = max(s_low, 0.0), max(s_high, 0.0)
    g2_low, g2_high = max(g2_low, 0.0), max(g2_high, 0.0)

    ci_low = s_low / g2_high if g2_high > 0.0 else 0.0
    ci_high = s_high / g2_low if g2_low > 0.0 else math.inf
    return ci_low, ci_high


def estimate(pairs: list[NoiseSamplePair], level: float = 0.95) -> NoiseScaleEstimate:
    """Average the per-pair statistics and attach a confidence interval."""
    trace_samples, norm_samples = _per_pair_stats(pairs)
    s_mean = float(trace_samples.mean())
    g2_mean = float(norm_samples.mean())
    ci_low, ci_high = confidence_interval(pairs, level)
    return NoiseScaleEstimate(
        s_mean=s_mean,
        g2_mean=g2_mean,
        b_simple=_ratio(s_mean, g2_mean),
        ci_low=ci_low,
        ci_high=ci_high,
        n_pairs=len(pairs),
    )


def write_noise_csv(estimates: dict[int, tuple[NoiseScaleEstimate, int, int]], path):
    """One row per checkpoint: tokens -> (estimate, b_small, b_big)."""
    rows = []
    for tokens in sorted(estimates):
        est, b_small, b_big = estimates[tokens]
        rows.append(
            (tokens, est.n_pairs, b_small, b_big,
             est.s_mean, est.g2_mean, est.b_simple, est.ci_low, est.ci_high)
        )
    return write_csv(path, NOISE_CSV_HEADER, rows)
