"""Optimizers, base learning-rate schedules, and batch-size scaling rules."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericFault

SCALING_RULES = ("linear", "sqrt")
SCHEDULE_KINDS = ("constant", "cosine", "linear_anneal_tail")


@dataclass(frozen=True)
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.eps <= 0.0:
            raise ValueError("eps must be > 0")


@dataclass(eq=False)
class OptimizerState:
    """State advanced by exactly one training run; step_count grows by 1 per step."""

    kind: str
    step_count: int = 0
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None
    hyper: AdamHyper | None = None

    @classmethod
    def sgd(cls) -> "OptimizerState":
        return cls(kind="sgd")

    @classmethod
    def adam(cls, dim: int, hyper: AdamHyper | None = None) -> "OptimizerState":
        return cls(
            kind="adam",
            first_moment=np.zeros(dim),
            second_moment=np.zeros(dim),
            hyper=hyper or AdamHyper(),
        )

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            kind=self.kind,
            step_count=self.step_count,
            first_moment=None if self.first_moment is None else self.first_moment.copy(),
            second_moment=None if self.second_moment is None else self.second_moment.copy(),
            hyper=self.hyper,
        )


def _check_finite(grad: np.ndarray) -> None:
    if not np.all(np.isfinite(grad)):
        raise NumericFault("gradient contains non-finite entries")


def sgd_step(
    state: OptimizerState, params: np.ndarray, grad: np.ndarray, lr: float
) -> tuple[OptimizerState, np.ndarray]:
    """Plain gradient step: ``params - lr * grad``."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    _check_finite(grad)
    new_params = params - lr * grad
    return replace(state, step_count=state.step_count + 1), new_params


def adam_step(
    state: OptimizerState, params: np.ndarray, grad: np.ndarray, lr: float
) -> tuple[OptimizerState, np.ndarray]:
    """Bias-corrected Adam update; moments are advanced before the parameter step."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if state.kind != "adam" or state.hyper is None:
        raise ValueError("adam_step requires an adam OptimizerState")
    _check_finite(grad)
    h = state.hyper
    t = state.step_count + 1
    m = h.beta1 * state.first_moment + (1.0 - h.beta1) * grad
    v = h.beta2 * state.second_moment + (1.0 - h.beta2) * grad * grad
    m_hat = m / (1.0 - h.beta1**t)
    v_hat = v / (1.0 - h.beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + h.eps)
    new_state = OptimizerState(
        kind="adam", step_count=t, first_moment=m, second_moment=v, hyper=h
    )
    return new_state, new_params


def optimizer_step(
    state: OptimizerState, params: np.ndarray, grad: np.ndarray, lr: float
) -> tuple[OptimizerState, np.ndarray]:
    if state.kind == "sgd":
        return sgd_step(state, params, grad, lr)
    if state.kind == "adam":
        return adam_step(state, params, grad, lr)
    raise ValueError(f"unknown optimizer kind {state.kind!r}")


# ---------------------------------------------------------------------------
# Learning-rate schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    """Base learning rate as a function of tokens consumed.

    Kinds:
      * ``constant``: flat at ``base_lr`` (after optional linear warmup).
      * ``cosine``: linear warmup then half-cosine decay to 0 at ``total_tokens``.
      * ``linear_anneal_tail``: flat, then over the final ``anneal_tokens`` the
        remaining learning rate decays linearly to 0.

    ``anneal_tokens`` may also be set on the other kinds, in which case the
    tail linearly anneals whatever value the base shape had at the tail start.
    """

    kind: str
    base_lr: float
    total_tokens: int
    warmup_tokens: int = 0
    anneal_tokens: int = 0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.total_tokens <= 0:
            raise ValueError("total_tokens must be > 0")
        if self.warmup_tokens < 0 or self.anneal_tokens < 0:
            raise ValueError("warmup_tokens and anneal_tokens must be >= 0")
        if self.warmup_tokens + self.anneal_tokens > self.total_tokens:
            raise ValueError("warmup_tokens + anneal_tokens must not exceed total_tokens")
        if self.kind == "cosine" and self.warmup_tokens >= self.total_tokens:
            raise ValueError("cosine schedule needs warmup_tokens < total_tokens")
        if self.kind == "linear_anneal_tail" and self.anneal_tokens == 0:
            raise ValueError("linear_anneal_tail needs anneal_tokens > 0")

    def _base_value(self, tokens: float) -> float:
        if self.warmup_tokens > 0 and tokens < self.warmup_tokens:
            return self.base_lr * tokens / self.warmup_tokens
        if self.kind == "cosine":
            span = self.total_tokens - self.warmup_tokens
            progress = (tokens - self.warmup_tokens) / span
            return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
        return self.base_lr


def lr_at(schedule: LrSchedule, tokens: int) -> float:
    """Schedule value at a token count in [0, total_tokens]."""
    if tokens < 0 or tokens > schedule.total_tokens:
        raise ValueError(
            f"tokens {tokens} outside schedule range [0, {schedule.total_tokens}]"
        )
    if schedule.anneal_tokens > 0:
        tail_start = schedule.total_tokens - schedule.anneal_tokens
        if tokens >= tail_start:
            v0 = schedule._base_value(tail_start)
            return v0 * (1.0 - (tokens - tail_start) / schedule.anneal_tokens)
    return schedule._base_value(tokens)


# ---------------------------------------------------------------------------
# Batch-size -> learning-rate scaling rules
# ---------------------------------------------------------------------------


def scaling_factor(rule: str, k: float) -> float:
    """Learning-rate factor for a batch-size multiplier ``k``; f(1) == 1."""
    if k <= 0:
        raise ValueError(f"batch multiplier must be > 0, got {k}")
    if rule == "linear":
        return float(k)
    if rule == "sqrt":
        return math.sqrt(k)
    raise ValueError(f"rule must be one of {SCALING_RULES}, got {rule!r}")


def scale_lr(rule: str, k: float, base_lr: float) -> float:
    """Scale a base learning rate for a batch-size multiplier under ``rule``."""
    return scaling_factor(rule, k) * base_lr
