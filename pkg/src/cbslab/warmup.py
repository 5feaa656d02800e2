"""Batch-size warmup: turn a measured CBS curve into a doubling schedule.

Training starts at a small batch and doubles (with the scaling rule's lr
factor) whenever the measured critical batch size exceeds twice the current
batch. Thresholds come from the curve's conservative lower bounds, so the
schedule never trains above the measured CBS. The planner also builds the two
control arms used to judge the schedule: a fixed small batch and a fixed
large batch with fully scaled learning rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .cbs_meter import CbsMeasurement
from .engine import BatchSchedule, Checkpoint, RunLog, Segment, train
from .optim import SCALING_RULES, LrSchedule, scaling_factor
from .tasks import TaskSpec

COMPARISON_CSV_HEADER = ["arm", "final_pt_loss", "final_mt_loss", "grad_steps", "steps_saved_pct"]
ARM_NAMES = ("warmup", "small_batch", "large_batch")


def should_double(b_star: float, current_batch: int) -> bool:
    """True when the measured CBS strictly exceeds twice the current batch."""
    if b_star <= 0 or current_batch <= 0:
        raise ValueError("inputs must be positive")
    return b_star > 2 * current_batch


@dataclass(frozen=True)
class WarmupPlan:
    """Initial batch/lr plus the token positions at which the batch doubles.

    After the i-th threshold the batch is ``initial_batch * 2**i`` with lr
    multiplier f(2**i). Thresholds are nondecreasing; equal thresholds mean
    the curve justified more than one doubling at the same checkpoint.
    """

    initial_batch: int
    initial_base_lr: float
    doubling_thresholds: tuple[int, ...]
    rule: str = "sqrt"

    def __post_init__(self):
        if self.initial_batch < 1:
            raise ValueError("initial_batch must be positive")
        if self.initial_base_lr <= 0:
            raise ValueError("initial_base_lr must be positive")
        if self.rule not in SCALING_RULES:
            raise ValueError(f"rule must be one of {SCALING_RULES}")
        thresholds = tuple(int(t) for t in self.doubling_thresholds)
        object.__setattr__(self, "doubling_thresholds", thresholds)
        if any(t < 0 for t in thresholds):
            raise ValueError("thresholds must be nonnegative token positions")
        if any(b > a for a, b in zip(thresholds[1:], thresholds[:-1])):
            raise ValueError("thresholds must be nondecreasing")

    @property
    def doublings(self) -> int:
        return len(self.doubling_thresholds)


def thresholds_from_curve(
    curve: Sequence[CbsMeasurement], initial_batch: int, max_doublings: int
) -> list[int]:
    """Token positions where the curve's lower bound justifies each doubling.

    The i-th threshold is the first checkpoint whose lower bound exceeds twice
    the batch reached after i-1 doublings; the search stops as soon as no
    checkpoint qualifies. Lower bounds (not interval midpoints) keep the plan
    conservative.
    """
    if not curve:
        raise ValueError("curve must be nonempty")
    positions = [m.checkpoint_tokens for m in curve]
    if positions != sorted(positions):
        raise ValueError("curve must be sorted by checkpoint_tokens")
    if initial_batch < 1:
        raise ValueError("initial_batch must be positive")
    thresholds = []
    for i in range(max_doublings):
        current = initial_batch * 2**i
        hit = next((m for m in curve if should_double(m.lower_bound, current)), None)
        if hit is None:
            break
        thresholds.append(hit.checkpoint_tokens)
    return thresholds


def plan_schedule(plan: WarmupPlan) -> BatchSchedule:
    """Expand a plan into engine segments, collapsing same-token doublings."""
    by_start = {0: (plan.initial_batch, 1.0)}
    for i, threshold in enumerate(plan.doubling_thresholds, start=1):
        factor = 2**i
        by_start[threshold] = (plan.initial_batch * factor, scaling_factor(plan.rule, factor))
    segments = tuple(
        Segment(start, batch, mult)
        for start, (batch, mult) in sorted(by_start.items())
    )
    return BatchSchedule(segments, reference_batch=plan.initial_batch)


@dataclass(frozen=True)
class Arm:
    name: str
    batch_schedule: BatchSchedule
    lr_schedule: LrSchedule


def build_arms(
    plan: WarmupPlan,
    total_tokens: int,
    anneal_tokens: int,
    lr_kind: str = "constant",
    lr_warmup_tokens: int = 0,
) -> dict[str, Arm]:
    """The three comparison runs: warmup schedule plus small/large controls.

    All arms share one base lr schedule (built on the plan's initial lr, with
    a linear anneal tail when ``anneal_tokens`` > 0); batch-size multipliers
    do the lr scaling. The large-batch control holds the plan's final batch
    with its fully scaled lr from token 0.
    """
    if total_tokens <= 0:
        raise ValueError("total_tokens must be positive")
    if anneal_tokens < 0 or anneal_tokens >= total_tokens:
        raise ValueError("anneal_tokens must lie in [0, total_tokens)")
    lr_schedule = LrSchedule(
        kind=lr_kind,
        base_lr=plan.initial_base_lr,
        total_tokens=total_tokens,
        warmup_tokens=lr_warmup_tokens,
        anneal_tokens=anneal_tokens,
    )
    final_factor = 2**plan.doublings
    arms = {
        "warmup": Arm("warmup", plan_schedule(plan), lr_schedule),
        "small_batch": Arm(
            "small_batch", BatchSchedule.single(plan.initial_batch, 1.0), lr_schedule
        ),
        "large_batch": Arm(
            "large_batch",
            BatchSchedule.single(
                plan.initial_batch * final_factor,
                scaling_factor(plan.rule, final_factor),
                reference_batch=plan.initial_batch,
            ),
            lr_schedule,
        ),
    }
    return arms


def planned_step_count(schedule: BatchSchedule, total_tokens: int, tokens_per_example: int) -> int:
    """Exact number of optimizer steps the engine will take, in closed form.

    Mirrors the engine's transition rule: a segment stays active until the
    first step that starts at or past the next segment's start token.
    """
    if total_tokens <= 0:
        raise ValueError("total_tokens must be positive")
    tokens = 0
    steps = 0
    segments = schedule.segments
    for i, seg in enumerate(segments):
        next_start = segments[i + 1].start_token if i + 1 < len(segments) else None
        bound = total_tokens if next_start is None else min(next_start, total_tokens)
        if tokens >= bound:
            continue
        per_step = seg.batch_size * tokens_per_example
        n = -(-(bound - tokens) // per_step)  # ceil division
        steps += n
        tokens += n * per_step
        if tokens >= total_tokens:
            break
    return steps


def plan_is_safe(plan: WarmupPlan, curve: Sequence[CbsMeasurement]) -> bool:
    """Check the warmup batch never exceeds the step-interpolated CBS lower bound.

    The curve's lower bound is held constant from each checkpoint until the
    next (step-function interpolation). Before the first checkpoint, only the
    initial batch is allowed.
    """
    schedule = plan_schedule(plan)

    def bound_at(tokens: int) -> float:
        value = None
        for m in curve:
            if m.checkpoint_tokens <= tokens:
                value = m.lower_bound
            else:
                break
        return value if value is not None else float(plan.initial_batch)

    for seg in schedule.segments:
        if seg.batch_size > bound_at(seg.start_token):
            return False
    return True


# ---------------------------------------------------------------------------
# Arm execution and comparison
# ---------------------------------------------------------------------------


@dataclass
class ArmOutcome:
    name: str
    pt_loss: float  # smoothed loss when the anneal tail begins
    mt_loss: float  # smoothed loss at the end of the anneal
    grad_steps: int
    run_log: RunLog
    final_checkpoint: Checkpoint


def run_arm(
    task: TaskSpec,
    init: Checkpoint,
    arm: Arm,
    anneal_tokens: int,
    ema_alpha: float = 0.5,
) -> ArmOutcome:
    """Train an arm to its schedule's end, splitting at the anneal boundary.

    The run executes as pretraining up to ``total - anneal`` tokens and then
    the anneal tail, which by resume equivalence is identical to one
    uninterrupted run; the split point is where the pretraining loss is read.
    """
    total = arm.lr_schedule.total_tokens
    pre_budget = total - anneal_tokens
    log, checkpoint = train(
        task, init, arm.batch_schedule, arm.lr_schedule, None, pre_budget, ema_alpha
    )
    pt_loss = checkpoint.smoothed_loss
    if anneal_tokens > 0 and checkpoint.tokens_seen < total:
        tail_log, checkpoint = train(
            task,
            checkpoint,
            arm.batch_schedule,
            arm.lr_schedule,
            None,
            total - checkpoint.tokens_seen,
            ema_alpha,
        )
        log.records.extend(tail_log.records)
    return ArmOutcome(
        name=arm.name,
        pt_loss=pt_loss,
        mt_loss=checkpoint.smoothed_loss,
        grad_steps=checkpoint.optimizer.step_count - init.optimizer.step_count,
        run_log=log,
        final_checkpoint=checkpoint,
    )


def comparison_rows(outcomes: dict[str, ArmOutcome]) -> list[tuple]:
    """Rows for the comparison report, with step savings vs the small-batch arm."""
    baseline = outcomes["small_batch"].grad_steps
    rows = []
    for name in ARM_NAMES:
        outcome = outcomes[name]
        saved = 100.0 * (1.0 - outcome.grad_steps / baseline)
        rows.append((name, outcome.pt_loss, outcome.mt_loss, outcome.grad_steps, saved))
    return rows
