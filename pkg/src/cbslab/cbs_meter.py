"""Branched-training measurement of the critical batch size.

From one checkpoint, short training branches run at several batch-size
multipliers k with learning rate scaled by f(k). The largest multiplier whose
final smoothed loss stays within a tolerance of every smaller multiplier's
loss marks the lower edge of the critical batch size; the next multiplier up
bounds it from above. Branch RNG streams are derived per (checkpoint, k), so
branches are mutually independent and order of execution does not matter.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .csvio import write_csv
from .engine import BatchSchedule, Checkpoint, RunLog, train
from .errors import NumericFault
from .optim import SCALING_RULES, LrSchedule, scaling_factor
from .tasks import TaskSpec

SWEEP_CSV_HEADER = ["checkpoint_tokens", "k", "realized_batch", "lr", "final_smoothed_loss", "diverged"]
CURVE_CSV_HEADER = ["checkpoint_tokens", "k_star", "lower", "upper", "point", "censored"]


@dataclass(frozen=True)
class SweepConfig:
    """One branch sweep: which multipliers to try and how long each branch runs."""

    multipliers: tuple[float, ...]
    window_tokens: int
    base_batch: int
    base_lr: float
    rule: str = "sqrt"
    tolerance: float = 0.01
    ema_alpha: float = 0.5
    replicas: int = 1

    def __post_init__(self):
        ks = tuple(float(k) for k in self.multipliers)
        object.__setattr__(self, "multipliers", ks)
        if not ks:
            raise ValueError("multipliers must be nonempty")
        if any(k <= 0 for k in ks):
            raise ValueError("multipliers must be positive")
        if list(ks) != sorted(set(ks)):
            raise ValueError("multipliers must be sorted ascending and distinct")
        if self.window_tokens < 1:
            raise ValueError("window_tokens must be positive")
        if self.base_batch < 1:
            raise ValueError("base_batch must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.rule not in SCALING_RULES:
            raise ValueError(f"rule must be one of {SCALING_RULES}")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if not 0.0 < self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must lie in (0, 1]")
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")

    def with_multipliers(self, multipliers) -> "SweepConfig":
        return SweepConfig(
            multipliers=tuple(multipliers),
            window_tokens=self.window_tokens,
            base_batch=self.base_batch,
            base_lr=self.base_lr,
            rule=self.rule,
            tolerance=self.tolerance,
            ema_alpha=self.ema_alpha,
            replicas=self.replicas,
        )


@dataclass
class BranchResult:
    k: float
    realized_k: float
    realized_batch: int
    lr_multiplier: float
    lr: float
    loss: float  # final smoothed loss; +inf when the branch diverged
    diverged: bool
    run_log: RunLog


@dataclass(frozen=True)
class CbsMeasurement:
    """Interval estimate of the critical batch size at one checkpoint."""

    checkpoint_tokens: int
    per_k_loss: dict[float, float]
    k_star: float
    lower_bound: float
    upper_bound: float | None  # None when censored above the swept grid
    point: float | None  # geometric mean of the bounds; None when censored

    @property
    def censored(self) -> bool:
        return self.upper_bound is None


def realized_branch_batch(k: float, base_batch: int) -> int:
    """Round k * base_batch to the nearest integer, at least 1."""
    return max(1, int(math.floor(k * base_batch + 0.5)))


def _run_branch(
    task: TaskSpec,
    checkpoint: Checkpoint,
    sweep: SweepConfig,
    lr_schedule: LrSchedule,
    k: float,
    share_parent_stream: bool,
) -> BranchResult:
    batch = realized_branch_batch(k, sweep.base_batch)
    realized_k = batch / sweep.base_batch
    multiplier = scaling_factor(sweep.rule, realized_k)
    schedule = BatchSchedule.single(batch, multiplier, reference_batch=sweep.base_batch)

    losses = []
    diverged = False
    first_log: RunLog | None = None
    for replica in range(sweep.replicas):
        start = checkpoint.copy()
        # Each branch smooths its own window from scratch; carrying the parent
        # run's EMA would weight branches unequally (fewer steps at larger
        # batch means more leftover parent signal).
        start.smoothed_loss = math.nan
        if not (share_parent_stream and replica == 0):
            start.rng = checkpoint.rng.child(
                f"branch k={k!r} tokens={checkpoint.tokens_seen} replica={replica}"
            )
        try:
            log, final = train(
                task, start, schedule, lr_schedule, sweep.rule,
                sweep.window_tokens, ema_alpha=sweep.ema_alpha,
            )
            losses.append(final.smoothed_loss)
        except NumericFault as fault:
            diverged = True
            losses.append(math.inf)
            log = fault.run_log if fault.run_log is not None else RunLog()
        if first_log is None:
            first_log = log
    loss = math.inf if diverged else sum(losses) / len(losses)
    return BranchResult(
        k=k,
        realized_k=realized_k,
        realized_batch=batch,
        lr_multiplier=multiplier,
        lr=multiplier * sweep.base_lr,
        loss=loss,
        diverged=diverged,
        run_log=first_log,
    )


def _branch_job(args) -> tuple[float, BranchResult]:
    task, checkpoint, sweep, lr_schedule, k, share = args
    return k, _run_branch(task, checkpoint, sweep, lr_schedule, k, share)


def branch_sweep(
    checkpoint: Checkpoint,
    task: TaskSpec,
    sweep: SweepConfig,
    lr_schedule: LrSchedule,
    identity_k1: bool = False,
    n_jobs: int = 1,
) -> dict[float, BranchResult]:
    """Train one branch per multiplier from copies of ``checkpoint``.

    Every branch runs for ``sweep.window_tokens`` tokens at batch
    ``round(k * base_batch)`` with lr multiplier f(realized k). Branches that
    hit a numeric fault are flagged diverged with loss +inf; the sweep
    continues. With ``identity_k1`` the k=1 branch keeps the parent stream so
    it reproduces the unbranched continuation exactly; all other branches (and
    all replicas past the first) use child streams keyed by multiplier.
    """
    max_batch = realized_branch_batch(sweep.multipliers[-1], sweep.base_batch)
    if sweep.window_tokens < max_batch * task.tokens_per_example:
        raise ValueError(
            f"window_tokens={sweep.window_tokens} smaller than one batch at the "
            f"largest multiplier ({max_batch} examples x {task.tokens_per_example} tokens)"
        )
    jobs = [
        (task, checkpoint, sweep, lr_schedule, k, identity_k1 and k == 1.0)
        for k in sweep.multipliers
    ]
    results: dict[float, BranchResult] = {}
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            for k, result in pool.map(_branch_job, jobs):
                results[k] = result
    else:
        for job in jobs:
            k, result = _branch_job(job)
            results[k] = result
    return {k: results[k] for k in sweep.multipliers}


def detect_kstar(per_k_loss: dict[float, float], tolerance: float) -> float:
    """Largest multiplier whose loss stays within ``tolerance`` of all smaller ones.

    Returns max{k : for every swept k' < k, loss[k] <= loss[k'] + tolerance}.
    The smallest finite multiplier qualifies vacuously; diverged branches
    (+inf) never qualify but still appear in the comparison set, where any
    finite loss beats them.
    """
    if not per_k_loss:
        raise ValueError("per_k_loss must be nonempty")
    items = sorted(per_k_loss.items())
    best = None
    for i, (k, loss) in enumerate(items):
        if not math.isfinite(loss):
            continue
        if all(loss <= smaller_loss + tolerance for _, smaller_loss in items[:i]):
            best = k
    if best is None:
        raise ValueError("every branch diverged; no multiplier qualifies")
    return best


def cbs_interval(k_star: float, sweep: SweepConfig) -> tuple[float, float | None, float | None]:
    """Interval (lower, upper, point) implied by ``k_star`` on the swept grid.

    lower = k_star * base_batch; upper = next multiplier * base_batch, or None
    (censored) when k_star is the largest swept multiplier; point is the
    geometric mean of the bounds, absent when censored.
    """
    if k_star not in sweep.multipliers:
        raise ValueError(f"k_star {k_star} is not one of the swept multipliers")
    idx = sweep.multipliers.index(k_star)
    lower = k_star * sweep.base_batch
    if idx + 1 < len(sweep.multipliers):
        upper = sweep.multipliers[idx + 1] * sweep.base_batch
        return lower, upper, math.sqrt(lower * upper)
    return lower, None, None


def measure_checkpoint(
    checkpoint: Checkpoint,
    task: TaskSpec,
    sweep: SweepConfig,
    lr_schedule: LrSchedule,
    n_jobs: int = 1,
) -> tuple[CbsMeasurement, dict[float, BranchResult]]:
    """Sweep one checkpoint and reduce the branch losses to a measurement."""
    results = branch_sweep(checkpoint, task, sweep, lr_schedule, n_jobs=n_jobs)
    per_k_loss = {k: r.loss for k, r in results.items()}
    k_star = detect_kstar(per_k_loss, sweep.tolerance)
    lower, upper, point = cbs_interval(k_star, sweep)
    measurement = CbsMeasurement(
        checkpoint_tokens=checkpoint.tokens_seen,
        per_k_loss=per_k_loss,
        k_star=k_star,
        lower_bound=lower,
        upper_bound=upper,
        point=point,
    )
    return measurement, results


def measure_cbs_curve(
    store,
    run_id: str,
    task: TaskSpec,
    checkpoint_tokens: list[int],
    sweep_template: SweepConfig,
    lr_schedule: LrSchedule,
    per_checkpoint_multipliers: dict[int, tuple[float, ...]] | None = None,
    n_jobs: int = 1,
) -> tuple[list[CbsMeasurement], dict[int, dict[float, BranchResult]]]:
    """Measure the CBS at several checkpoints of a stored run.

    ``per_checkpoint_multipliers`` lets early checkpoints use a different
    (typically coarser or lower) multiplier grid than late ones. Missing
    checkpoints raise :class:`~cbslab.errors.CheckpointNotFound` naming the
    requested position.
    """
    from .engine import load_checkpoint  # local import keeps module load light

    overrides = per_checkpoint_multipliers or {}
    manifest = store.load_manifest(run_id)
    measurements = []
    sweeps: dict[int, dict[float, BranchResult]] = {}
    for tokens in checkpoint_tokens:
        path = store.find_checkpoint(manifest, tokens)
        checkpoint = load_checkpoint(path)
        sweep = sweep_template
        if tokens in overrides:
            sweep = sweep_template.with_multipliers(overrides[tokens])
        measurement, results = measure_checkpoint(checkpoint, task, sweep, lr_schedule, n_jobs)
        measurements.append(measurement)
        sweeps[tokens] = results
    return measurements, sweeps


# ---------------------------------------------------------------------------
# CSV emission / ingestion
# ---------------------------------------------------------------------------


def write_sweep_csv(sweeps: dict[int, dict[float, BranchResult]], path) -> Path:
    rows = []
    for tokens in sorted(sweeps):
        for k in sorted(sweeps[tokens]):
            r = sweeps[tokens][k]
            rows.append((tokens, r.k, r.realized_batch, r.lr, r.loss, r.diverged))
    return write_csv(path, SWEEP_CSV_HEADER, rows)


def write_curve_csv(measurements: list[CbsMeasurement], path) -> Path:
    rows = [
        (m.checkpoint_tokens, m.k_star, m.lower_bound, m.upper_bound, m.point, m.censored)
        for m in measurements
    ]
    return write_csv(path, CURVE_CSV_HEADER, rows)


def read_curve_csv(path) -> list[CbsMeasurement]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != ",".join(CURVE_CSV_HEADER):
        raise ValueError(f"{path} is not a CBS curve CSV")
    out = []
    for line in lines[1:]:
        tokens, k_star, lower, upper, point, censored = line.split(",")
        is_censored = censored == "true"
        out.append(
            CbsMeasurement(
                checkpoint_tokens=int(tokens),
                per_k_loss={},
                k_star=float(k_star),
                lower_bound=float(lower),
                upper_bound=None if is_censored else float(upper),
                point=None if is_censored else float(point),
            )
        )
    return out
