"""Deterministic training loop with token accounting and resumable checkpoints.

All arithmetic is 64-bit with a fixed evaluation order, so saving a checkpoint
and resuming reproduces the uninterrupted run bit for bit. Optimizer moments
are carried across batch-size changes unmodified; the loss bump that follows a
batch-size switch is real signal and must not be suppressed here.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .csvio import write_csv
from .errors import CheckpointParseError, NumericFault, UnsupportedFormat
from .optim import (
    AdamHyper,
    LrSchedule,
    OptimizerState,
    lr_at,
    optimizer_step,
    scaling_factor,
)
from .rng import RngStream
from .tasks import TaskSpec

FORMAT_VERSION = 1
_MAGIC = b"CBSL"

RUN_LOG_HEADER = ["tokens", "step", "batch_size", "lr", "raw_loss", "smoothed_loss"]


# ---------------------------------------------------------------------------
# Batch schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    start_token: int
    batch_size: int
    lr_multiplier: float


@dataclass(frozen=True)
class BatchSchedule:
    """Piecewise-constant batch size and lr multiplier overlaying a base schedule.

    ``reference_batch`` is the batch size the multipliers are expressed
    against. For planner-built schedules it is the first segment's batch; for
    branched runs it is the parent run's batch, which may differ from the
    branch's own.
    """

    segments: tuple[Segment, ...]
    reference_batch: int | None = None

    def __post_init__(self):
        if not self.segments:
            raise ValueError("schedule needs at least one segment")
        segments = tuple(
            s if isinstance(s, Segment) else Segment(*s) for s in self.segments
        )
        object.__setattr__(self, "segments", segments)
        if segments[0].start_token != 0:
            raise ValueError("first segment must start at token 0")
        starts = [s.start_token for s in segments]
        if any(b >= a for a, b in zip(starts[1:], starts[:-1])):
            raise ValueError("segment start tokens must be strictly increasing")
        for s in segments:
            if s.batch_size < 1:
                raise ValueError("batch sizes must be positive")
            if s.lr_multiplier <= 0:
                raise ValueError("lr multipliers must be positive")
        if self.reference_batch is None:
            object.__setattr__(self, "reference_batch", segments[0].batch_size)

    @classmethod
    def single(cls, batch_size: int, lr_multiplier: float = 1.0, reference_batch: int | None = None):
        return cls((Segment(0, batch_size, lr_multiplier),), reference_batch)

    def active_index(self, tokens: int) -> int:
        idx = 0
        for i, seg in enumerate(self.segments):
            if seg.start_token <= tokens:
                idx = i
            else:
                break
        return idx

    def check_rule(self, rule: str, rel_tol: float = 1e-9) -> None:
        """Verify each multiplier matches the scaling rule against reference_batch."""
        for seg in self.segments:
            expected = scaling_factor(rule, seg.batch_size / self.reference_batch)
            if not math.isclose(seg.lr_multiplier, expected, rel_tol=rel_tol):
                raise ValueError(
                    f"segment at {seg.start_token} has multiplier {seg.lr_multiplier}, "
                    f"expected {expected} for batch {seg.batch_size} under {rule} rule"
                )


# ---------------------------------------------------------------------------
# Run log
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    tokens: int  # tokens consumed before this step was taken
    step: int
    batch_size: int
    lr: float
    raw_loss: float
    smoothed_loss: float


@dataclass
class RunLog:
    records: list[RunRecord] = field(default_factory=list)

    def append(self, record: RunRecord) -> None:
        self.records.append(record)

    @property
    def raw_losses(self) -> list[float]:
        return [r.raw_loss for r in self.records]

    @property
    def final_smoothed(self) -> float:
        if not self.records:
            raise ValueError("empty run log")
        return self.records[-1].smoothed_loss

    def write_csv(self, path) -> Path:
        rows = [
            (r.tokens, r.step, r.batch_size, r.lr, r.raw_loss, r.smoothed_loss)
            for r in self.records
        ]
        return write_csv(path, RUN_LOG_HEADER, rows)

    @classmethod
    def read_csv(cls, path) -> "RunLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != ",".join(RUN_LOG_HEADER):
            raise ValueError(f"{path} is not a run log CSV")
        log = cls()
        for line in lines[1:]:
            tokens, step, batch, lr, raw, smoothed = line.split(",")
            log.append(
                RunRecord(int(tokens), int(step), int(batch), float(lr), float(raw), float(smoothed))
            )
        return log


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Checkpoint:
    params: np.ndarray
    optimizer: OptimizerState
    rng: RngStream
    tokens_seen: int
    schedule_cursor: int
    smoothed_loss: float  # NaN until the first step has been smoothed
    task_fingerprint: bytes
    format_version: int = FORMAT_VERSION

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            params=self.params.copy(),
            optimizer=self.optimizer.copy(),
            rng=self.rng.clone(),
            tokens_seen=self.tokens_seen,
            schedule_cursor=self.schedule_cursor,
            smoothed_loss=self.smoothed_loss,
            task_fingerprint=self.task_fingerprint,
            format_version=self.format_version,
        )


def initial_checkpoint(
    task: TaskSpec,
    seed: int,
    optimizer_kind: str = "adam",
    hyper: AdamHyper | None = None,
) -> Checkpoint:
    """Fresh start: parameters from the task's init distribution, zero moments.

    The seed's root stream is split into an ``init`` child (parameter draw)
    and a ``train`` child (everything the run consumes afterwards).
    """
    root = RngStream.from_seed(seed)
    params = task.init_params(root.child("init"))
    if optimizer_kind == "sgd":
        opt = OptimizerState.sgd()
    elif optimizer_kind == "adam":
        opt = OptimizerState.adam(task.param_dim, hyper)
    else:
        raise ValueError(f"unknown optimizer kind {optimizer_kind!r}")
    return Checkpoint(
        params=params,
        optimizer=opt,
        rng=root.child("train"),
        tokens_seen=0,
        schedule_cursor=0,
        smoothed_loss=math.nan,
        task_fingerprint=task.fingerprint(),
    )


# ---------------------------------------------------------------------------
# EMA smoothing
# ---------------------------------------------------------------------------


def ema_smooth(series, alpha: float) -> list[float]:
    """Exponential moving average, initialized at the first value."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    values = list(series)
    if not values:
        raise ValueError("series must be nonempty")
    out = [float(values[0])]
    for x in values[1:]:
        out.append(alpha * float(x) + (1.0 - alpha) * out[-1])
    return out


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train(
    task: TaskSpec,
    init: Checkpoint,
    schedule: BatchSchedule,
    lr_schedule: LrSchedule,
    rule: str | None,
    token_budget: int,
    ema_alpha: float = 0.5,
) -> tuple[RunLog, Checkpoint]:
    """Advance ``init`` until at least ``token_budget`` more tokens are consumed.

    Each step draws a batch of the active segment's size, applies
    ``lr_multiplier * lr_at(lr_schedule, tokens_before_step)``, and logs one
    record. ``init`` itself is never mutated. If ``rule`` is given, the
    schedule's multipliers are checked against it before any compute. A
    non-finite loss, gradient, or parameter aborts with :class:`NumericFault`
    carrying the partial :class:`RunLog`.
    """
    if token_budget <= 0:
        raise ValueError("token_budget must be > 0")
    if not 0.0 < ema_alpha <= 1.0:
        raise ValueError(f"ema_alpha must lie in (0, 1], got {ema_alpha}")
    if rule is not None:
        schedule.check_rule(rule)
    if init.task_fingerprint != task.fingerprint():
        raise ValueError("checkpoint was produced by a different task configuration")
    if init.params.shape != (task.param_dim,):
        raise ValueError(
            f"checkpoint has {init.params.shape[0]} parameters, task needs {task.param_dim}"
        )

    params = init.params.copy()
    opt = init.optimizer.copy()
    rng = init.rng.clone()
    tokens = init.tokens_seen
    smoothed = init.smoothed_loss
    end = init.tokens_seen + token_budget
    log = RunLog()
    tokens_per_example = task.tokens_per_example

    # Divergence is detected by explicit finiteness checks; numpy's overflow
    # warnings on the way to inf are redundant here.
    with np.errstate(over="ignore", invalid="ignore"):
        while tokens < end:
            cursor = schedule.active_index(tokens)
            seg = schedule.segments[cursor]
            lr = seg.lr_multiplier * lr_at(lr_schedule, tokens)
            batch = task.sample_batch(rng, seg.batch_size)
            loss, grad = task.loss_and_grad(params, batch)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise NumericFault(
                    f"non-finite loss/gradient at tokens={tokens}, step={opt.step_count + 1}",
                    run_log=log,
                )
            smoothed = (
                loss if math.isnan(smoothed) else ema_alpha * loss + (1.0 - ema_alpha) * smoothed
            )
            opt, params = optimizer_step(opt, params, grad, lr)
            if not np.all(np.isfinite(params)):
                raise NumericFault(
                    f"non-finite parameters after step {opt.step_count} at tokens={tokens}",
                    run_log=log,
                )
            log.append(RunRecord(tokens, opt.step_count, seg.batch_size, lr, loss, smoothed))
            tokens += seg.batch_size * tokens_per_example

    final = Checkpoint(
        params=params,
        optimizer=opt,
        rng=rng,
        tokens_seen=tokens,
        schedule_cursor=schedule.active_index(tokens),
        smoothed_loss=smoothed,
        task_fingerprint=init.task_fingerprint,
        format_version=init.format_version,
    )
    return log, final


# ---------------------------------------------------------------------------
# Checkpoint serialization (versioned binary, little-endian float64 payload)
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIQ16s")  # magic, version, dimension, task fingerprint
_OPT = struct.Struct("<BQddd")  # kind flag, step_count, beta1, beta2, eps
_COUNTERS = struct.Struct("<QIdI")  # tokens_seen, cursor, smoothed_loss, rng blob length

_OPT_KIND_TO_FLAG = {"sgd": 0, "adam": 1}
_FLAG_TO_OPT_KIND = {v: k for k, v in _OPT_KIND_TO_FLAG.items()}


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    dim = ckpt.params.shape[0]
    hyper = ckpt.optimizer.hyper or AdamHyper()
    parts = [
        _HEADER.pack(_MAGIC, ckpt.format_version, dim, ckpt.task_fingerprint),
        _OPT.pack(
            _OPT_KIND_TO_FLAG[ckpt.optimizer.kind],
            ckpt.optimizer.step_count,
            hyper.beta1,
            hyper.beta2,
            hyper.eps,
        ),
    ]
    rng_blob = ckpt.rng.state_bytes()
    parts.append(_COUNTERS.pack(ckpt.tokens_seen, ckpt.schedule_cursor, ckpt.smoothed_loss, len(rng_blob)))
    parts.append(rng_blob)
    parts.append(np.ascontiguousarray(ckpt.params, dtype="<f8").tobytes())
    if ckpt.optimizer.kind == "adam":
        parts.append(np.ascontiguousarray(ckpt.optimizer.first_moment, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(ckpt.optimizer.second_moment, dtype="<f8").tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    offset = 0

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise CheckpointParseError(
                f"truncated checkpoint: wanted {n} bytes, {len(data) - offset} left", offset
            )
        chunk = data[offset : offset + n]
        offset += n
        return chunk

    magic, version, dim, fingerprint = _HEADER.unpack(take(_HEADER.size))
    if magic != _MAGIC:
        raise CheckpointParseError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise UnsupportedFormat(f"checkpoint format_version {version}, supported: {FORMAT_VERSION}")
    kind_flag, step_count, beta1, beta2, eps = _OPT.unpack(take(_OPT.size))
    if kind_flag not in _FLAG_TO_OPT_KIND:
        raise CheckpointParseError(f"unknown optimizer flag {kind_flag}", offset - _OPT.size)
    kind = _FLAG_TO_OPT_KIND[kind_flag]
    tokens_seen, cursor, smoothed, rng_len = _COUNTERS.unpack(take(_COUNTERS.size))
    rng_blob = take(rng_len)
    try:
        rng = RngStream.from_state_bytes(rng_blob)
    except ValueError as exc:
        raise CheckpointParseError(f"bad rng state: {exc}", offset - rng_len) from exc
    params = np.frombuffer(take(8 * dim), dtype="<f8").copy()
    if kind == "adam":
        first = np.frombuffer(take(8 * dim), dtype="<f8").copy()
        second = np.frombuffer(take(8 * dim), dtype="<f8").copy()
        opt = OptimizerState(
            kind="adam",
            step_count=step_count,
            first_moment=first,
            second_moment=second,
            hyper=AdamHyper(beta1, beta2, eps),
        )
    else:
        opt = OptimizerState(kind="sgd", step_count=step_count)
    (stored_crc,) = struct.unpack("<I", take(4))
    if offset != len(data):
        raise CheckpointParseError(f"{len(data) - offset} trailing bytes", offset)
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CheckpointParseError("crc mismatch, file is corrupt", len(data) - 4)
    return Checkpoint(
        params=params,
        optimizer=opt,
        rng=rng,
        tokens_seen=tokens_seen,
        schedule_cursor=cursor,
        smoothed_loss=smoothed,
        task_fingerprint=fingerprint,
        format_version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
