"""Desk-scale toolkit for measuring and exploiting the critical batch size."""

from .cbs_meter import (
    BranchResult,
    CbsMeasurement,
    SweepConfig,
    branch_sweep,
    cbs_interval,
    detect_kstar,
    measure_cbs_curve,
)
from .engine import (
    BatchSchedule,
    Checkpoint,
    RunLog,
    Segment,
    ema_smooth,
    initial_checkpoint,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .noise_scale import NoiseSamplePair, NoiseScaleEstimate, collect_pairs, confidence_interval, estimate
from .optim import AdamHyper, LrSchedule, OptimizerState, adam_step, lr_at, scale_lr, sgd_step
from .rng import RngStream
from .runstore import RunManifest, RunStore
from .scaling_laws import (
    CbsCurveModel,
    average_cbs_log,
    average_cbs_numeric,
    average_cbs_power,
    fit_cbs_curve,
    l2_residual,
)
from .tasks import Batch, MlpTask, QuadraticTask, TinyLmTask, analytic_noise_scale, loss_and_grad, sample_batch
from .warmup import WarmupPlan, build_arms, plan_schedule, should_double, thresholds_from_curve

__version__ = "0.1.0"
