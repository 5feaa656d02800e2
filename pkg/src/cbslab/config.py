"""Experiment configuration: YAML parsing, strict validation, builders.

Everything experiment-shaped lives in the config file; command-line flags only
cover environment-shaped choices. Unknown keys anywhere are rejected so a typo
cannot silently fall back to a default. The resolved config (defaults filled
in) is what gets fingerprinted and embedded in run manifests.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .cbs_meter import SweepConfig
from .errors import ConfigError
from .optim import SCALING_RULES, SCHEDULE_KINDS, AdamHyper, LrSchedule
from .tasks import MlpTask, QuadraticTask, TaskSpec, TinyLmTask

_REQUIRED = object()


class _Section:
    """Key-by-key consumer of one mapping; leftovers are typos."""

    def __init__(self, name: str, data):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"section {name!r} must be a mapping, got {type(data).__name__}")
        self.name = name
        self.data = dict(data)

    def take(self, key, default=_REQUIRED, cast=None):
        if key in self.data:
            value = self.data.pop(key)
        elif default is _REQUIRED:
            raise ConfigError(f"missing required key {self.name}.{key}")
        else:
            return default
        if value is None and default is not _REQUIRED:
            return default  # explicit null means "use the default"
        if cast is not None:
            try:
                value = cast(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {self.name}.{key}: {exc}") from exc
        return value

    def finish(self):
        if self.data:
            keys = ", ".join(sorted(self.data))
            raise ConfigError(f"unknown key(s) in section {self.name!r}: {keys}")


def _int(value):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"expected an integer, got {value!r}")
    return value


def _float(value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"expected a number, got {value!r}")
    return float(value)


def _int_list(value):
    if not isinstance(value, (list, tuple)):
        raise ValueError(f"expected a list of integers, got {value!r}")
    return tuple(_int(v) for v in value)


def _float_list(value):
    if not isinstance(value, (list, tuple)):
        raise ValueError(f"expected a list of numbers, got {value!r}")
    return tuple(_float(v) for v in value)


def _scalar_or_list(value):
    if isinstance(value, (list, tuple)):
        return [_float(v) for v in value]
    return _float(value)


@dataclass(frozen=True)
class RunSection:
    seed: int
    batch_size: int
    token_budget: int
    checkpoint_tokens: tuple[int, ...]
    ema_alpha: float = 0.5
    name: str | None = None


@dataclass(frozen=True)
class OptimizerSection:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8


@dataclass(frozen=True)
class LrSection:
    base_lr: float
    kind: str = "constant"
    warmup_tokens: int = 0
    anneal_tokens: int = 0
    total_tokens: int | None = None


@dataclass(frozen=True)
class SweepSection:
    multipliers: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0, 8.0)
    window_tokens: int | None = None  # default: 2% of the token budget
    tolerance: float = 0.01
    replicas: int = 1
    multiplier_overrides: dict[int, tuple[float, ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class NoiseSection:
    b_small: int = 1
    b_big: int = 64
    n_pairs: int = 4096


@dataclass(frozen=True)
class WarmupSection:
    initial_batch: int
    anneal_tokens: int
    total_tokens: int
    max_doublings: int = 4


@dataclass
class ExperimentConfig:
    run: RunSection
    task_section: dict
    optimizer: OptimizerSection
    lr: LrSection
    scaling_rule: str
    sweep: SweepSection
    noise: NoiseSection
    warmup: WarmupSection
    _task_cache: TaskSpec | None = None

    # ---- builders -------------------------------------------------------

    def task(self) -> TaskSpec:
        if self._task_cache is None:
            self._task_cache = build_task(self.task_section)
        return self._task_cache

    def adam_hyper(self) -> AdamHyper:
        return AdamHyper(self.optimizer.beta1, self.optimizer.beta2, self.optimizer.eps)

    def lr_schedule(self, total_tokens: int | None = None) -> LrSchedule:
        total = total_tokens or self.lr.total_tokens or self.run.token_budget
        return LrSchedule(
            kind=self.lr.kind,
            base_lr=self.lr.base_lr,
            total_tokens=total,
            warmup_tokens=self.lr.warmup_tokens,
            anneal_tokens=self.lr.anneal_tokens,
        )

    def sweep_config(self) -> SweepConfig:
        window = self.sweep.window_tokens
        if window is None:
            window = max(1, round(0.02 * self.run.token_budget))
        return SweepConfig(
            multipliers=self.sweep.multipliers,
            window_tokens=window,
            base_batch=self.run.batch_size,
            base_lr=self.lr.base_lr,
            rule=self.scaling_rule,
            tolerance=self.sweep.tolerance,
            ema_alpha=self.run.ema_alpha,
            replicas=self.sweep.replicas,
        )

    # ---- identity -------------------------------------------------------

    def resolved(self) -> dict:
        """Plain-dict view with every default filled in; fingerprint input."""
        sweep_overrides = {
            str(tokens): list(ks) for tokens, ks in sorted(self.sweep.multiplier_overrides.items())
        }
        return {
            "run": {
                "seed": self.run.seed,
                "batch_size": self.run.batch_size,
                "token_budget": self.run.token_budget,
                "checkpoint_tokens": list(self.run.checkpoint_tokens),
                "ema_alpha": self.run.ema_alpha,
                "name": self.run.name,
            },
            "task": self.task_section,
            "optimizer": {
                "kind": self.optimizer.kind,
                "beta1": self.optimizer.beta1,
                "beta2": self.optimizer.beta2,
                "eps": self.optimizer.eps,
            },
            "lr_schedule": {
                "kind": self.lr.kind,
                "base_lr": self.lr.base_lr,
                "warmup_tokens": self.lr.warmup_tokens,
                "anneal_tokens": self.lr.anneal_tokens,
                "total_tokens": self.lr.total_tokens or self.run.token_budget,
            },
            "scaling_rule": self.scaling_rule,
            "sweep": {
                "multipliers": list(self.sweep.multipliers),
                "window_tokens": self.sweep_config().window_tokens,
                "tolerance": self.sweep.tolerance,
                "replicas": self.sweep.replicas,
                "multiplier_overrides": sweep_overrides,
            },
            "noise": {
                "b_small": self.noise.b_small,
                "b_big": self.noise.b_big,
                "n_pairs": self.noise.n_pairs,
            },
            "warmup": {
                "initial_batch": self.warmup.initial_batch,
                "anneal_tokens": self.warmup.anneal_tokens,
                "total_tokens": self.warmup.total_tokens,
                "max_doublings": self.warmup.max_doublings,
            },
        }

    def fingerprint(self) -> str:
        canonical = json.dumps(self.resolved(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def run_id(self) -> str:
        if self.run.name:
            return self.run.name
        return f"{self.task_section['kind']}-s{self.run.seed}-{self.fingerprint()[:8]}"


def build_task(section: dict) -> TaskSpec:
    parser = _Section("task", section)
    kind = parser.take("kind", cast=str)
    try:
        if kind == "quadratic":
            task = QuadraticTask(
                dimension=parser.take("dimension", cast=_int),
                hessian_diag=parser.take("hessian_diag", 1.0, cast=_scalar_or_list),
                optimum=parser.take("optimum", 0.0, cast=_scalar_or_list),
                noise_cov_diag=parser.take("noise_cov_diag", 1.0, cast=_scalar_or_list),
                tokens_per_example=parser.take("tokens_per_example", 1, cast=_int),
                init_offset=parser.take("init_offset", 1.0, cast=_float),
            )
        elif kind == "mlp":
            task = MlpTask(
                layer_widths=parser.take("layer_widths", cast=_int_list),
                activation=parser.take("activation", "tanh", cast=str),
                data_seed=parser.take("data_seed", 0, cast=_int),
                input_dim=parser.take("input_dim", 16, cast=_int),
                num_classes=parser.take("num_classes", 10, cast=_int),
                tokens_per_example=parser.take("tokens_per_example", 1, cast=_int),
                dataset_size=parser.take("dataset_size", 2048, cast=_int),
                class_separation=parser.take("class_separation", 3.0, cast=_float),
            )
        elif kind == "tiny_lm":
            task = TinyLmTask(
                vocab_size=parser.take("vocab_size", cast=_int),
                context_len=parser.take("context_len", cast=_int),
                embed_dim=parser.take("embed_dim", cast=_int),
                num_layers=parser.take("num_layers", 1, cast=_int),
                corpus_seed=parser.take("corpus_seed", 0, cast=_int),
                corpus_len=parser.take("corpus_len", 65536, cast=_int),
            )
        else:
            raise ConfigError(f"unknown task kind {kind!r}")
    except ValueError as exc:
        raise ConfigError(f"invalid task: {exc}") from exc
    parser.finish()
    return task


def parse_config(data: dict, seed_override: int | None = None) -> ExperimentConfig:
    top = _Section("config", data)

    run_section = _Section("run", top.take("run"))
    seed = run_section.take("seed", cast=_int)
    run = RunSection(
        seed=seed if seed_override is None else seed_override,
        batch_size=run_section.take("batch_size", cast=_int),
        token_budget=run_section.take("token_budget", cast=_int),
        checkpoint_tokens=run_section.take("checkpoint_tokens", (), cast=_int_list),
        ema_alpha=run_section.take("ema_alpha", 0.5, cast=_float),
        name=run_section.take("name", None, cast=str),
    )
    run_section.finish()

    task_section = top.take("task")
    task = build_task(task_section)  # validates; instance rebuilt lazily later

    opt_section = _Section("optimizer", top.take("optimizer", {}))
    optimizer = OptimizerSection(
        kind=opt_section.take("kind", "adam", cast=str),
        beta1=opt_section.take("beta1", 0.9, cast=_float),
        beta2=opt_section.take("beta2", 0.95, cast=_float),
        eps=opt_section.take("eps", 1e-8, cast=_float),
    )
    opt_section.finish()

    lr_section = _Section("lr_schedule", top.take("lr_schedule"))
    lr = LrSection(
        base_lr=lr_section.take("base_lr", cast=_float),
        kind=lr_section.take("kind", "constant", cast=str),
        warmup_tokens=lr_section.take("warmup_tokens", 0, cast=_int),
        anneal_tokens=lr_section.take("anneal_tokens", 0, cast=_int),
        total_tokens=lr_section.take("total_tokens", None, cast=_int),
    )
    lr_section.finish()

    scaling_rule = top.take("scaling_rule", "sqrt", cast=str)

    sweep_section = _Section("sweep", top.take("sweep", {}))
    overrides_raw = sweep_section.take("multiplier_overrides", {}, cast=dict)
    overrides = {}
    for key, value in overrides_raw.items():
        try:
            overrides[int(key)] = _float_list(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad sweep.multiplier_overrides entry {key!r}: {exc}") from exc
    sweep = SweepSection(
        multipliers=sweep_section.take("multipliers", (0.5, 1.0, 2.0, 4.0, 8.0), cast=_float_list),
        window_tokens=sweep_section.take("window_tokens", None, cast=_int),
        tolerance=sweep_section.take("tolerance", 0.01, cast=_float),
        replicas=sweep_section.take("replicas", 1, cast=_int),
        multiplier_overrides=overrides,
    )
    sweep_section.finish()

    noise_section = _Section("noise", top.take("noise", {}))
    noise = NoiseSection(
        b_small=noise_section.take("b_small", 1, cast=_int),
        b_big=noise_section.take("b_big", 64, cast=_int),
        n_pairs=noise_section.take("n_pairs", 4096, cast=_int),
    )
    noise_section.finish()

    warmup_section = _Section("warmup", top.take("warmup", {}))
    warmup = WarmupSection(
        initial_batch=warmup_section.take("initial_batch", run.batch_size, cast=_int),
        anneal_tokens=warmup_section.take("anneal_tokens", 0, cast=_int),
        total_tokens=warmup_section.take("total_tokens", run.token_budget, cast=_int),
        max_doublings=warmup_section.take("max_doublings", 4, cast=_int),
    )
    warmup_section.finish()
    top.finish()

    config = ExperimentConfig(
        run=run,
        task_section=task_section,
        optimizer=optimizer,
        lr=lr,
        scaling_rule=scaling_rule,
        sweep=sweep,
        noise=noise,
        warmup=warmup,
    )
    _validate(config, task)
    return config


def _validate(config: ExperimentConfig, task: TaskSpec) -> None:
    run = config.run
    if not 0 <= run.seed < 2**64:
        raise ConfigError("run.seed must fit in an unsigned 64-bit integer")
    if run.batch_size < 1 or run.token_budget < 1:
        raise ConfigError("run.batch_size and run.token_budget must be positive")
    if not 0.0 < run.ema_alpha <= 1.0:
        raise ConfigError("run.ema_alpha must lie in (0, 1]")
    if config.optimizer.kind not in ("sgd", "adam"):
        raise ConfigError(f"optimizer.kind must be 'sgd' or 'adam', got {config.optimizer.kind!r}")
    if config.scaling_rule not in SCALING_RULES:
        raise ConfigError(f"scaling_rule must be one of {SCALING_RULES}")
    if config.lr.kind not in SCHEDULE_KINDS:
        raise ConfigError(f"lr_schedule.kind must be one of {SCHEDULE_KINDS}")

    step_tokens = run.batch_size * task.tokens_per_example
    positions = run.checkpoint_tokens
    if list(positions) != sorted(set(positions)):
        raise ConfigError("run.checkpoint_tokens must be sorted and distinct")
    for tokens in positions:
        if tokens < 0 or tokens > run.token_budget:
            raise ConfigError(f"checkpoint position {tokens} outside [0, {run.token_budget}]")
        if tokens % step_tokens != 0:
            raise ConfigError(
                f"checkpoint position {tokens} is not a multiple of one step "
                f"({run.batch_size} examples x {task.tokens_per_example} tokens)"
            )
    try:
        config.adam_hyper()
        config.lr_schedule()
        config.sweep_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for tokens, multipliers in config.sweep.multiplier_overrides.items():
        if tokens not in positions:
            raise ConfigError(
                f"sweep.multiplier_overrides position {tokens} is not a checkpoint position"
            )
        try:
            config.sweep_config().with_multipliers(multipliers)
        except ValueError as exc:
            raise ConfigError(f"bad multipliers for checkpoint {tokens}: {exc}") from exc
    noise = config.noise
    if noise.b_small < 1 or noise.b_big <= noise.b_small:
        raise ConfigError("noise batch sizes must satisfy 1 <= b_small < b_big")
    if noise.n_pairs < 2:
        raise ConfigError("noise.n_pairs must be >= 2")
    warmup = config.warmup
    if warmup.initial_batch < 1:
        raise ConfigError("warmup.initial_batch must be positive")
    if warmup.max_doublings < 0:
        raise ConfigError("warmup.max_doublings must be >= 0")
    if not 0 <= warmup.anneal_tokens < warmup.total_tokens:
        raise ConfigError("warmup.anneal_tokens must lie in [0, warmup.total_tokens)")


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a mapping at top level")
    return parse_config(data, seed_override)
