"""Command-line entry point for the full experimental protocol.

Subcommands mirror the pipeline: ``train`` a base run with checkpoints,
``sweep`` its checkpoints into a CBS curve, ``noise`` for the noise-scale
comparison, ``warmup`` for the three-arm batch-size-warmup experiment, and
``analyze`` for growth-curve fits. Everything experiment-shaped comes from the
config file (embedded in the run manifest afterwards); flags cover only
environment-shaped choices. Exit codes: 0 success, 2 validation error,
3 numeric fault.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

from .cbs_meter import measure_cbs_curve, read_curve_csv, write_curve_csv, write_sweep_csv
from .config import ExperimentConfig, load_config, parse_config
from .engine import BatchSchedule, RunLog, initial_checkpoint, load_checkpoint, train
from .errors import (
    CheckpointNotFound,
    CheckpointParseError,
    ConfigError,
    NumericFault,
    RunConflict,
    SingularFit,
    UnsupportedFormat,
)
from .noise_scale import collect_pairs, estimate, write_noise_csv
from .runstore import RunStore
from .scaling_laws import fit_cbs_curve
from .warmup import (
    ARM_NAMES,
    COMPARISON_CSV_HEADER,
    WarmupPlan,
    build_arms,
    comparison_rows,
    run_arm,
    thresholds_from_curve,
)
from .csvio import write_csv

_VALIDATION_ERRORS = (
    ConfigError,
    RunConflict,
    CheckpointNotFound,
    CheckpointParseError,
    UnsupportedFormat,
    SingularFit,
    ValueError,
    OSError,
)


def _store(args) -> RunStore:
    return RunStore(args.out_dir)


def _fresh_run_dir(store: RunStore, run_id: str, force: bool) -> None:
    run_dir = store.run_dir(run_id)
    if run_dir.exists():
        if not force:
            raise RunConflict(f"run directory {run_dir} exists; pass --force to overwrite")
        shutil.rmtree(run_dir)


def _config_from_manifest(store: RunStore, run_id: str) -> ExperimentConfig:
    manifest = store.load_manifest(run_id)
    config = parse_config(manifest.config)
    if config.fingerprint() != manifest.config_fingerprint:
        raise ConfigError(
            f"run {run_id!r}: stored config does not match its fingerprint; manifest corrupt?"
        )
    return config


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    config = load_config(args.config, args.seed)
    task = config.task()
    store = _store(args)
    run_id = config.run_id()
    _fresh_run_dir(store, run_id, args.force)

    manifest = store.register_run(
        run_id=run_id,
        config_fingerprint=config.fingerprint(),
        seed=config.run.seed,
        task_summary={
            "kind": task.kind,
            "param_dim": task.param_dim,
            "tokens_per_example": task.tokens_per_example,
        },
        schedule_summary={
            "batch_size": config.run.batch_size,
            "token_budget": config.run.token_budget,
            "lr_kind": config.lr.kind,
            "base_lr": config.lr.base_lr,
            "optimizer": config.optimizer.kind,
            "scaling_rule": config.scaling_rule,
        },
        config=config.resolved(),
    )

    hyper = config.adam_hyper() if config.optimizer.kind == "adam" else None
    checkpoint = initial_checkpoint(task, config.run.seed, config.optimizer.kind, hyper)
    schedule = BatchSchedule.single(config.run.batch_size)
    lr_schedule = config.lr_schedule()
    positions = sorted(config.run.checkpoint_tokens)
    if positions and positions[0] == 0:
        store.add_checkpoint(manifest, 0, checkpoint)
        positions = positions[1:]

    full_log = RunLog()
    try:
        for target in positions:
            log, checkpoint = train(
                task, checkpoint, schedule, lr_schedule, config.scaling_rule,
                target - checkpoint.tokens_seen, config.run.ema_alpha,
            )
            full_log.records.extend(log.records)
            store.add_checkpoint(manifest, checkpoint.tokens_seen, checkpoint)
        if checkpoint.tokens_seen < config.run.token_budget:
            log, checkpoint = train(
                task, checkpoint, schedule, lr_schedule, config.scaling_rule,
                config.run.token_budget - checkpoint.tokens_seen, config.run.ema_alpha,
            )
            full_log.records.extend(log.records)
            if checkpoint.tokens_seen not in manifest.checkpoints:
                store.add_checkpoint(manifest, checkpoint.tokens_seen, checkpoint)
    except NumericFault as fault:
        if fault.run_log is not None:
            full_log.records.extend(fault.run_log.records)
        full_log.write_csv(store.run_dir(run_id) / "log.csv")
        store.set_status(manifest, "failed")
        raise

    full_log.write_csv(store.run_dir(run_id) / "log.csv")
    store.set_status(manifest, "complete")
    print(run_id)
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _checkpoint_positions(args, store: RunStore, run_id: str) -> list[int]:
    manifest = store.load_manifest(run_id)
    if args.tokens:
        return list(args.tokens)
    return sorted(manifest.checkpoints)


def _sweep_lr_schedule(config: ExperimentConfig, positions: list[int], window: int):
    """Base schedule with enough headroom for branch windows past the last checkpoint."""
    schedule = config.lr_schedule()
    needed = max(positions) + window
    if needed <= schedule.total_tokens:
        return schedule
    if config.lr.kind == "constant" and config.lr.anneal_tokens == 0:
        return config.lr_schedule(total_tokens=needed)
    raise ConfigError(
        f"branch windows reach token {needed} but the {config.lr.kind} schedule ends at "
        f"{schedule.total_tokens}; raise lr_schedule.total_tokens or sweep earlier checkpoints"
    )


def cmd_sweep(args) -> int:
    store = _store(args)
    config = _config_from_manifest(store, args.run_id)
    task = config.task()
    positions = _checkpoint_positions(args, store, args.run_id)
    sweep_config = config.sweep_config()
    measurements, sweeps = measure_cbs_curve(
        store,
        args.run_id,
        task,
        positions,
        sweep_config,
        _sweep_lr_schedule(config, positions, sweep_config.window_tokens),
        per_checkpoint_multipliers=config.sweep.multiplier_overrides,
        n_jobs=args.parallel,
    )
    out = store.results_dir(args.run_id)
    sweep_path = write_sweep_csv(sweeps, out / "sweep.csv")
    curve_path = write_curve_csv(measurements, out / "curve.csv")
    for m in measurements:
        bound = "censored" if m.censored else f"{m.upper_bound:g}"
        print(
            f"tokens={m.checkpoint_tokens} k*={m.k_star:g} "
            f"cbs=[{m.lower_bound:g}, {bound}]"
        )
    print(sweep_path)
    print(curve_path)
    return 0


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------


def cmd_noise(args) -> int:
    store = _store(args)
    config = _config_from_manifest(store, args.run_id)
    task = config.task()
    manifest = store.load_manifest(args.run_id)
    positions = _checkpoint_positions(args, store, args.run_id)
    results = {}
    for tokens in positions:
        checkpoint = load_checkpoint(store.find_checkpoint(manifest, tokens))
        pairs = collect_pairs(
            task,
            checkpoint.params,
            config.noise.b_small,
            config.noise.b_big,
            config.noise.n_pairs,
            checkpoint.rng.child(f"noise tokens={tokens}"),
        )
        est = estimate(pairs)
        results[tokens] = (est, config.noise.b_small, config.noise.b_big)
        print(
            f"tokens={tokens} b_simple={est.b_simple:g} "
            f"ci=[{est.ci_low:g}, {est.ci_high:g}]"
        )
    path = write_noise_csv(results, store.results_dir(args.run_id) / "noise.csv")
    print(path)
    return 0


# ---------------------------------------------------------------------------
# warmup
# ---------------------------------------------------------------------------


def cmd_warmup(args) -> int:
    store = _store(args)
    config = _config_from_manifest(store, args.run_id)
    task = config.task()
    curve_path = Path(args.curve) if args.curve else store.results_dir(args.run_id) / "curve.csv"
    if not curve_path.exists():
        raise ConfigError(
            f"no CBS curve at {curve_path}; run `cbslab sweep {args.run_id}` first or pass --curve"
        )
    curve = read_curve_csv(curve_path)
    thresholds = thresholds_from_curve(
        curve, config.warmup.initial_batch, config.warmup.max_doublings
    )
    plan = WarmupPlan(
        initial_batch=config.warmup.initial_batch,
        initial_base_lr=config.lr.base_lr,
        doubling_thresholds=tuple(thresholds),
        rule=config.scaling_rule,
    )
    out = store.results_dir(args.run_id)
    out.mkdir(parents=True, exist_ok=True)
    plan_payload = {
        "initial_batch": plan.initial_batch,
        "initial_base_lr": plan.initial_base_lr,
        "rule": plan.rule,
        "doubling_thresholds": list(plan.doubling_thresholds),
    }
    plan_path = out / "warmup_plan.json"
    plan_path.write_text(json.dumps(plan_payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    arms = build_arms(
        plan,
        config.warmup.total_tokens,
        config.warmup.anneal_tokens,
        lr_kind=config.lr.kind,
        lr_warmup_tokens=config.lr.warmup_tokens,
    )
    hyper = config.adam_hyper() if config.optimizer.kind == "adam" else None
    outcomes = {}
    for name in ARM_NAMES:
        arm = arms[name]
        arm_run_id = f"{args.run_id}-arm-{name}"
        _fresh_run_dir(store, arm_run_id, args.force)
        manifest = store.register_run(
            run_id=arm_run_id,
            config_fingerprint=config.fingerprint(),
            seed=config.run.seed,
            task_summary={"kind": task.kind, "param_dim": task.param_dim,
                          "tokens_per_example": task.tokens_per_example},
            schedule_summary={
                "arm": name,
                "segments": [
                    [s.start_token, s.batch_size, s.lr_multiplier]
                    for s in arm.batch_schedule.segments
                ],
                "total_tokens": config.warmup.total_tokens,
                "anneal_tokens": config.warmup.anneal_tokens,
            },
            config=config.resolved(),
        )
        init = initial_checkpoint(task, config.run.seed, config.optimizer.kind, hyper)
        try:
            outcome = run_arm(task, init, arm, config.warmup.anneal_tokens, config.run.ema_alpha)
        except NumericFault as fault:
            if fault.run_log is not None:
                fault.run_log.write_csv(store.run_dir(arm_run_id) / "log.csv")
            store.set_status(manifest, "failed")
            raise
        outcome.run_log.write_csv(store.run_dir(arm_run_id) / "log.csv")
        store.add_checkpoint(manifest, outcome.final_checkpoint.tokens_seen, outcome.final_checkpoint)
        store.set_status(manifest, "complete")
        outcomes[name] = outcome
        print(f"{arm_run_id}: steps={outcome.grad_steps} "
              f"pt_loss={outcome.pt_loss:.6f} mt_loss={outcome.mt_loss:.6f}")

    report_path = write_csv(out / "comparison.csv", COMPARISON_CSV_HEADER, comparison_rows(outcomes))
    print(plan_path)
    print(report_path)
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    curve = read_curve_csv(args.curve)
    points = []
    for m in curve:
        value = m.point if args.use_point else m.lower_bound
        if m.checkpoint_tokens <= 0 or value is None:
            continue  # zero-token and censored-point rows cannot enter the fit
        points.append((m.checkpoint_tokens, value))
    model = fit_cbs_curve(points, args.family)
    report = {
        "family": model.family,
        "scale": model.scale,
        "exponent": model.exponent,
        "residual_sum": model.residual_sum,
        "n_points": len(points),
        "value_used": "point" if args.use_point else "lower_bound",
        "horizon_tokens": args.horizon,
        "local_cbs_at_horizon": model.predict(args.horizon),
        "fixed_batch_average": model.average_to(args.horizon),
    }
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    out_dir = Path(args.out_dir) / "results" / "analysis"
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / f"{Path(args.curve).stem}-{args.family}.json"
    out_path.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    print(out_path)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default="cbslab_out", help="experiment store root")
    common.add_argument("--parallel", type=int, default=1, metavar="N",
                        help="max concurrent branches")
    common.add_argument("--force", action="store_true",
                        help="overwrite an existing run directory")

    parser = argparse.ArgumentParser(prog="cbslab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", parents=[common], help="base training run with checkpoints")
    p_train.add_argument("--config", required=True, help="experiment config YAML")
    p_train.add_argument("--seed", type=int, default=None, help="override run.seed")
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", parents=[common], help="branched CBS sweep over checkpoints")
    p_sweep.add_argument("run_id")
    p_sweep.add_argument("tokens", nargs="*", type=int,
                         help="checkpoint token positions (default: all)")
    p_sweep.set_defaults(func=cmd_sweep)

    p_noise = sub.add_parser("noise", parents=[common], help="gradient-noise-scale estimates")
    p_noise.add_argument("run_id")
    p_noise.add_argument("tokens", nargs="*", type=int)
    p_noise.set_defaults(func=cmd_noise)

    p_warm = sub.add_parser("warmup", parents=[common], help="three-arm batch-size-warmup comparison")
    p_warm.add_argument("run_id")
    p_warm.add_argument("--curve", default=None, help="CBS curve CSV (default: the run's)")
    p_warm.set_defaults(func=cmd_warmup)

    p_an = sub.add_parser("analyze", parents=[common], help="fit CBS growth curves")
    p_an.add_argument("--curve", required=True, help="CBS curve CSV")
    p_an.add_argument("--family", choices=("power", "log"), required=True)
    p_an.add_argument("--horizon", type=float, required=True,
                      help="token horizon for the fixed-batch average")
    p_an.add_argument("--use-point", action="store_true",
                      help="fit interval midpoints instead of lower bounds")
    p_an.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericFault as fault:
        print(f"numeric fault: {fault}", file=sys.stderr)
        return 3
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
