import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbslab.cbs_meter import (
    SweepConfig,
    branch_sweep,
    cbs_interval,
    detect_kstar,
    measure_cbs_curve,
    measure_checkpoint,
    read_curve_csv,
    realized_branch_batch,
    write_curve_csv,
)
from cbslab.engine import BatchSchedule, ema_smooth, initial_checkpoint, train
from cbslab.optim import LrSchedule
from cbslab.runstore import RunStore
from cbslab.tasks import QuadraticTask
from cbslab.errors import CheckpointNotFound


def sweep_cfg(multipliers=(0.5, 1.0, 2.0, 4.0, 8.0), window=256, batch=8, lr=0.05, **kw):
    return SweepConfig(
        multipliers=multipliers, window_tokens=window, base_batch=batch, base_lr=lr, **kw
    )


def brute_force_kstar(per_k_loss, tolerance):
    """Literal reading of the definition, written independently of detect_kstar."""
    best = None
    for k, loss in per_k_loss.items():
        if math.isinf(loss):
            continue
        qualifies = True
        for other_k, other_loss in per_k_loss.items():
            if other_k < k and not (loss <= other_loss + tolerance):
                qualifies = False
        if qualifies and (best is None or k > best):
            best = k
    return best


# ---------------------------------------------------------------------------
# detect_kstar
# ---------------------------------------------------------------------------


def test_detect_kstar_worked_example():
    losses = {0.5: 2.700, 1.0: 2.702, 2.0: 2.708, 4.0: 2.705, 8.0: 2.750}
    assert detect_kstar(losses, 0.01) == 4.0


def test_detect_kstar_all_equal_returns_max():
    assert detect_kstar({k: 1.0 for k in (1.0, 2.0, 4.0)}, 0.01) == 4.0


def test_detect_kstar_diverged_never_qualifies():
    assert detect_kstar({1.0: 0.5, 2.0: math.inf}, 0.01) == 1.0
    # a diverged smaller multiplier is beaten vacuously by any finite larger one
    assert detect_kstar({1.0: math.inf, 2.0: 0.5}, 0.01) == 2.0


def test_detect_kstar_all_diverged_errors():
    with pytest.raises(ValueError):
        detect_kstar({1.0: math.inf, 2.0: math.inf}, 0.01)
    with pytest.raises(ValueError):
        detect_kstar({}, 0.01)


loss_tables = st.dictionaries(
    st.sampled_from([0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 8.0, 16.0]),
    st.one_of(st.floats(-5.0, 5.0), st.just(math.inf)),
    min_size=1,
    max_size=8,
)


@settings(max_examples=300, deadline=None)
@given(table=loss_tables, tolerance=st.floats(1e-4, 1.0))
def test_detect_kstar_matches_brute_force(table, tolerance):
    expected = brute_force_kstar(table, tolerance)
    if expected is None:
        with pytest.raises(ValueError):
            detect_kstar(table, tolerance)
    else:
        assert detect_kstar(table, tolerance) == expected


@settings(max_examples=200, deadline=None)
@given(table=loss_tables, t1=st.floats(1e-4, 1.0), t2=st.floats(1e-4, 1.0))
def test_detect_kstar_monotone_in_tolerance(table, t1, t2):
    if not any(math.isfinite(v) for v in table.values()):
        return
    lo, hi = sorted((t1, t2))
    assert detect_kstar(table, lo) <= detect_kstar(table, hi)


@settings(max_examples=200, deadline=None)
@given(table=loss_tables, tolerance=st.floats(1e-4, 1.0), shift=st.floats(-10.0, 10.0))
def test_detect_kstar_shift_invariant(table, tolerance, shift):
    if not any(math.isfinite(v) for v in table.values()):
        return
    shifted = {k: v + shift for k, v in table.items()}
    assert detect_kstar(table, tolerance) == detect_kstar(shifted, tolerance)


@settings(max_examples=200, deadline=None)
@given(table=loss_tables, tolerance=st.floats(1e-4, 1.0))
def test_removing_multiplier_above_kstar_never_lowers_it(table, tolerance):
    if not any(math.isfinite(v) for v in table.values()):
        return
    k_star = detect_kstar(table, tolerance)
    for removed in [k for k in table if k > k_star]:
        reduced = {k: v for k, v in table.items() if k != removed}
        assert detect_kstar(reduced, tolerance) >= k_star


# ---------------------------------------------------------------------------
# cbs_interval
# ---------------------------------------------------------------------------


def test_interval_geometric_mean():
    sweep = sweep_cfg(multipliers=(1.0, 2.0, 4.0, 8.0), batch=1024, window=10**6)
    lower, upper, point = cbs_interval(4.0, sweep)
    assert (lower, upper) == (4096.0, 8192.0)
    assert point == pytest.approx(4096.0 * math.sqrt(2.0), rel=1e-15)
    assert point == pytest.approx(5793.0, abs=0.7)


def test_interval_censored_at_top():
    sweep = sweep_cfg(multipliers=(1.0, 2.0), batch=16, window=10**6)
    lower, upper, point = cbs_interval(2.0, sweep)
    assert lower == 32.0 and upper is None and point is None


def test_interval_fractional_multipliers():
    sweep = sweep_cfg(multipliers=(0.25, 0.5, 1.0), batch=1024, window=10**6)
    lower, upper, point = cbs_interval(0.25, sweep)
    assert (lower, upper) == (256.0, 512.0)
    assert point == pytest.approx(362.038, abs=0.01)


def test_interval_requires_swept_multiplier():
    with pytest.raises(ValueError):
        cbs_interval(3.0, sweep_cfg())


# ---------------------------------------------------------------------------
# Branch mechanics
# ---------------------------------------------------------------------------


def test_realized_batch_rounding():
    assert realized_branch_batch(0.3, 10) == 3
    assert realized_branch_batch(0.01, 10) == 1
    assert realized_branch_batch(2.5, 1) == 3  # half rounds up
    assert realized_branch_batch(1.0, 8) == 8


def test_window_must_cover_largest_batch(quad_task):
    ck = initial_checkpoint(quad_task, 1, "sgd")
    sweep = sweep_cfg(multipliers=(1.0, 8.0), window=32, batch=8)
    lrs = LrSchedule(kind="constant", base_lr=0.05, total_tokens=10**6)
    with pytest.raises(ValueError):
        branch_sweep(ck, quad_task, sweep, lrs)


def test_identity_branch_reproduces_continuation(quad_task):
    lrs = LrSchedule(kind="constant", base_lr=0.05, total_tokens=10**6)
    schedule = BatchSchedule.single(8)
    start = initial_checkpoint(quad_task, 5, "adam")
    _, ck = train(quad_task, start, schedule, lrs, None, 400)

    window = 400
    continuation, _ = train(quad_task, ck, schedule, lrs, None, window)
    results = branch_sweep(
        ck, quad_task, sweep_cfg(multipliers=(1.0, 2.0), window=window), lrs, identity_k1=True
    )
    assert results[1.0].run_log.raw_losses == continuation.raw_losses
    # without stream sharing the branch is an independent continuation
    independent = branch_sweep(
        ck, quad_task, sweep_cfg(multipliers=(1.0,), window=window), lrs, identity_k1=False
    )
    assert independent[1.0].run_log.raw_losses != continuation.raw_losses


def test_noiseless_branches_match_closed_form(noiseless_quad):
    # With zero gradient noise SGD contracts each coordinate by (1 - lr*h) per
    # step, so every branch's raw-loss sequence has an explicit formula.
    base_batch, base_lr, window, alpha = 8, 0.05, 512, 0.5
    task = noiseless_quad
    ck = initial_checkpoint(task, 2, "sgd")
    sweep = sweep_cfg(
        multipliers=(0.5, 1.0, 2.0), window=window, batch=base_batch, lr=base_lr,
        rule="linear", ema_alpha=alpha,
    )
    lrs = LrSchedule(kind="constant", base_lr=base_lr, total_tokens=10**6)
    results = branch_sweep(ck, task, sweep, lrs)
    dim = task.dimension
    offset = 1.0  # initial residual per coordinate
    for k, res in results.items():
        batch = realized_branch_batch(k, base_batch)
        lr_k = (batch / base_batch) * base_lr
        steps = math.ceil(window / batch)
        factor = 1.0 - lr_k * 1.0
        raw = [0.5 * dim * (offset * factor ** (j - 1)) ** 2 for j in range(1, steps + 1)]
        assert res.run_log.raw_losses == pytest.approx(raw, rel=1e-9)
        assert res.loss == pytest.approx(ema_smooth(raw, alpha)[-1], rel=1e-9)


def test_unstable_branch_flagged_diverged(noiseless_quad):
    # SGD on a unit-curvature bowl is unstable above lr = 2; k=8 runs at lr 4.
    ck = initial_checkpoint(noiseless_quad, 3, "sgd")
    sweep = sweep_cfg(
        multipliers=(1.0, 2.0, 8.0), window=16384, batch=2, lr=0.5, rule="linear"
    )
    lrs = LrSchedule(kind="constant", base_lr=0.5, total_tokens=10**6)
    results = branch_sweep(ck, noiseless_quad, sweep, lrs)
    assert not results[1.0].diverged
    assert results[8.0].diverged and results[8.0].loss == math.inf
    per_k = {k: r.loss for k, r in results.items()}
    assert detect_kstar(per_k, 0.01) < 8.0


def test_replicas_average_independent_branches(quad_task):
    ck = initial_checkpoint(quad_task, 4, "sgd")
    lrs = LrSchedule(kind="constant", base_lr=0.02, total_tokens=10**6)
    single = branch_sweep(ck, quad_task, sweep_cfg(multipliers=(1.0,), window=256, lr=0.02), lrs)
    triple = branch_sweep(
        ck, quad_task, sweep_cfg(multipliers=(1.0,), window=256, lr=0.02, replicas=3), lrs
    )
    assert triple[1.0].loss != single[1.0].loss
    assert math.isfinite(triple[1.0].loss)


def test_branch_sweep_parallel_matches_serial(quad_task):
    ck = initial_checkpoint(quad_task, 9, "sgd")
    sweep = sweep_cfg(multipliers=(0.5, 1.0, 2.0), window=128, lr=0.02)
    lrs = LrSchedule(kind="constant", base_lr=0.02, total_tokens=10**6)
    serial = branch_sweep(ck, quad_task, sweep, lrs, n_jobs=1)
    parallel = branch_sweep(ck, quad_task, sweep, lrs, n_jobs=3)
    assert {k: r.loss for k, r in serial.items()} == {k: r.loss for k, r in parallel.items()}


# ---------------------------------------------------------------------------
# Curve measurement over a stored run
# ---------------------------------------------------------------------------


def quad_run_store(tmp_path, task, seed=6, batch=8, lr=0.1, positions=(0, 1600, 12800)):
    store = RunStore(tmp_path)
    manifest = store.register_run("base", "fp", seed, {"kind": task.kind}, {})
    schedule = BatchSchedule.single(batch)
    lrs = LrSchedule(kind="constant", base_lr=lr, total_tokens=10**6)
    ck = initial_checkpoint(task, seed, "sgd")
    for target in positions:
        if target > ck.tokens_seen:
            _, ck = train(task, ck, schedule, lrs, None, target - ck.tokens_seen, 0.1)
        store.add_checkpoint(manifest, target, ck)
    return store, lrs


def test_cbs_grows_as_gradient_shrinks(tmp_path):
    # On a noisy quadratic the full gradient shrinks over training while the
    # noise stays fixed, so the measured multiplier threshold must drift up.
    task = QuadraticTask(dimension=8, hessian_diag=1.0, optimum=0.0, noise_cov_diag=1.0)
    store, lrs = quad_run_store(tmp_path, task)
    sweep = sweep_cfg(window=1600, batch=8, lr=0.1, rule="linear", tolerance=0.05,
                      ema_alpha=0.1, replicas=3)
    measurements, sweeps = measure_cbs_curve(
        store, "base", task, [0, 1600, 12800], sweep, lrs
    )
    lowers = [m.lower_bound for m in measurements]
    assert lowers[0] <= lowers[1] <= lowers[2]
    assert lowers[2] > lowers[0]
    assert set(sweeps) == {0, 1600, 12800}


def test_curve_single_checkpoint(tmp_path, quad_task):
    store, lrs = quad_run_store(tmp_path, quad_task, positions=(1600,))
    measurements, _ = measure_cbs_curve(
        store, "base", quad_task, [1600], sweep_cfg(window=256, lr=0.1), lrs
    )
    assert len(measurements) == 1
    assert measurements[0].checkpoint_tokens == 1600


def test_curve_missing_checkpoint_lists_position(tmp_path, quad_task):
    store, lrs = quad_run_store(tmp_path, quad_task, positions=(1600,))
    with pytest.raises(CheckpointNotFound) as info:
        measure_cbs_curve(store, "base", quad_task, [999], sweep_cfg(window=256, lr=0.1), lrs)
    assert info.value.tokens == 999
    assert 1600 in info.value.available


def test_curve_multiplier_overrides(tmp_path, quad_task):
    store, lrs = quad_run_store(tmp_path, quad_task, positions=(0, 1600))
    template = sweep_cfg(multipliers=(1.0, 2.0), window=256, lr=0.1)
    measurements, sweeps = measure_cbs_curve(
        store, "base", quad_task, [0, 1600], template, lrs,
        per_checkpoint_multipliers={0: (0.25, 0.5)},
    )
    assert set(sweeps[0]) == {0.25, 0.5}
    assert set(sweeps[1600]) == {1.0, 2.0}
    assert measurements[0].k_star in (0.25, 0.5)


def test_curve_csv_roundtrip(tmp_path):
    from cbslab.cbs_meter import CbsMeasurement

    measurements = [
        CbsMeasurement(0, {}, 0.5, 4.0, 8.0, math.sqrt(32.0)),
        CbsMeasurement(1600, {}, 8.0, 64.0, None, None),
    ]
    path = write_curve_csv(measurements, tmp_path / "curve.csv")
    back = read_curve_csv(path)
    assert back == measurements
    text = path.read_text()
    assert "censored" in text.splitlines()[0]
    assert ",,," not in text.splitlines()[1]  # uncensored row has all fields
    assert text.splitlines()[2].endswith(",,true")  # censored row stays empty
