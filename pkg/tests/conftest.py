import numpy as np
import pytest

from cbslab import BatchSchedule, LrSchedule, QuadraticTask, initial_checkpoint, train


@pytest.fixture
def quad_task():
    return QuadraticTask(dimension=4, hessian_diag=1.0, optimum=0.0, noise_cov_diag=1.0)


@pytest.fixture
def noiseless_quad():
    return QuadraticTask(dimension=4, hessian_diag=1.0, optimum=0.0, noise_cov_diag=0.0)


def run_quad(task, seed=3, batch=8, lr=0.05, steps=50, optimizer="sgd", ema_alpha=0.5):
    """Small deterministic run used by several engine-level tests."""
    ck = initial_checkpoint(task, seed, optimizer)
    schedule = BatchSchedule.single(batch)
    lrs = LrSchedule(kind="constant", base_lr=lr, total_tokens=10**9)
    budget = steps * batch * task.tokens_per_example
    return train(task, ck, schedule, lrs, None, budget, ema_alpha)
