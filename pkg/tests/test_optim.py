from __future__ import annotations

import numpy as np
import pytest

from desk_sim.api import OptimizerError
from desk_sim.main.config import TrainConfig
from desk_sim.main.optim import (
    OptimizerState,
    adamw_step,
    clip_grad_norm,
    effective_lr,
    lr_at,
)
from desk_sim.main.tensor import parameter

BETAS = (0.9, 0.95)


@pytest.mark.parametrize(
    "batch_size, expected", [(256, 1.5e-4), (4096, 2.4e-3), (64, 3.75e-5)]
)
def test_linear_scaling(batch_size, expected):
    cfg = TrainConfig(base_lr=1.5e-4, batch_size=batch_size)
    assert effective_lr(cfg) == pytest.approx(expected)


def test_warmup_then_cosine():
    assert lr_at(0, 10, 110, 1.0) == 0.0
    assert lr_at(5, 10, 110, 1.0) == pytest.approx(0.5)
    assert lr_at(10, 10, 110, 1.0) == pytest.approx(1.0)
    assert lr_at(60, 10, 110, 1.0) == pytest.approx(0.5)
    assert lr_at(110, 10, 110, 1.0) == pytest.approx(0.0, abs=1e-15)
    assert lr_at(500, 10, 110, 1.0) == pytest.approx(0.0, abs=1e-15)


def test_constant_schedule_after_warmup():
    assert lr_at(3, 10, 110, 2.0, "constant") == pytest.approx(0.6)
    assert lr_at(90, 10, 110, 2.0, "constant") == 2.0


def test_zero_gradient_is_fixed_point():
    p = parameter(np.array([[1.0, -2.0], [3.0, 0.5]]))
    p.grad = np.zeros_like(p.data)

    adamw_step({"w": p}, OptimizerState(), 0.1, BETAS, 0.0)

    np.testing.assert_array_equal(p.data, [[1.0, -2.0], [3.0, 0.5]])


def test_first_step_is_bias_corrected():
    p = parameter(np.array([0.5]))
    p.grad = np.array([1.0])
    state = OptimizerState()

    adamw_step({"p": p}, state, 0.1, BETAS, 0.0)

    assert p.data[0] == pytest.approx(0.5 - 0.1 / (1.0 + 1e-8), abs=1e-12)
    assert state.step == 1
    assert state.exp_avg["p"][0] == pytest.approx(0.1)
    assert state.exp_avg_sq["p"][0] == pytest.approx(0.05)


def test_decoupled_decay_shrinks_matrices_only():
    w = parameter(np.full((2, 2), 2.0))
    b = parameter(np.full(2, 2.0))
    for p in (w, b):
        p.grad = np.zeros_like(p.data)

    adamw_step({"w": w, "b": b}, OptimizerState(), 0.1, BETAS, 0.05)

    np.testing.assert_allclose(w.data, 2.0 * (1.0 - 0.1 * 0.05))
    np.testing.assert_array_equal(b.data, 2.0)


def test_parameters_without_gradient_are_skipped():
    p = parameter(np.ones((2, 2)))
    state = OptimizerState()

    adamw_step({"p": p}, state, 0.1, BETAS, 0.05)

    np.testing.assert_array_equal(p.data, 1.0)
    assert "p" not in state.exp_avg


def test_non_finite_gradient_names_parameter():
    p = parameter(np.ones(3))
    p.grad = np.array([1.0, np.nan, 0.0])

    with pytest.raises(OptimizerError, match="decoder.bias"):
        adamw_step({"decoder.bias": p}, OptimizerState(), 0.1, BETAS, 0.0)


def test_clip_grad_norm():
    a, b = parameter(np.zeros(2)), parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])

    total = clip_grad_norm({"a": a, "b": b}, 1.0)

    assert total == pytest.approx(5.0)
    norm = np.sqrt(np.sum(a.grad**2) + np.sum(b.grad**2))
    assert norm == pytest.approx(1.0, rel=1e-5)


def test_state_arrays_restore():
    state = OptimizerState(step=3, exp_avg={"w": np.ones(2)}, exp_avg_sq={"w": np.zeros(2)})

    restored = OptimizerState.from_arrays(3, state.arrays())

    assert restored.step == 3
    np.testing.assert_array_equal(restored.exp_avg["w"], np.ones(2))
    np.testing.assert_array_equal(restored.exp_avg_sq["w"], np.zeros(2))
