from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from conftest import tiny_model_config

from desk_sim.api import ShapeError
from desk_sim.main import gradcheck
from desk_sim.main.config import LossConfig
from desk_sim.main.gradcheck import COMPOSITE_PARAMETERS, composite_grad_check, grad_check
from desk_sim.main.loss import total_loss, unigrad_loss
from desk_sim.main.model import SimModel
from desk_sim.main.tensor import parameter, sum_


def test_linear_function_is_exact(rng):
    result = grad_check(sum_, parameter(rng.normal(size=(3, 4))))
    assert result.passed
    assert result.max_rel_error < 1e-10
    assert result.checked == 12


def test_wrong_gradient_is_reported(rng):
    x = parameter(rng.normal(size=5))

    def fake(t):
        # forward says 3x, but the tape only sees 2x
        return sum_(t * 2.0) + float(np.sum(t.data))

    result = grad_check(fake, x)
    assert not result.passed
    assert result.worst_index is not None


def test_non_scalar_function_rejected(rng):
    with pytest.raises(ShapeError):
        grad_check(lambda t: t * 2.0, parameter(rng.normal(size=3)))


def test_parameter_state_restored(rng):
    x = parameter(rng.normal(size=4))
    before = x.data.copy()

    grad_check(lambda t: sum_(t * t), x, max_entries=2)

    np.testing.assert_array_equal(x.data, before)
    assert x.grad is None and x.requires_grad


def test_unigrad_loss_gradient(rng):
    z = rng.normal(size=(4, 8))
    u = rng.normal(size=(6, 8))

    result = grad_check(
        lambda y: unigrad_loss(y, z, u, lam=1.0), parameter(rng.normal(size=(4, 8))), eps=1e-4
    )
    assert result.max_rel_error < 1e-4


@pytest.mark.parametrize("norm_kind", ["layer-norm", "batch-norm"])
def test_composite_online_path(norm_kind):
    result = composite_grad_check(norm_kind=norm_kind)
    assert result.passed, result
    assert result.max_rel_error < 1e-3
    assert result.parameter in COMPOSITE_PARAMETERS
    assert result.checked == 48 * 4 + 16 + 48


def test_composite_check_covers_every_parameter_group():
    online = SimModel(tiny_model_config()).online_parameters()

    groups = {name.split(".")[0] for name in COMPOSITE_PARAMETERS}
    assert groups == {"encoder", "projector", "decoder", "mask_token", "scale_mixer"}
    assert all(name in online for name in COMPOSITE_PARAMETERS)


def test_composite_check_reports_the_worst_parameter(monkeypatch):
    models = []
    original_predict = SimModel.predict

    def predict(self, batch):
        models.append(self)
        return original_predict(self, batch)

    def corrupted(*args, **kwargs):
        report = total_loss(*args, **kwargs)
        mask = models[-1].mask_token
        # an extra path that only the tape sees
        return replace(report, objective=report.objective + (sum_(mask) - float(np.sum(mask.data))))

    monkeypatch.setattr(SimModel, "predict", predict)
    monkeypatch.setattr(gradcheck, "total_loss", corrupted)

    result = composite_grad_check(parameters=("decoder.blocks.0.mlp.fc1.weight", "mask_token"))

    assert not result.passed
    assert result.parameter == "mask_token"


def test_global_only_objective():
    result = composite_grad_check(loss=LossConfig(alpha_global=1.0, alpha_dense=0.0))
    assert result.passed, result


def test_unknown_parameter_rejected():
    with pytest.raises(ShapeError, match="target_encoder"):
        composite_grad_check(parameters=("target_encoder.patch_embed.weight",))
