from __future__ import annotations

import logging

import numpy as np
import pytest

from conftest import tiny_model_config
from desk_sim.api import ShapeError
from desk_sim.main.augment import build_view_batch
from desk_sim.main.config import AugmentConfig, EmaSchedule, ModelConfig
from desk_sim.main.loss import dense_loss
from desk_sim.main.model import SimModel, ema_momentum, ema_update, patchify
from desk_sim.main.nn import Linear
from desk_sim.main.tensor import Tape, Tensor, no_grad


@pytest.fixture
def batch(shapes_dataset, tiny_model):
    return build_view_batch(
        shapes_dataset, [0, 1, 2], AugmentConfig(), False, 8, tiny_model.num_tokens, 0, 0, 0
    )


def test_token_counts():
    assert ModelConfig(image_size=224, patch_size=16).grid.n == 196
    assert ModelConfig(image_size=32, patch_size=4).grid.n == 64
    assert patchify(np.zeros((1, 32, 32, 3)), 4).shape == (1, 64, 48)


def test_patchify_order(rng):
    images = rng.normal(size=(2, 8, 8, 3))
    patches = patchify(images, 4)

    np.testing.assert_array_equal(patches[1, 1], images[1, 0:4, 4:8].reshape(-1))
    np.testing.assert_array_equal(patches[0, 2], images[0, 4:8, 0:4].reshape(-1))


def test_patchify_rejects_indivisible_image():
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 10, 10, 3)), 4)


def test_zero_image_embeds_to_zero(tiny_model):
    tokens = tiny_model.patch_embed(np.zeros((2, 8, 8, 3)))
    assert tokens.shape == (2, 16, 16)
    np.testing.assert_array_equal(tokens.data, 0.0)


def test_online_shapes(tiny_model, batch):
    y_a = tiny_model.encode_online(tiny_model.patchify(batch.images_a), batch.visible)
    assert y_a.shape == (3, 4, 16)

    y_b = tiny_model.predict(batch)
    assert y_b.shape == (3, 16, 16)

    assert tiny_model.target_features(batch).shape == (3, 16, 16)


def test_unmasked_backbone_sees_every_token(tiny_model, rng):
    patches = tiny_model.patchify(rng.normal(size=(2, 8, 8, 3)))
    every = np.tile(np.arange(16), (2, 1))

    with no_grad():
        masked_path = tiny_model.encoder(patches, every)
        full_path = tiny_model.encoder(patches)

    np.testing.assert_allclose(masked_path.data, full_path.data, atol=1e-12)


def test_decode_rejects_mismatched_positions(tiny_model, rng):
    y_a = Tensor(rng.normal(size=(2, 4, 16)))
    with pytest.raises(ShapeError):
        tiny_model.decode_predict(y_a, np.zeros((2, 5, 16)), Tensor(np.zeros((2, 16, 16))))
    with pytest.raises(ShapeError):
        tiny_model.decode_predict(y_a, np.zeros((2, 4, 16)), Tensor(np.zeros((3, 16, 16))))


@pytest.mark.parametrize("norm_kind", ["layer-norm", "batch-norm"])
def test_target_starts_as_online_copy(norm_kind, rng):
    model = SimModel(tiny_model_config(norm_kind))
    patches = model.patchify(rng.normal(size=(2, 8, 8, 3)))

    with no_grad():
        online = model.projector(model.encoder(patches)).data

    np.testing.assert_allclose(model.encode_target(patches), online, atol=1e-12)


def test_target_receives_no_gradient(tiny_model, batch):
    with Tape() as tape:
        loss = dense_loss(tiny_model.predict(batch), tiny_model.target_features(batch), 1.0)
    tape.backward(loss)

    assert all(p.grad is None for p in tiny_model.target_parameters().values())
    assert tiny_model.mask_token.grad is not None
    assert tiny_model.scale_mixer.weight.grad is not None
    assert tiny_model.encoder.patch_embed.weight.grad is not None


def test_parameter_partition(tiny_model):
    online = tiny_model.online_parameters()
    target = tiny_model.target_parameters()

    assert online.keys().isdisjoint(target.keys())
    assert {k.split(".", 1)[1] for k in target if k.startswith("target_encoder.")} == {
        k.split(".", 1)[1] for k in online if k.startswith("encoder.")
    }


def test_decoder_is_permutation_consistent(tiny_model, rng):
    y_a = rng.normal(size=(2, 4, 16))
    p_a = rng.normal(size=(2, 4, 16))
    p_b = Tensor(rng.normal(size=(2, 16, 16)))
    perm = np.array([2, 0, 3, 1])

    with no_grad():
        straight = tiny_model.decode_predict(Tensor(y_a), p_a, p_b)
        shuffled = tiny_model.decode_predict(Tensor(y_a[:, perm]), p_a[:, perm], p_b)

    np.testing.assert_allclose(straight.data, shuffled.data, atol=1e-10)


def test_token_mixing_off_isolates_mask_rows(tiny_model, rng):
    p_a = rng.normal(size=(1, 4, 16))
    p_b = Tensor(rng.normal(size=(1, 16, 16)))
    tiny_model.decoder.set_token_mixing(False)

    with no_grad():
        first = tiny_model.decode_predict(Tensor(rng.normal(size=(1, 4, 16))), p_a, p_b)
        second = tiny_model.decode_predict(Tensor(rng.normal(size=(1, 4, 16))), p_a, p_b)

    np.testing.assert_allclose(first.data, second.data, atol=1e-12)


def test_backbone_features(tiny_model, rng):
    image = rng.uniform(size=(8, 8, 3))
    shifted = np.roll(image, 2, axis=1)

    features = tiny_model.extract_backbone_features(np.stack([image, image, shifted]))

    assert features.shape == (3, 16)
    np.testing.assert_allclose(features[0], features[1], atol=1e-12)
    assert not np.allclose(features[0], features[2])
    np.testing.assert_array_equal(
        features, tiny_model.extract_backbone_features(np.stack([image, image, shifted]))
    )
    assert tiny_model.training


def test_ema_schedule_endpoints():
    schedule = EmaSchedule(total_steps=1000)

    assert ema_momentum(0, schedule) == pytest.approx(0.99, abs=1e-15)
    assert ema_momentum(1000, schedule) == 1.0
    assert ema_momentum(500, schedule) == pytest.approx(0.995, abs=1e-12)


def test_ema_schedule_uses_run_length():
    assert ema_momentum(50, EmaSchedule(), total_steps=100) == pytest.approx(0.995, abs=1e-12)


def test_ema_schedule_clamps(caplog):
    schedule = EmaSchedule(total_steps=10)
    with caplog.at_level(logging.WARNING):
        assert ema_momentum(25, schedule) == 1.0
        assert ema_momentum(-3, schedule) == pytest.approx(0.99)
    assert "clamping" in caplog.text


def _pair(rng, target_value, online_value):
    online = Linear(3, 2, rng, np.float64)
    target = Linear(3, 2, rng, np.float64)
    for module, value in ((online, online_value), (target, target_value)):
        module.weight.data[...] = value
        module.bias.data[...] = value
    return online, target


def test_ema_update_examples(rng):
    online, target = _pair(rng, 0.0, 2.0)
    ema_update(online, target, 1.0)
    np.testing.assert_array_equal(target.weight.data, 0.0)

    ema_update(online, target, 0.5)
    np.testing.assert_array_equal(target.weight.data, 1.0)

    ema_update(online, target, 0.0)
    np.testing.assert_array_equal(target.bias.data, 2.0)


def test_ema_contracts_geometrically(rng):
    online = Linear(4, 4, rng, np.float64)
    target = Linear(4, 4, rng, np.float64)
    start = np.linalg.norm(target.weight.data - online.weight.data)

    for _ in range(20):
        ema_update(online, target, 0.9)

    distance = np.linalg.norm(target.weight.data - online.weight.data)
    assert distance == pytest.approx(start * 0.9**20, rel=1e-9)


def test_ema_tree_mismatch_rejected(rng):
    with pytest.raises(ShapeError):
        ema_update(Linear(3, 2, rng), Linear(4, 2, rng), 0.5)
    with pytest.raises(ShapeError):
        ema_update(Linear(3, 2, rng), Linear(3, 2, rng, bias=False), 0.5)


def test_update_target_moves_towards_online(tiny_model):
    tiny_model.encoder.patch_embed.weight.data += 1.0

    before = tiny_model.target_encoder.patch_embed.weight.data.copy()
    tiny_model.update_target(0.5)
    after = tiny_model.target_encoder.patch_embed.weight.data

    np.testing.assert_allclose(after, before + 0.5)
