from __future__ import annotations

import numpy as np
import pytest

from desk_sim.api import CropSpec, MaskError
from desk_sim.main.augment import (
    adjust_hue,
    apply_color,
    build_view_batch,
    from_pil,
    gaussian_blur,
    grayscale,
    make_view_pair,
    prepare_eval_image,
    resize_crop,
    sample_crop,
    sample_mask,
    to_pil,
)
from desk_sim.main.config import AugmentConfig
from desk_sim.main.util import derive_rng

NO_JITTER_OR_BLUR = dict(jitter_prob=0.0, grayscale_prob=0.0, blur_prob=(0.0, 0.0))

# one 8-bit level
QUANTUM = 1.0 / 255.0 + 1e-9


def test_forced_full_crop(rng):
    cfg = AugmentConfig(crop_scale=(1.0, 1.0), aspect_ratio=(1.0, 1.0))
    assert sample_crop(rng, 224, 224, cfg) == CropSpec(0, 0, 224, 224)


def test_crop_area_within_range(rng):
    cfg = AugmentConfig()
    for _ in range(10000):
        crop = sample_crop(rng, 224, 224, cfg)
        assert crop.top >= 0 and crop.left >= 0
        assert crop.top + crop.height <= 224 and crop.left + crop.width <= 224
        # rounding the extents may shave a little area off the requested fraction
        assert 0.2 - 0.01 <= crop.height * crop.width / 224**2 <= 1.0


def test_unsatisfiable_crop_falls_back_to_center(rng):
    cfg = AugmentConfig(crop_scale=(0.9999, 1.0), aspect_ratio=(4 / 3, 4 / 3))
    assert sample_crop(rng, 8, 8, cfg) == CropSpec(1, 0, 6, 8)


def test_resize_full_crop_keeps_constant_image():
    image = np.full((16, 16, 3), 0.25)
    out = resize_crop(image, CropSpec(0, 0, 16, 16), 8)
    assert out.shape == (8, 8, 3)
    np.testing.assert_allclose(out, 0.25, atol=1e-6)


def test_color_disabled_is_bit_exact(rng):
    image = rng.uniform(size=(8, 8, 3))
    out = apply_color(rng, image, 0, AugmentConfig(use_color_aug=False))
    np.testing.assert_array_equal(out, image)


def test_forced_grayscale_equalizes_channels(rng):
    cfg = AugmentConfig(jitter_prob=0.0, grayscale_prob=1.0, blur_prob=(0.0, 0.0))
    out = apply_color(rng, rng.uniform(size=(8, 8, 3)), 0, cfg)
    np.testing.assert_allclose(out[..., 0], out[..., 1])
    np.testing.assert_allclose(out[..., 1], out[..., 2])


def test_grayscale_uses_luma_weights():
    pixel = to_pil(np.array([[[1.0, 0.0, 0.0]]]))
    np.testing.assert_allclose(from_pil(grayscale(pixel)), [[[0.299, 0.299, 0.299]]], atol=QUANTUM)


def test_solarize_inverts_bright_pixels(rng):
    cfg = AugmentConfig(**NO_JITTER_OR_BLUR, solarize_prob=(1.0, 1.0), solarize_threshold=0.5)
    image = np.full((4, 4, 3), 0.8)
    image[0, 0] = 0.3

    out = apply_color(rng, image, 1, cfg)

    assert out[1, 1, 0] == pytest.approx(0.2, abs=QUANTUM)
    assert out[0, 0, 0] == pytest.approx(0.3, abs=QUANTUM)


def test_color_output_stays_in_unit_range(rng):
    cfg = AugmentConfig(jitter_prob=1.0, blur_prob=(1.0, 1.0), solarize_prob=(1.0, 1.0))
    for view in (0, 1):
        out = apply_color(rng, rng.uniform(size=(16, 16, 3)), view, cfg)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_color_output_is_quantized(rng):
    out = apply_color(rng, rng.uniform(size=(8, 8, 3)), 0, AugmentConfig(**NO_JITTER_OR_BLUR))
    np.testing.assert_allclose(out * 255.0, np.round(out * 255.0), atol=1e-9)


def test_pil_conversion_keeps_8bit_levels():
    image = np.arange(48, dtype=np.float64).reshape(4, 4, 3) / 255.0
    np.testing.assert_allclose(from_pil(to_pil(image)), image, atol=1e-12)


def test_half_turn_hue_maps_red_to_cyan():
    red = to_pil(np.tile([1.0, 0.0, 0.0], (2, 2, 1)))

    out = from_pil(adjust_hue(red, 0.5))

    assert np.all(out[..., 0] < 0.05)
    assert np.all(out[..., 1] > 0.95) and np.all(out[..., 2] > 0.95)


def test_zero_hue_shift_keeps_gray():
    gray = to_pil(np.full((3, 3, 3), 0.4))
    np.testing.assert_allclose(from_pil(adjust_hue(gray, 0.0)), 0.4, atol=QUANTUM)


def test_blur_keeps_constant_image():
    image = to_pil(np.full((9, 9, 3), 0.6))
    np.testing.assert_allclose(from_pil(gaussian_blur(image, 1.5)), 0.6, atol=QUANTUM)


def test_blur_smooths_noise(rng):
    noise = to_pil(rng.uniform(size=(32, 32, 3)))
    assert from_pil(gaussian_blur(noise, 2.0)).std() < 0.5 * from_pil(noise).std()


def test_mask_counts():
    assert sample_mask(np.random.default_rng(0), 196, 0.75).visible_count == 49
    assert sample_mask(np.random.default_rng(0), 4, 0.5).visible_count == 2


def test_mask_exact_on_every_draw(rng):
    for _ in range(200):
        mask = sample_mask(rng, 196, 0.75)
        assert mask.visible_count == 49
        assert list(mask.visible_indices) == sorted(set(mask.visible_indices))


def test_mask_without_visible_tokens_rejected(rng):
    with pytest.raises(MaskError):
        sample_mask(rng, 1, 0.9)
    with pytest.raises(MaskError):
        sample_mask(rng, 0, 0.5)


def test_mask_uniform_visibility(rng):
    counts = np.zeros(16)
    for _ in range(10000):
        counts[sample_mask(rng, 16, 0.75).as_array()] += 1

    np.testing.assert_allclose(counts / 10000, 0.25, atol=0.02)


def test_views_share_flip(rng):
    raw = rng.uniform(size=(24, 24, 3))
    for seed in range(40):
        pair = make_view_pair(derive_rng(seed), raw, AugmentConfig(), False, 8, 16)
        assert pair.crop_a.flipped == pair.crop_b.flipped


def test_same_view_shares_crop_and_pixels(rng):
    raw = rng.uniform(size=(24, 24, 3))
    pair = make_view_pair(rng, raw, AugmentConfig(), True, 8, 16)

    assert pair.crop_a == pair.crop_b
    np.testing.assert_array_equal(pair.image_a, pair.image_b)
    assert pair.mask.visible_count == 4


def test_view_pair_is_deterministic(rng):
    raw = rng.uniform(size=(24, 24, 3))

    first = make_view_pair(derive_rng(7, 1), raw, AugmentConfig(), False, 8, 16)
    second = make_view_pair(derive_rng(7, 1), raw, AugmentConfig(), False, 8, 16)

    assert first.crop_a == second.crop_a and first.crop_b == second.crop_b
    np.testing.assert_array_equal(first.image_a, second.image_a)
    np.testing.assert_array_equal(first.image_b, second.image_b)
    assert first.mask == second.mask


def test_mask_count_on_full_size_grid(rng):
    raw = rng.uniform(size=(32, 32, 3))
    pair = make_view_pair(rng, raw, AugmentConfig(use_color_aug=False), False, 28, 196)
    assert pair.mask.visible_count == 49


def test_normalization_applied_last(rng):
    raw = rng.uniform(size=(16, 16, 3))
    cfg = AugmentConfig(use_color_aug=False)
    mean, std = np.array([0.5, 0.4, 0.3]), np.array([0.2, 0.25, 0.5])

    plain = make_view_pair(derive_rng(3), raw, cfg, False, 8, 16)
    normed = make_view_pair(derive_rng(3), raw, cfg, False, 8, 16, mean, std)

    np.testing.assert_allclose(normed.image_a, (plain.image_a - mean) / std)


def test_batch_is_reproducible(shapes_dataset):
    cfg = AugmentConfig()

    first = build_view_batch(shapes_dataset, [3, 1, 4], cfg, False, 8, 16, 5, 2, 1)
    second = build_view_batch(shapes_dataset, [3, 1, 4], cfg, False, 8, 16, 5, 2, 1)
    other = build_view_batch(shapes_dataset, [3, 1, 4], cfg, False, 8, 16, 5, 2, 2)

    assert first.size == 3
    assert first.images_a.shape == (3, 8, 8, 3)
    assert first.visible.shape == (3, 4)
    np.testing.assert_array_equal(first.images_a, second.images_a)
    np.testing.assert_array_equal(first.visible, second.visible)
    assert not np.array_equal(first.images_b, other.images_b)


def test_eval_image_is_plain_resize(shapes_dataset):
    raw = shapes_dataset.load(0)
    out = prepare_eval_image(raw, 16, np.zeros(3), np.ones(3))
    np.testing.assert_allclose(out, raw, atol=1e-5)
