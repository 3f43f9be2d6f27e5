from __future__ import annotations

import math
from typing import Callable, List, Optional, Sequence

import numpy as np
from PIL import Image, ImageEnhance, ImageFilter, ImageOps

from ..api import CropSpec, DatasetError, MaskError, MaskPattern, ViewBatch, ViewPair
from .config import AugmentConfig
from .dataset import ImageDataset
from .util import derive_rng

ColorOp = Callable[[Image.Image], Image.Image]


def sample_crop(
    rng: np.random.Generator, raw_h: int, raw_w: int, cfg: AugmentConfig
) -> CropSpec:
    """
    Random resized crop: rejection-sample an area fraction and a
    log-uniform aspect ratio, falling back to a ratio-clamped center crop
    after ten misses.
    """
    area = raw_h * raw_w
    log_ratio = (math.log(cfg.aspect_ratio[0]), math.log(cfg.aspect_ratio[1]))

    for _ in range(10):
        target_area = area * rng.uniform(*cfg.crop_scale)
        aspect = math.exp(rng.uniform(*log_ratio))

        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))

        if 0 < w <= raw_w and 0 < h <= raw_h:
            top = int(rng.integers(0, raw_h - h + 1))
            left = int(rng.integers(0, raw_w - w + 1))
            return CropSpec(top, left, h, w)

    in_ratio = raw_w / raw_h
    if in_ratio < cfg.aspect_ratio[0]:
        w = raw_w
        h = int(round(w / cfg.aspect_ratio[0]))
    elif in_ratio > cfg.aspect_ratio[1]:
        h = raw_h
        w = int(round(h * cfg.aspect_ratio[1]))
    else:
        w, h = raw_w, raw_h

    return CropSpec((raw_h - h) // 2, (raw_w - w) // 2, h, w)


def resize_crop(image: np.ndarray, crop: CropSpec, size: int) -> np.ndarray:
    """
    Crop ``image`` (already flipped when the crop says so) and resize to
    ``size`` x ``size`` with antialiased bilinear filtering.
    """
    channels = []
    for c in range(image.shape[2]):
        plane = Image.fromarray(np.ascontiguousarray(image[:, :, c], dtype=np.float32))
        resized = plane.resize((size, size), Image.Resampling.BILINEAR, box=crop.as_box())
        channels.append(np.asarray(resized, dtype=np.float64))

    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0)


def to_pil(image: np.ndarray) -> Image.Image:
    """
    8-bit RGB copy of a float image in [0, 1]; photometric ops run on it.
    """
    return Image.fromarray(np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8))


def from_pil(image: Image.Image) -> np.ndarray:
    return np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0


def grayscale(image: Image.Image) -> Image.Image:
    return ImageOps.grayscale(image).convert("RGB")


def adjust_hue(image: Image.Image, shift: float) -> Image.Image:
    """
    Rotate the hue channel by ``shift`` turns, wrapping around.
    """
    h, s, v = image.convert("HSV").split()
    hue = (np.asarray(h, dtype=np.int64) + int(round(shift * 255.0))) % 256
    return Image.merge("HSV", (Image.fromarray(hue.astype(np.uint8)), s, v)).convert("RGB")


def gaussian_blur(image: Image.Image, sigma: float) -> Image.Image:
    return image.filter(ImageFilter.GaussianBlur(radius=sigma))


def solarize(image: Image.Image, threshold: float) -> Image.Image:
    """
    Invert every channel value at or above ``threshold`` (a [0, 1] level).
    """
    return ImageOps.solarize(image, threshold=int(math.ceil(threshold * 255.0)))


def _jitter_ops(rng: np.random.Generator, cfg: AugmentConfig) -> List[ColorOp]:
    b = rng.uniform(max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness)
    c = rng.uniform(max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast)
    s = rng.uniform(max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation)
    h = rng.uniform(-cfg.hue, cfg.hue)

    ops = [
        lambda x: ImageEnhance.Brightness(x).enhance(b),
        lambda x: ImageEnhance.Contrast(x).enhance(c),
        lambda x: ImageEnhance.Color(x).enhance(s),
        lambda x: adjust_hue(x, h),
    ]  # type: List[ColorOp]

    return [ops[k] for k in rng.permutation(len(ops))]


def apply_color(
    rng: np.random.Generator, image: np.ndarray, view_index: int, cfg: AugmentConfig
) -> np.ndarray:
    """
    Photometric augmentation of one view: color jitter, grayscale,
    Gaussian blur and solarization, each with its own probability. Blur and
    solarize probabilities depend on which view (0 or 1) is being built.

    The ops work on an 8-bit copy, so an augmented view is quantized to
    multiples of 1/255. With color augmentation disabled the input is
    returned untouched.
    """
    if not cfg.use_color_aug:
        return image

    out = to_pil(image)

    if rng.random() < cfg.jitter_prob:
        for op in _jitter_ops(rng, cfg):
            out = op(out)

    if rng.random() < cfg.grayscale_prob:
        out = grayscale(out)

    if rng.random() < cfg.blur_prob[view_index]:
        out = gaussian_blur(out, rng.uniform(*cfg.blur_sigma))

    if rng.random() < cfg.solarize_prob[view_index]:
        out = solarize(out, cfg.solarize_threshold)

    return from_pil(out)


def sample_mask(rng: np.random.Generator, n: int, mask_ratio: float) -> MaskPattern:
    if n < 1:
        raise MaskError(f"Cannot mask an empty token grid (N={n})")

    visible = int(math.floor((1.0 - mask_ratio) * n + 0.5))
    if visible < 1:
        raise MaskError(f"Mask ratio {mask_ratio} leaves no visible token out of {n}")

    chosen = np.sort(rng.permutation(n)[:visible])
    return MaskPattern(tuple(int(i) for i in chosen), n)


def normalize(image: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (image - mean) / std


def make_view_pair(
    rng: np.random.Generator,
    raw_image: np.ndarray,
    cfg: AugmentConfig,
    same_view: bool,
    image_size: int,
    num_tokens: int,
    mean: Optional[np.ndarray] = None,
    std: Optional[np.ndarray] = None,
) -> ViewPair:
    """
    Build the two views of one raw image. A single horizontal flip is
    drawn first and applied to the raw image, so both crops share one
    coordinate frame. With ``same_view`` both branches see one crop and one
    color-augmented copy.
    """
    raw_h, raw_w = raw_image.shape[:2]

    flipped = bool(rng.random() < cfg.flip_prob)
    source = raw_image[:, ::-1] if flipped else raw_image

    crop_a = sample_crop(rng, raw_h, raw_w, cfg)
    crop_a = CropSpec(crop_a.top, crop_a.left, crop_a.height, crop_a.width, flipped)
    image_a = apply_color(rng, resize_crop(source, crop_a, image_size), 0, cfg)

    if same_view:
        crop_b = crop_a
        image_b = image_a
    else:
        crop_b = sample_crop(rng, raw_h, raw_w, cfg)
        crop_b = CropSpec(crop_b.top, crop_b.left, crop_b.height, crop_b.width, flipped)
        image_b = apply_color(rng, resize_crop(source, crop_b, image_size), 1, cfg)

    if mean is not None and std is not None:
        image_a = normalize(image_a, mean, std)
        image_b = normalize(image_b, mean, std)

    mask = sample_mask(rng, num_tokens, cfg.mask_ratio)

    return ViewPair(image_a, np.array(image_b, copy=True), crop_a, crop_b, mask)


def build_view_batch(
    dataset: ImageDataset,
    indices: Sequence[int],
    cfg: AugmentConfig,
    same_view: bool,
    image_size: int,
    num_tokens: int,
    seed: int,
    epoch: int,
    batch_index: int,
) -> ViewBatch:
    """
    Augment one batch. Sample k of the batch draws from the generator
    (seed, epoch, batch_index, k), so the result does not depend on which
    worker builds it.
    """
    pairs = []
    for k, index in enumerate(indices):
        raw = dataset.load(int(index))
        if raw.ndim != 3 or raw.shape[2] != 3:
            raise DatasetError(f"Sample {dataset.name(int(index))} is not an RGB image")

        pairs.append(
            make_view_pair(
                derive_rng(seed, epoch, batch_index, k),
                raw,
                cfg,
                same_view,
                image_size,
                num_tokens,
                dataset.mean,
                dataset.std,
            )
        )

    return ViewBatch(
        images_a=np.stack([p.image_a for p in pairs]),
        images_b=np.stack([p.image_b for p in pairs]),
        crops_a=tuple(p.crop_a for p in pairs),
        crops_b=tuple(p.crop_b for p in pairs),
        visible=np.stack([p.mask.as_array() for p in pairs]),
        shared_crop=same_view,
    )


def prepare_eval_image(
    raw_image: np.ndarray, image_size: int, mean: np.ndarray, std: np.ndarray
) -> np.ndarray:
    """
    Full-image resize and normalization, no random augmentation.
    """
    raw_h, raw_w = raw_image.shape[:2]
    full = resize_crop(raw_image, CropSpec(0, 0, raw_h, raw_w), image_size)
    return normalize(full, mean, std)
