from __future__ import annotations

from pathlib import Path
from typing import Callable, Dict, Tuple

import numpy as np

from .dataset import ArrayDataset, compute_channel_stats, write_manifest_dataset
from .log import LOG
from .util import derive_rng

ShapeFn = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


def _circle(dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    return dy**2 + dx**2 <= r**2


def _square(dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)


def _triangle(dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    # apex up, base at dy = r
    return (dy <= 0.8 * r) & (np.abs(dx) <= (dy + r) * 0.55)


def _cross(dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    bar = 0.3 * r
    return ((np.abs(dy) <= bar) & (np.abs(dx) <= r)) | ((np.abs(dx) <= bar) & (np.abs(dy) <= r))


def _ring(dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    d2 = dy**2 + dx**2
    return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)


def _stripes(dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    return inside & (np.floor((dy + r) / (0.4 * r)) % 2 == 0)


SHAPES = {
    0: _circle,
    1: _square,
    2: _triangle,
    3: _cross,
    4: _ring,
    5: _stripes,
}  # type: Dict[int, ShapeFn]


def render_shape(rng: np.random.Generator, kind: int, size: int) -> np.ndarray:
    """
    One size x size uint8 RGB image: a randomly colored, placed and scaled
    shape of the given kind over a noisy background.
    """
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)

    radius = rng.uniform(0.22, 0.36) * size
    cy = rng.uniform(radius, size - radius)
    cx = rng.uniform(radius, size - radius)

    background = rng.uniform(0.0, 0.45, size=3)
    foreground = rng.uniform(0.35, 1.0, size=3)
    foreground[rng.integers(0, 3)] = 1.0

    image = np.broadcast_to(background, (size, size, 3)).copy()
    image += rng.normal(0.0, 0.03, size=image.shape)

    mask = SHAPES[kind](ys - cy, xs - cx, radius)
    image[mask] = foreground

    return (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def synthetic_shapes(
    count: int, classes: int, size: int, seed: int, split: int = 0
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Balanced, shuffled set of shape images whose label is the shape kind.
    ``split`` selects an independent stream so train and test never share
    images.
    """
    rng = derive_rng(seed, split)

    labels = np.arange(count) % classes
    rng.shuffle(labels)

    images = np.stack([render_shape(rng, int(k), size) for k in labels])
    return images, labels


def synthetic_dataset(count: int, classes: int, size: int, seed: int, split: int = 0):
    images, labels = synthetic_shapes(count, classes, size, seed, split)
    return ArrayDataset(images, labels)


def generate_synthetic(
    out_dir: Path, train: int, test: int, classes: int, size: int, seed: int
) -> Tuple[Path, Path]:
    """
    Write ``train/`` and ``test/`` manifest datasets. Both splits carry the
    training split's channel statistics.
    """
    LOG.info(
        "Generating synthetic shapes: %d train, %d test, %d classes, %dpx, seed %d",
        train,
        test,
        classes,
        size,
        seed,
    )

    train_images, train_labels = synthetic_shapes(train, classes, size, seed, split=0)
    test_images, test_labels = synthetic_shapes(test, classes, size, seed, split=1)

    unnormalized = ArrayDataset(train_images, train_labels, np.zeros(3), np.ones(3))
    mean, std = compute_channel_stats(unnormalized)

    train_dir = out_dir / "train"
    test_dir = out_dir / "test"

    write_manifest_dataset(train_dir, train_images, train_labels, mean, std)
    write_manifest_dataset(test_dir, test_images, test_labels, mean, std)

    return train_dir, test_dir
