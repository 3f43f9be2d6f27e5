from __future__ import annotations

import abc
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..api import DatasetError
from .log import LOG

MANIFEST_NAME = "manifest.tsv"
MANIFEST_HEADER = "relative_path\tlabel"


class ImageDataset(abc.ABC):
    """
    Labelled RGB images with per-channel normalization statistics. Images
    are returned as H x W x 3 float arrays in [0, 1].
    """

    mean: np.ndarray
    std: np.ndarray

    @abc.abstractmethod
    def __len__(self) -> int:
        pass

    @abc.abstractmethod
    def load(self, index: int) -> np.ndarray:
        pass

    @abc.abstractmethod
    def label(self, index: int) -> int:
        pass

    def name(self, index: int) -> str:
        return f"#{index}"

    def labels(self) -> np.ndarray:
        return np.array([self.label(i) for i in range(len(self))], dtype=np.int64)


class ArrayDataset(ImageDataset):
    def __init__(
        self,
        images: np.ndarray,
        labels: Sequence[int],
        mean: Optional[np.ndarray] = None,
        std: Optional[np.ndarray] = None,
    ):
        if images.ndim != 4 or images.shape[-1] != 3:
            raise DatasetError(f"Expected N x H x W x 3 images, got {images.shape}")
        if len(labels) != images.shape[0]:
            raise DatasetError(f"{images.shape[0]} images but {len(labels)} labels")

        self.images = images
        self._labels = np.asarray(labels, dtype=np.int64)

        if mean is None or std is None:
            mean, std = compute_channel_stats(self)

        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def load(self, index: int) -> np.ndarray:
        image = self.images[index]
        if image.dtype == np.uint8:
            return image.astype(np.float64) / 255.0
        return np.asarray(image, dtype=np.float64)

    def label(self, index: int) -> int:
        return int(self._labels[index])


def _parse_stat(text: str, path: Path) -> np.ndarray:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise DatasetError(f"Malformed statistics line {text!r} in {path}")
    if len(values) != 3:
        raise DatasetError(f"Expected 3 channel statistics in {path}, got {text!r}")
    return np.array(values)


def read_manifest(
    path: Path,
) -> Tuple[List[Tuple[str, int]], Dict[str, np.ndarray]]:
    """
    Parse ``manifest.tsv``: an optional header, ``# mean=`` / ``# std=``
    comment lines carrying channel statistics, then one
    ``relative_path<TAB>label`` row per image.
    """
    rows = []  # type: List[Tuple[str, int]]
    stats = {}  # type: Dict[str, np.ndarray]

    try:
        lines = path.read_text().splitlines()
    except OSError as ex:
        raise DatasetError(f"Cannot read manifest {path}: {ex}")

    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line == MANIFEST_HEADER:
            continue

        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key.strip() in ("mean", "std"):
                stats[key.strip()] = _parse_stat(value, path)
            continue

        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetError(f"{path}:{lineno}: expected 2 tab-separated columns")

        try:
            rows.append((parts[0], int(parts[1])))
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: invalid label {parts[1]!r}")

    return rows, stats


class ManifestDataset(ImageDataset):
    """
    Directory dataset: ``manifest.tsv`` plus binary PPM (P6, 8-bit) images.
    """

    def __init__(self, root: Path, cache: bool = True):
        self.root = Path(root)
        self.rows, stats = read_manifest(self.root / MANIFEST_NAME)
        self._cache = {} if cache else None  # type: Optional[Dict[int, np.ndarray]]

        LOG.info("Loaded manifest with %d images from %s", len(self.rows), self.root)

        if "mean" in stats and "std" in stats:
            self.mean, self.std = stats["mean"], stats["std"]
        else:
            LOG.warning(
                "No normalization statistics in %s, computing them from the images",
                self.root / MANIFEST_NAME,
            )
            self.mean, self.std = compute_channel_stats(self)

    def __len__(self) -> int:
        return len(self.rows)

    def name(self, index: int) -> str:
        return self.rows[index][0]

    def label(self, index: int) -> int:
        return self.rows[index][1]

    def load(self, index: int) -> np.ndarray:
        if self._cache is not None and index in self._cache:
            return self._cache[index]

        path = self.root / self.rows[index][0]

        try:
            with Image.open(path) as img:
                if img.format != "PPM" or img.mode != "RGB":
                    raise DatasetError(
                        f"Sample {self.name(index)} is {img.format}/{img.mode}, "
                        f"expected 8-bit RGB PPM"
                    )
                pixels = np.asarray(img, dtype=np.uint8)
        except (OSError, UnidentifiedImageError) as ex:
            raise DatasetError(f"Cannot decode sample {self.name(index)} ({path}): {ex}")

        image = pixels.astype(np.float64) / 255.0

        if self._cache is not None:
            self._cache[index] = image

        return image


def compute_channel_stats(dataset: ImageDataset) -> Tuple[np.ndarray, np.ndarray]:
    if len(dataset) == 0:
        raise DatasetError("Cannot compute channel statistics of an empty dataset")

    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0

    for i in range(len(dataset)):
        image = dataset.load(i)
        total += image.sum(axis=(0, 1))
        total_sq += (image**2).sum(axis=(0, 1))
        count += image.shape[0] * image.shape[1]

    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean**2, 1e-12))
    return mean, std


def write_manifest_dataset(
    root: Path,
    images: np.ndarray,
    labels: Sequence[int],
    mean: np.ndarray,
    std: np.ndarray,
):
    root.mkdir(parents=True, exist_ok=True)

    lines = [
        MANIFEST_HEADER,
        "# mean=" + ",".join(f"{v:.6f}" for v in mean),
        "# std=" + ",".join(f"{v:.6f}" for v in std),
    ]

    for i, (image, label) in enumerate(zip(images, labels)):
        rel = f"images/{i:06d}.ppm"
        (root / "images").mkdir(exist_ok=True)
        Image.fromarray(np.asarray(image, dtype=np.uint8)).save(root / rel, format="PPM")
        lines.append(f"{rel}\t{int(label)}")

    (root / MANIFEST_NAME).write_text("\n".join(lines) + "\n")

    LOG.info("Wrote %d images to %s", len(lines) - 3, root)
