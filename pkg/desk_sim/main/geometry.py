from __future__ import annotations

import math
from typing import Sequence, Tuple

import numpy as np

from ..api import CropSpec, GridSpec, ShapeError
from .nn import Linear
from .tensor import Tensor, concat


def grid_positions_a(grid: GridSpec) -> np.ndarray:
    """
    Token positions of the online view in its own token units: token
    (u, v) sits at (u - 1, v - 1), emitted in row-major token order.
    """
    rows, cols = np.meshgrid(
        np.arange(grid.n_h, dtype=np.float64),
        np.arange(grid.n_w, dtype=np.float64),
        indexing="ij",
    )
    return np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1)


def relative_positions_b(crop_a: CropSpec, crop_b: CropSpec, grid: GridSpec) -> np.ndarray:
    """
    Positions of the target view's tokens expressed in the online view's
    token units, measured from the online view's top-left origin.
    """
    scale_h = crop_b.height / crop_a.height
    scale_w = crop_b.width / crop_a.width
    shift_h = (crop_b.top - crop_a.top) / crop_a.height * grid.n_h
    shift_w = (crop_b.left - crop_a.left) / crop_a.width * grid.n_w

    base = grid_positions_a(grid)
    return np.stack(
        [scale_h * base[:, 0] + shift_h, scale_w * base[:, 1] + shift_w], axis=1
    )


def relative_scale(crop_a: CropSpec, crop_b: CropSpec, log_base: float = 10.0) -> np.ndarray:
    log = math.log10 if log_base == 10.0 else (lambda v: math.log(v, log_base))

    return np.array(
        [10.0 * log(crop_b.height / crop_a.height), 10.0 * log(crop_b.width / crop_a.width)]
    )


def sincos_pe(position: np.ndarray, dim: int) -> np.ndarray:
    """
    2-D sine-cosine encoding. ``position`` has a trailing axis of size 2
    (height, width); the result has a trailing axis of size ``dim``: the
    height half then the width half, each laid out as all sines followed by
    all cosines over frequencies 10000^(4k/dim), k < dim/4.
    """
    if dim % 4:
        raise ShapeError(f"sincos_pe: dimension {dim} is not divisible by 4")

    position = np.asarray(position, dtype=np.float64)
    if position.shape[-1] != 2:
        raise ShapeError(f"sincos_pe: positions must end in 2, got {position.shape}")

    quarter = dim // 4
    omega = 10000.0 ** (4.0 * np.arange(quarter, dtype=np.float64) / dim)

    halves = []
    for axis in range(2):
        angles = position[..., axis, None] / omega
        halves.extend([np.sin(angles), np.cos(angles)])

    return np.concatenate(halves, axis=-1)


class ScaleMixer(Linear):
    """
    Learnable map from Concat(PE(relative position), PE(relative scale)),
    2D wide, to the decoder width D.
    """

    def __init__(self, dim: int, rng: np.random.Generator, dtype: np.dtype = np.float32):
        super().__init__(2 * dim, dim, rng, dtype)

    def select_position_half(self):
        """
        Reset to the map that passes PE(position) through unchanged and
        ignores the scale half.
        """
        dim = self.out_dim
        self.weight.data[...] = 0.0
        self.weight.data[:dim, :] = np.eye(dim, dtype=self.weight.dtype)
        if self.bias is not None:
            self.bias.data[...] = 0.0


def decoder_pos_embeds(
    crop_a: CropSpec,
    crop_b: CropSpec,
    grid: GridSpec,
    dim: int,
    scale_mixer: Linear,
    log_base: float = 10.0,
) -> Tuple[np.ndarray, Tensor]:
    """
    Decoder positional embeddings for one crop pair: p_a (N x D, fixed)
    and p_b (N x D, differentiable through ``scale_mixer``).
    """
    p_a, p_b = batch_decoder_pos_embeds([crop_a], [crop_b], grid, dim, scale_mixer, log_base)
    return p_a, p_b[0]


def batch_decoder_pos_embeds(
    crops_a: Sequence[CropSpec],
    crops_b: Sequence[CropSpec],
    grid: GridSpec,
    dim: int,
    scale_mixer: Linear,
    log_base: float = 10.0,
) -> Tuple[np.ndarray, Tensor]:
    if scale_mixer.in_dim != 2 * dim or scale_mixer.out_dim != dim:
        raise ShapeError(
            f"scale mixer maps {scale_mixer.in_dim} -> {scale_mixer.out_dim}, "
            f"expected {2 * dim} -> {dim}"
        )

    dtype = scale_mixer.weight.dtype

    p_a = sincos_pe(grid_positions_a(grid), dim).astype(dtype)

    pos_b = np.stack([relative_positions_b(a, b, grid) for a, b in zip(crops_a, crops_b)])
    scales = np.stack([relative_scale(a, b, log_base) for a, b in zip(crops_a, crops_b)])

    pe_pos = sincos_pe(pos_b, dim).astype(dtype)
    pe_scale = np.broadcast_to(sincos_pe(scales, dim)[:, None, :], pe_pos.shape).astype(dtype)

    mixed_in = concat([Tensor(pe_pos), Tensor(pe_scale)], axis=-1)
    return p_a, scale_mixer(mixed_in)
