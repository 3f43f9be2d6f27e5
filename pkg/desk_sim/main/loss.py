from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from ..api import LossError, LossReport, ShapeError
from .config import LossConfig
from .log import LOG
from .tensor import Tensor, l2_normalize, matmul, mean, sum_

DEFAULT_EPS = 1e-8

# Rows of negatives normalized at a time when building the covariance.
NEGATIVE_CHUNK = 256


def _normalize_rows(x: np.ndarray, eps: float) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, eps)


def _check_rows(x: np.ndarray, label: str, offset: int = 0):
    zero = np.flatnonzero(np.all(x == 0.0, axis=-1))
    if zero.size:
        raise LossError(f"{label} row {offset + int(zero[0])} has zero norm")


def negative_covariance(u: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """
    C = sum_k u_hat_k u_hat_k^T, accumulated over blocks of NEGATIVE_CHUNK
    rows. Working memory is one block plus the D x D result.
    """
    dim = u.shape[1]
    cov = np.zeros((dim, dim), dtype=np.float64)

    for start in range(0, u.shape[0], NEGATIVE_CHUNK):
        block = u[start : start + NEGATIVE_CHUNK]
        _check_rows(block, "negative", start)
        block = _normalize_rows(block.astype(np.float64, copy=False), eps)
        cov += block.T @ block

    return cov


def unigrad_terms(
    y: Tensor, z: np.ndarray, u: np.ndarray, lam: float, eps: float = DEFAULT_EPS
) -> Tuple[Tensor, float, float]:
    """
    Alignment plus squared-cosine uniformity:

        L = mean_i [ -cos(y_i, z_i) + lam/2 * sum_u cos^2(y_i, u) ]

    The negative term is evaluated as y_hat^T C y_hat with the D x D matrix
    C = sum_u u_hat u_hat^T, so its memory does not grow with the number of
    negatives. Returns the differentiable loss and the mean alignment and
    uniformity values.
    """
    if y.ndim != 2:
        raise ShapeError(f"unigrad_loss: predictions must be M x D, got {y.shape}")
    if z.shape != y.shape:
        raise ShapeError(f"unigrad_loss: targets {z.shape} vs predictions {y.shape}")
    if u.ndim != 2 or u.shape[1] != y.shape[1]:
        raise ShapeError(f"unigrad_loss: negatives {u.shape} vs predictions {y.shape}")
    if y.shape[0] < 1 or u.shape[0] < 1:
        raise ShapeError(f"unigrad_loss: empty input {y.shape} / {u.shape}")

    _check_rows(y.data, "prediction")
    _check_rows(z, "target")

    dtype = y.dtype
    y_hat = l2_normalize(y, axis=-1, eps=eps)
    z_hat = _normalize_rows(z, eps).astype(dtype)
    cov = negative_covariance(u, eps).astype(dtype)

    align = sum_(y_hat * z_hat, axis=-1)
    uniform = sum_(matmul(y_hat, cov) * y_hat, axis=-1)

    loss = mean(uniform * (lam / 2.0) - align)

    return loss, float(align.data.mean()), float(uniform.data.mean())


def unigrad_loss(
    y: Tensor, z: np.ndarray, u: np.ndarray, lam: float, eps: float = DEFAULT_EPS
) -> Tensor:
    return unigrad_terms(y, z, u, lam, eps)[0]


def _check_pair(y_b: Tensor, z_b: np.ndarray, name: str):
    if y_b.ndim != 3 or z_b.shape != y_b.shape:
        raise ShapeError(f"{name}: predictions {y_b.shape} vs targets {z_b.shape}")


def global_terms(
    y_b: Tensor, z_b: np.ndarray, lam: float, eps: float = DEFAULT_EPS
) -> Tuple[Tensor, float, float]:
    _check_pair(y_b, z_b, "global_loss")

    if y_b.shape[0] < 2:
        LOG.warning(
            "Global loss over a batch of %d image(s) has a degenerate negative set",
            y_b.shape[0],
        )

    y = mean(y_b, axis=1)
    z = z_b.mean(axis=1)
    return unigrad_terms(y, z, z, lam, eps)


def global_loss(y_b: Tensor, z_b: np.ndarray, lam: float, eps: float = DEFAULT_EPS) -> Tensor:
    """
    Contrastive loss between token-averaged predictions and token-averaged
    targets; the negatives are the averaged targets of every image.
    """
    return global_terms(y_b, z_b, lam, eps)[0]


def _check_degenerate(tokens: np.ndarray, label: str):
    """
    Reject images whose tokens are all identical, compared before centering.
    """
    for b in range(tokens.shape[0]):
        if np.all(tokens[b] == tokens[b, :1]):
            raise LossError(f"Image {b}: every {label} token equals the image mean")


def de_center(tokens: np.ndarray) -> np.ndarray:
    return tokens - tokens.mean(axis=1, keepdims=True)


def dense_terms(
    y_b: Tensor,
    z_b: np.ndarray,
    lam: float,
    de_center_tokens: bool = True,
    eps: float = DEFAULT_EPS,
) -> Tuple[Tensor, float, float]:
    _check_pair(y_b, z_b, "dense_loss")

    b, n, dim = y_b.shape

    if de_center_tokens:
        _check_degenerate(y_b.data, "prediction")
        _check_degenerate(z_b, "target")
        y = y_b - mean(y_b, axis=1, keepdims=True)
        z = de_center(z_b)
    else:
        y = y_b
        z = z_b

    z_flat = z.reshape(b * n, dim)
    return unigrad_terms(y.reshape(b * n, dim), z_flat, z_flat, lam, eps)


def dense_loss(
    y_b: Tensor,
    z_b: np.ndarray,
    lam: float,
    de_center_tokens: bool = True,
    eps: float = DEFAULT_EPS,
) -> Tensor:
    """
    Every token is its own sample: positives are same (image, token)
    pairs, negatives are all target tokens of the batch. Tokens are first
    de-centered within each image unless disabled.
    """
    return dense_terms(y_b, z_b, lam, de_center_tokens, eps)[0]


def feature_std(y_b: np.ndarray, eps: float = DEFAULT_EPS) -> float:
    """
    Mean over images and channels of the token-wise standard deviation of
    L2-normalized features; near zero when every token maps to one vector.
    """
    return float(_normalize_rows(y_b, eps).std(axis=1).mean())


def total_loss(
    y_b: Tensor,
    z_b: np.ndarray,
    cfg: LossConfig,
    collapse_threshold: float = 1e-3,
) -> LossReport:
    objective = None  # type: Optional[Tensor]
    global_value = dense_value = None  # type: Optional[float]
    align = uniform = None  # type: Optional[float]

    if cfg.alpha_global > 0.0:
        g, align, uniform = global_terms(y_b, z_b, cfg.lam, cfg.eps)
        global_value = g.item()
        objective = g * cfg.alpha_global

    if cfg.alpha_dense > 0.0:
        d, align, uniform = dense_terms(y_b, z_b, cfg.lam, cfg.de_center_dense, cfg.eps)
        dense_value = d.item()
        weighted = d * cfg.alpha_dense
        objective = weighted if objective is None else objective + weighted

    if objective is None:
        raise LossError("Both loss weights are zero")

    std = feature_std(y_b.data, cfg.eps)

    return LossReport(
        total=objective.item(),
        global_term=global_value,
        dense_term=dense_value,
        align=align,
        uniform=uniform,
        feat_std=std,
        collapsed=std < collapse_threshold,
        objective=objective,
    )


def pixel_loss(pred: Tensor, target: np.ndarray, hidden: Optional[np.ndarray] = None) -> Tensor:
    """
    Per-patch mean squared error, averaged over the positions selected by
    ``hidden`` (B x N, nonzero where counted) or over every position.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pixel_loss: predictions {pred.shape} vs targets {target.shape}")

    per_patch = mean((pred - target) ** 2, axis=-1)

    if hidden is None:
        return mean(per_patch)

    weights = hidden.astype(pred.dtype)
    count = float(weights.sum())
    if count == 0.0:
        raise LossError("pixel_loss: no positions selected")

    return sum_(per_patch * weights) / count


def pixel_report(
    pred: Tensor,
    target: np.ndarray,
    y_b: Tensor,
    hidden: Optional[np.ndarray] = None,
    collapse_threshold: float = 1e-3,
) -> LossReport:
    objective = pixel_loss(pred, target, hidden)
    std = feature_std(y_b.data)

    return LossReport(
        total=objective.item(),
        global_term=None,
        dense_term=objective.item(),
        align=None,
        uniform=None,
        feat_std=std,
        collapsed=std < collapse_threshold,
        objective=objective,
    )
