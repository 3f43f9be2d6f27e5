from __future__ import annotations

from dataclasses import replace
from typing import Callable, Optional, Sequence

import numpy as np

from ..api import GradCheckResult, ShapeError
from .augment import build_view_batch
from .config import AugmentConfig, LossConfig, ModelConfig
from .log import LOG
from .loss import total_loss
from .model import SimModel
from .synthetic import synthetic_dataset
from .tensor import Tape, Tensor, no_grad

ScalarFn = Callable[[Tensor], Tensor]

# Both loss branches enabled.
COMPOSITE_LOSS = LossConfig(alpha_global=1.0, alpha_dense=1.0)

COMPOSITE_PARAMETERS = (
    "encoder.patch_embed.weight",
    "encoder.blocks.blocks.0.attn.qkv.weight",
    "projector.proj_in.weight",
    "decoder.blocks.0.mlp.fc1.weight",
    "mask_token",
    "scale_mixer.weight",
)


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise ShapeError(f"grad_check: function must be scalar-valued, got {value.shape}")
    return float(value.data.reshape(-1)[0])


def grad_check(
    f: ScalarFn,
    x: Tensor,
    eps: float = 1e-4,
    tol: float = 1e-4,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckResult:
    """
    Compare the tape gradient of ``f`` at ``x`` with central differences.

    ``x`` is perturbed in place and restored, so it may be a model
    parameter that ``f`` reads through a closure. The relative error is
    max|a - n| / max(max|a|, max|n|, 1e-8) over the checked entries. When
    ``max_entries`` is set only a seeded random subset of entries is checked.
    """
    requires_grad = x.requires_grad
    saved_grad = x.grad

    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            out = f(x)
        _scalar(out)
        tape.backward(out)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    finally:
        x.requires_grad = requires_grad
        x.grad = saved_grad

    flat = x.data.reshape(-1)
    indices = np.arange(flat.size)
    if max_entries is not None and max_entries < flat.size:
        indices = np.sort(np.random.default_rng(seed).choice(flat.size, max_entries, False))

    a = analytic.reshape(-1)[indices]
    n = np.empty_like(a)

    with no_grad():
        for k, i in enumerate(indices):
            original = flat[i]

            flat[i] = original + eps
            plus = _scalar(f(x))
            flat[i] = original - eps
            minus = _scalar(f(x))
            flat[i] = original

            n[k] = (plus - minus) / (2.0 * eps)

    diff = np.abs(a - n)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)), 1e-8)
    rel = float(np.max(diff, initial=0.0)) / scale

    worst = None
    if indices.size:
        worst = tuple(int(v) for v in np.unravel_index(indices[int(np.argmax(diff))], x.shape))

    passed = rel < tol

    if not passed:
        LOG.warning("Gradient check failed: max rel error %.3e at index %r", rel, worst)

    return GradCheckResult(
        passed=passed, max_rel_error=rel, worst_index=worst, checked=int(indices.size)
    )


def composite_grad_check(
    norm_kind: str = "layer-norm",
    loss: LossConfig = COMPOSITE_LOSS,
    seed: int = 0,
    max_entries: Optional[int] = 48,
    tol: float = 1e-3,
    parameters: Sequence[str] = COMPOSITE_PARAMETERS,
) -> GradCheckResult:
    """
    Finite-difference check of the full online path (masked encoder,
    projector, decoder with relative position embeddings, loss weighting)
    on a two-image, 16-token float64 model.

    Each named parameter is checked through the total objective. The
    result is the worst one, named in ``parameter``; ``checked`` counts
    entries over all of them.
    """
    model_cfg = ModelConfig(
        image_size=8,
        patch_size=2,
        backbone_dim=16,
        backbone_depth=1,
        backbone_heads=2,
        embed_dim=16,
        heads=2,
        projector_depth=1,
        decoder_depth=1,
        norm_kind=norm_kind,
        dtype="float64",
        init_seed=seed,
    )
    model = SimModel(model_cfg)
    online = model.online_parameters()

    unknown = [name for name in parameters if name not in online]
    if unknown:
        raise ShapeError(f"composite_grad_check: no online parameter named {unknown}")

    dataset = synthetic_dataset(2, 2, 16, seed)
    batch = build_view_batch(
        dataset, [0, 1], AugmentConfig(), False, 8, model.num_tokens, seed, 0, 0
    )

    z_b = model.target_features(batch)

    def objective(_: Tensor) -> Tensor:
        return total_loss(model.predict(batch), z_b, loss, collapse_threshold=0.0).objective

    worst = None  # type: Optional[GradCheckResult]
    checked = 0

    for name in parameters:
        result = grad_check(
            objective, online[name], eps=1e-5, tol=tol, max_entries=max_entries, seed=seed
        )
        LOG.debug("Gradient check of %s: max rel error %.3e", name, result.max_rel_error)

        checked += result.checked
        if worst is None or result.max_rel_error > worst.max_rel_error:
            worst = replace(result, parameter=name)

    if worst is None:
        raise ShapeError("composite_grad_check: no parameters to check")

    return replace(worst, checked=checked)
