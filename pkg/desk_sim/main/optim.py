from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from ..api import OptimizerError
from .config import TrainConfig
from .tensor import Tensor


def effective_lr(cfg: TrainConfig) -> float:
    """
    Linear scaling rule: base_lr * batch_size / 256.
    """
    return cfg.base_lr * cfg.batch_size / 256.0


def lr_at(
    step: int, warmup_steps: int, total_steps: int, peak_lr: float, schedule: str = "cosine"
) -> float:
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps

    if schedule == "constant" or total_steps <= warmup_steps:
        return peak_lr

    progress = min(max(step - warmup_steps, 0), total_steps - warmup_steps)
    return peak_lr * (math.cos(math.pi * progress / (total_steps - warmup_steps)) + 1.0) / 2.0


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {f"exp_avg.{k}": v for k, v in self.exp_avg.items()}
        out.update({f"exp_avg_sq.{k}": v for k, v in self.exp_avg_sq.items()})
        return out

    @classmethod
    def from_arrays(cls, step: int, arrays: Mapping[str, np.ndarray]) -> "OptimizerState":
        state = cls(step=step)
        for key, value in arrays.items():
            kind, _, name = key.partition(".")
            getattr(state, kind)[name] = value
        return state


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))

    if max_norm > 0.0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)

    return total


def adamw_step(
    params: Mapping[str, Tensor],
    state: OptimizerState,
    lr: float,
    betas: Tuple[float, float],
    weight_decay: float,
    eps: float = 1e-8,
):
    """
    One AdamW update with bias correction and decoupled weight decay.
    Parameters without a gradient are skipped; parameters of rank 1 or less
    (biases, norm scales, the mask token) are not decayed.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise OptimizerError(f"Non-finite gradient for parameter {name}")

    state.step += 1
    beta1, beta2 = betas
    bias1 = 1.0 - beta1**state.step
    bias2 = 1.0 - beta2**state.step

    for name, p in params.items():
        if p.grad is None:
            continue

        grad = p.grad.astype(p.dtype, copy=False)

        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None or v is None:
            m = state.exp_avg[name] = np.zeros_like(p.data)
            v = state.exp_avg_sq[name] = np.zeros_like(p.data)

        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad

        update = (m / bias1) / (np.sqrt(v / bias2) + eps)
        if weight_decay and p.ndim > 1:
            update = update + weight_decay * p.data

        p.data -= (lr * update).astype(p.dtype, copy=False)
