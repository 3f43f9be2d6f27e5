from __future__ import annotations

import math
from typing import Dict, Iterator, List, Tuple

import numpy as np

from ..api import ShapeError
from .tensor import (
    Tensor,
    batch_norm,
    gelu,
    layer_norm,
    matmul,
    parameter,
    reshape,
    softmax,
    transpose,
)

NORM_KINDS = ("layer-norm", "batch-norm")


class Module:
    """
    Minimal parameter container. Parameters are Tensor attributes, frozen
    ones included; buffers are plain ndarray attributes (running
    statistics, fixed embeddings). Both are discovered by walking the
    attribute tree in definition order, so names are stable.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self._children():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    def freeze(self) -> "Module":
        for _, p in self.named_parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


def xavier_uniform(
    rng: np.random.Generator, fan_in: int, fan_out: int, dtype: np.dtype
) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class Linear(Module):
    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
        bias: bool = True,
    ):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = parameter(xavier_uniform(rng, in_dim, out_dim, dtype))
        self.bias = parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"linear: input {x.shape} does not end in {self.in_dim}")

        out = matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int, dtype: np.dtype = np.float32, eps: float = 1e-6):
        self.eps = eps
        self.weight = parameter(np.ones(dim, dtype=dtype))
        self.bias = parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, axis=-1, eps=self.eps) * self.weight + self.bias


class BatchNorm(Module):
    """
    Batch normalization over every axis but the last, i.e. over
    (batch x tokens) for token sequences.
    """

    def __init__(
        self, dim: int, dtype: np.dtype = np.float32, momentum: float = 0.1, eps: float = 1e-5
    ):
        self.momentum = momentum
        self.eps = eps
        self.weight = parameter(np.ones(dim, dtype=dtype))
        self.bias = parameter(np.zeros(dim, dtype=dtype))
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        normed = batch_norm(
            x,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )
        return normed * self.weight + self.bias


def make_norm(kind: str, dim: int, dtype: np.dtype) -> Module:
    if kind == "layer-norm":
        return LayerNorm(dim, dtype)
    if kind == "batch-norm":
        return BatchNorm(dim, dtype)
    raise ShapeError(f"Unknown norm kind: {kind} (valid: {NORM_KINDS})")


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype: np.dtype):
        if dim % heads:
            raise ShapeError(f"attention: {heads} heads do not divide dimension {dim}")

        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape

        qkv = reshape(self.qkv(x), (b, n, 3, self.heads, self.head_dim))
        qkv = transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]

        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * self.scale
        out = matmul(softmax(scores, axis=-1), v)

        out = reshape(transpose(out, (0, 2, 1, 3)), (b, n, d))
        return self.proj(out)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype: np.dtype):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class Block(Module):
    """
    Pre-norm transformer encoder block. With ``mix_tokens`` disabled the
    attention branch is skipped and every token is processed on its own.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        mlp_ratio: float,
        norm_kind: str,
        rng: np.random.Generator,
        dtype: np.dtype,
    ):
        self.mix_tokens = True
        self.norm1 = make_norm(norm_kind, dim, dtype)
        self.attn = Attention(dim, heads, rng, dtype)
        self.norm2 = make_norm(norm_kind, dim, dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        if self.mix_tokens:
            x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TransformerStack(Module):
    def __init__(
        self,
        dim: int,
        depth: int,
        heads: int,
        mlp_ratio: float,
        norm_kind: str,
        rng: np.random.Generator,
        dtype: np.dtype,
    ):
        self.blocks = [
            Block(dim, heads, mlp_ratio, norm_kind, rng, dtype) for _ in range(depth)
        ]  # type: List[Block]
        self.norm = make_norm(norm_kind, dim, dtype)

    def set_token_mixing(self, enabled: bool):
        for block in self.blocks:
            block.mix_tokens = enabled

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


def state_arrays(module: Module, prefix: str = "") -> Dict[str, np.ndarray]:
    arrays = {name: p.data for name, p in module.named_parameters(prefix)}
    arrays.update(module.named_buffers(prefix))
    return arrays


def copy_state(src: Module, dst: Module):
    """
    Copy parameter and buffer values between two structurally identical
    modules.
    """
    src_arrays = state_arrays(src)
    dst_arrays = state_arrays(dst)

    if src_arrays.keys() != dst_arrays.keys():
        raise ShapeError("copy_state: module trees differ")

    for name, arr in src_arrays.items():
        if dst_arrays[name].shape != arr.shape:
            raise ShapeError(f"copy_state: {name} {arr.shape} vs {dst_arrays[name].shape}")
        dst_arrays[name][...] = arr
