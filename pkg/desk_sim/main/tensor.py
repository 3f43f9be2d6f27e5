from __future__ import annotations

import math
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Type, Union

import numpy as np

from ..api import NonFiniteError, ShapeError, TapeError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

Scalar = Union[int, float]
Operand = Union["Tensor", np.ndarray, Scalar]
Axis = Optional[Union[int, Tuple[int, ...]]]

# Operations are only recorded while a tape is active in the current
# context. Running a forward pass outside of any tape is how the target
# branch and evaluation stay off the gradient path.
_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("desk_sim_tape", default=None)


class Tensor:
    """
    Dense row-major array that can take part in reverse-mode
    differentiation. Only float32 and float64 storage is supported.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Optional[Any] = None,
        name: Optional[str] = None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)

        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.grad = None  # type: Optional[np.ndarray]
        self.node = None  # type: Optional[Node]
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype} grad={self.requires_grad}>"

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return div(other, self)

    def __matmul__(self, other: Operand) -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __pow__(self, exponent: Scalar) -> "Tensor":
        return power(self, exponent)

    def __getitem__(self, key: Any) -> "Tensor":
        return slice_(self, key)

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes if axes else None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


def parameter(data: Any, name: Optional[str] = None, dtype: Optional[Any] = None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


class Node:
    """
    One recorded operation: the function instance (which keeps whatever
    forward state its backward rule needs), its inputs and its output.
    """

    __slots__ = ("fn", "inputs", "output", "index", "tape")

    def __init__(self, fn: "Function", inputs: Sequence[Tensor], output: Tensor):
        self.fn = fn
        self.inputs = tuple(inputs)
        self.output = output
        self.index = -1
        self.tape = None  # type: Optional[Tape]


class Tape:
    """
    Ordered record of the operations executed while the tape is active.
    Recording order is a topological order because an op can only consume
    tensors that already exist.
    """

    def __init__(self):
        self.nodes = []  # type: List[Node]
        self._tokens = []  # type: List[Any]

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node):
        node.index = len(self.nodes)
        node.tape = self
        self.nodes.append(node)

    def backward(self, root: Tensor):
        if root.size != 1:
            raise TapeError(f"backward requires a scalar root, got shape {root.shape}")

        if root.node is None or root.node.tape is not self:
            raise TapeError("backward root was not produced on this tape")

        pending = {id(root): np.ones_like(root.data)}  # type: Dict[int, np.ndarray]

        for node in reversed(self.nodes[: root.node.index + 1]):
            grad = pending.pop(id(node.output), None)
            if grad is None:
                continue

            _accumulate(node.output, grad)

            input_grads = node.fn.backward(grad)

            for inp, inp_grad in zip(node.inputs, input_grads):
                if inp_grad is None or not inp.requires_grad:
                    continue

                if inp.node is None:
                    _accumulate(inp, inp_grad)
                else:
                    key = id(inp)
                    if key in pending:
                        pending[key] = pending[key] + inp_grad
                    else:
                        pending[key] = inp_grad


def _accumulate(t: Tensor, grad: np.ndarray):
    grad = grad.astype(t.dtype, copy=False).reshape(t.shape)
    t.grad = grad.copy() if t.grad is None else t.grad + grad


@contextmanager
def no_grad() -> Iterator[None]:
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def backward(root: Tensor):
    if root.node is None or root.node.tape is None:
        raise TapeError("backward root is not on a tape")

    root.node.tape.backward(root)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """
    Sum out broadcast dimensions so that ``grad`` matches ``shape``.
    """
    if grad.shape == shape:
        return grad

    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))

    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)

    return grad.reshape(shape)


def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Function:
    """
    Base class of every differentiable op. ``forward`` receives raw arrays
    and the op attributes; ``backward`` receives dL/d(output) and returns
    one gradient (or None) per input.
    """

    kind = "op"

    def __init__(self, **attrs: Any):
        self.attrs = attrs

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"forward not implemented for {self.kind}")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"backward not implemented for {self.kind}")

    def shape_error(self, *shapes: Tuple[int, ...], detail: str = "") -> ShapeError:
        rendered = " vs ".join(str(s) for s in shapes)
        suffix = f" ({detail})" if detail else ""
        return ShapeError(f"{self.kind}: incompatible shapes {rendered}{suffix}")


class _Binary(Function):
    def check(self, x: np.ndarray, y: np.ndarray):
        try:
            np.broadcast_shapes(x.shape, y.shape)
        except ValueError:
            raise self.shape_error(x.shape, y.shape)
        self.x_shape, self.y_shape = x.shape, y.shape


class Add(_Binary):
    kind = "add"

    def forward(self, x, y):
        self.check(x, y)
        return x + y

    def backward(self, grad):
        return unbroadcast(grad, self.x_shape), unbroadcast(grad, self.y_shape)


class Sub(_Binary):
    kind = "sub"

    def forward(self, x, y):
        self.check(x, y)
        return x - y

    def backward(self, grad):
        return unbroadcast(grad, self.x_shape), unbroadcast(-grad, self.y_shape)


class Mul(_Binary):
    kind = "mul"

    def forward(self, x, y):
        self.check(x, y)
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return (
            unbroadcast(grad * self.y, self.x_shape),
            unbroadcast(grad * self.x, self.y_shape),
        )


class Div(_Binary):
    kind = "div"

    def forward(self, x, y):
        self.check(x, y)
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        gx = grad / self.y
        gy = -grad * self.x / (self.y * self.y)
        return unbroadcast(gx, self.x_shape), unbroadcast(gy, self.y_shape)


class MatMul(Function):
    kind = "matmul"

    def forward(self, x, y):
        if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
            raise self.shape_error(x.shape, y.shape)
        try:
            np.broadcast_shapes(x.shape[:-2], y.shape[:-2])
        except ValueError:
            raise self.shape_error(x.shape, y.shape, detail="batch dimensions")
        self.x, self.y = x, y
        return np.matmul(x, y)

    def backward(self, grad):
        gx = np.matmul(grad, np.swapaxes(self.y, -1, -2))
        gy = np.matmul(np.swapaxes(self.x, -1, -2), grad)
        return unbroadcast(gx, self.x.shape), unbroadcast(gy, self.y.shape)


class Transpose(Function):
    kind = "transpose"

    def forward(self, x):
        axes = self.attrs.get("axes")
        if axes is None:
            if x.ndim < 2:
                raise self.shape_error(x.shape, detail="transpose needs rank >= 2")
            axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
        if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
            raise self.shape_error(x.shape, tuple(axes), detail="bad permutation")
        self.axes = tuple(a % x.ndim for a in axes)
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Reshape(Function):
    kind = "reshape"

    def forward(self, x):
        self.in_shape = x.shape
        try:
            return x.reshape(self.attrs["shape"])
        except ValueError:
            raise self.shape_error(x.shape, tuple(self.attrs["shape"]))

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Concat(Function):
    kind = "concat"

    def forward(self, *xs):
        axis = self.attrs.get("axis", 0)
        try:
            out = np.concatenate(xs, axis=axis)
        except ValueError:
            raise self.shape_error(*(x.shape for x in xs))
        self.axis = axis % out.ndim
        self.splits = np.cumsum([x.shape[self.axis] for x in xs])[:-1]
        return out

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Slice(Function):
    kind = "slice"

    def forward(self, x):
        self.in_shape = x.shape
        self.key = self.attrs["key"]
        try:
            return np.array(x[self.key])
        except IndexError as ex:
            raise self.shape_error(x.shape, detail=str(ex))

    def backward(self, grad):
        gx = np.zeros(self.in_shape, dtype=grad.dtype)
        np.add.at(gx, self.key, grad)
        return (gx,)


class GatherRows(Function):
    """
    Batched row gather: ``out[b, k] = x[b, index[b, k]]`` over axis 1.
    """

    kind = "gather"

    def forward(self, x):
        index = np.asarray(self.attrs["index"], dtype=np.int64)
        if x.ndim < 2 or index.ndim != 2 or index.shape[0] != x.shape[0]:
            raise self.shape_error(x.shape, index.shape)
        if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
            raise self.shape_error(x.shape, index.shape, detail="index out of range")
        self.in_shape = x.shape
        self.rows = np.arange(x.shape[0])[:, None]
        self.index = index
        return x[self.rows, index]

    def backward(self, grad):
        gx = np.zeros(self.in_shape, dtype=grad.dtype)
        np.add.at(gx, (self.rows, self.index), grad)
        return (gx,)


class Sum(Function):
    kind = "sum"

    def forward(self, x):
        self.in_shape = x.shape
        self.axes = _normalize_axes(self.attrs.get("axis"), x.ndim)
        self.keepdims = self.attrs.get("keepdims", False)
        return np.sum(x, axis=self.axes, keepdims=self.keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class Mean(Sum):
    kind = "mean"

    def forward(self, x):
        out = super().forward(x)
        self.count = int(np.prod([x.shape[a] for a in self.axes])) if self.axes else 1
        return out / self.count

    def backward(self, grad):
        (g,) = super().backward(grad)
        return (g / self.count,)


class Broadcast(Function):
    kind = "broadcast"

    def forward(self, x):
        self.in_shape = x.shape
        try:
            return np.broadcast_to(x, self.attrs["shape"]).copy()
        except ValueError:
            raise self.shape_error(x.shape, tuple(self.attrs["shape"]))

    def backward(self, grad):
        return (unbroadcast(grad, self.in_shape),)


class Exp(Function):
    kind = "exp"

    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    kind = "log"

    def forward(self, x):
        self.x = x
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Sqrt(Function):
    kind = "sqrt"

    def forward(self, x):
        with np.errstate(invalid="ignore"):
            self.out = np.sqrt(x)
        return self.out

    def backward(self, grad):
        return (grad / (2.0 * self.out),)


class Power(Function):
    kind = "power"

    def forward(self, x):
        self.x = x
        self.p = self.attrs["exponent"]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.power(x, self.p)

    def backward(self, grad):
        return (grad * self.p * np.power(self.x, self.p - 1),)


_GELU_K = math.sqrt(2.0 / math.pi)


class Gelu(Function):
    """
    Tanh form of GELU; its backward rule is the exact derivative of that
    form.
    """

    kind = "gelu"

    def forward(self, x):
        self.x = x
        self.t = np.tanh(_GELU_K * (x + 0.044715 * x**3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        dinner = _GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)


class Softmax(Function):
    kind = "softmax"

    def forward(self, x):
        self.axis = self.attrs.get("axis", -1)
        shifted = x - np.max(x, axis=self.axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / np.sum(e, axis=self.axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - np.sum(grad * y, axis=self.axis, keepdims=True)),)


class _Standardize(Function):
    """
    Shared math of layer and batch normalization: subtract the mean and
    divide by sqrt(var + eps) over ``self.axes``.
    """

    def standardize(self, x, axes):
        self.axes = axes
        self.count = int(np.prod([x.shape[a] for a in axes]))
        mu = np.mean(x, axis=axes, keepdims=True)
        var = np.mean((x - mu) ** 2, axis=axes, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + self.attrs.get("eps", 1e-5))
        self.xhat = (x - mu) * self.inv_std
        return mu, var

    def backward(self, grad):
        xhat, axes = self.xhat, self.axes
        g_mean = np.mean(grad, axis=axes, keepdims=True)
        gx_mean = np.mean(grad * xhat, axis=axes, keepdims=True)
        return (self.inv_std * (grad - g_mean - xhat * gx_mean),)


class LayerNorm(_Standardize):
    kind = "layer_norm"

    def forward(self, x):
        self.standardize(x, (self.attrs.get("axis", -1) % x.ndim,))
        return self.xhat


class BatchNorm(_Standardize):
    """
    Channel-last batch normalization over every non-channel axis. Training
    mode normalizes with batch statistics and folds them into the running
    buffers (updated in place); eval mode uses the running buffers.
    """

    kind = "batch_norm"

    def forward(self, x):
        running_mean = self.attrs["running_mean"]
        running_var = self.attrs["running_var"]
        if running_mean.shape != (x.shape[-1],):
            raise self.shape_error(x.shape, running_mean.shape)

        self.training = self.attrs.get("training", True)
        axes = tuple(range(x.ndim - 1))

        if self.training:
            mu, var = self.standardize(x, axes)
            momentum = self.attrs.get("momentum", 0.1)
            unbiased = var.reshape(-1) * (self.count / max(self.count - 1, 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(-1)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
            return self.xhat

        self.inv_std = 1.0 / np.sqrt(running_var + self.attrs.get("eps", 1e-5))
        return (x - running_mean) * self.inv_std

    def backward(self, grad):
        if self.training:
            return super().backward(grad)
        return (grad * self.inv_std,)


class L2Normalize(Function):
    kind = "l2_normalize"

    def forward(self, x):
        self.axis = self.attrs.get("axis", -1)
        eps = self.attrs.get("eps", 1e-8)
        self.norm = np.sqrt(np.sum(x * x, axis=self.axis, keepdims=True))
        self.floored = self.norm <= eps
        self.denom = np.where(self.floored, eps, self.norm)
        self.out = x / self.denom
        return self.out

    def backward(self, grad):
        y = self.out
        projected = (grad - y * np.sum(grad * y, axis=self.axis, keepdims=True)) / self.denom
        return (np.where(self.floored, grad / self.denom, projected),)


OPS = {
    fn.kind: fn
    for fn in (
        Add,
        Sub,
        Mul,
        Div,
        MatMul,
        Transpose,
        Reshape,
        Concat,
        Slice,
        GatherRows,
        Sum,
        Mean,
        Broadcast,
        Exp,
        Log,
        Sqrt,
        Power,
        Gelu,
        Softmax,
        LayerNorm,
        BatchNorm,
        L2Normalize,
    )
}  # type: Dict[str, Type[Function]]


def _lift(value: Operand, like: Optional[Tensor]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def apply(op_kind: str, *inputs: Operand, **attrs: Any) -> Tensor:
    """
    Run one catalog op. The result is recorded on the active tape when any
    input requires a gradient.
    """
    fn_class = OPS.get(op_kind)
    if fn_class is None:
        raise ShapeError(f"Unknown op: {op_kind} (valid: {sorted(OPS)})")

    like = next((x for x in inputs if isinstance(x, Tensor)), None)
    tensors = [_lift(x, like) for x in inputs]

    fn = fn_class(**attrs)
    out_data = fn.forward(*(t.data for t in tensors))

    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op_kind}: non-finite output for input shapes "
                             f"{[t.shape for t in tensors]}")

    tape = _ACTIVE_TAPE.get()
    requires_grad = tape is not None and any(t.requires_grad for t in tensors)

    out = Tensor(out_data, requires_grad=requires_grad, dtype=out_data.dtype)

    if requires_grad:
        node = Node(fn, tensors, out)
        tape.record(node)  # type: ignore
        out.node = node

    return out


def add(x: Operand, y: Operand) -> Tensor:
    return apply("add", x, y)


def sub(x: Operand, y: Operand) -> Tensor:
    return apply("sub", x, y)


def mul(x: Operand, y: Operand) -> Tensor:
    return apply("mul", x, y)


def div(x: Operand, y: Operand) -> Tensor:
    return apply("div", x, y)


def matmul(x: Operand, y: Operand) -> Tensor:
    return apply("matmul", x, y)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    return apply("transpose", x, axes=None if axes is None else tuple(axes))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply("reshape", x, shape=tuple(shape))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply("concat", *xs, axis=axis)


def slice_(x: Tensor, key: Any) -> Tensor:
    return apply("slice", x, key=key)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    return apply("gather", x, index=index)


def sum_(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return apply("sum", x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return apply("mean", x, axis=axis, keepdims=keepdims)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply("broadcast", x, shape=tuple(shape))


def exp(x: Tensor) -> Tensor:
    return apply("exp", x)


def log(x: Tensor) -> Tensor:
    return apply("log", x)


def sqrt(x: Tensor) -> Tensor:
    return apply("sqrt", x)


def power(x: Tensor, exponent: Scalar) -> Tensor:
    return apply("power", x, exponent=exponent)


def gelu(x: Tensor) -> Tensor:
    return apply("gelu", x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply("softmax", x, axis=axis)


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    return apply("layer_norm", x, axis=axis, eps=eps)


def batch_norm(
    x: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    return apply(
        "batch_norm",
        x,
        running_mean=running_mean,
        running_var=running_var,
        training=training,
        momentum=momentum,
        eps=eps,
    )


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    return apply("l2_normalize", x, axis=axis, eps=eps)
