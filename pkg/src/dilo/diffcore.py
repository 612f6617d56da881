"""Dense reverse-mode automatic differentiation on float64 numpy arrays.

Operations are recorded on the innermost active :class:`Graph` (define-by-run)
whenever one of their inputs requires a gradient. Outside a ``with Graph()``
block nothing is recorded, which is how inference runs.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> x = Tensor([[3.0], [4.0]])
    >>> with Graph() as g:
    ...     loss = sum_of_squares(matmul(w, x))
    ...     g.backward(loss)
    >>> w.grad
    array([[66., 88.]])
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

OP_KINDS = (
    "matmul",
    "add",
    "sub",
    "elementwise_mul",
    "div",
    "scalar_mul",
    "leaky_relu",
    "relu",
    "sqrt",
    "mean_over_axis",
    "sum_over_axis",
    "variance_over_axis",
    "std_over_axis",
    "max_over_axis",
    "broadcast",
    "reshape",
    "transpose",
    "concat",
    "take",
    "sum_of_squares",
    "pairwise_distance",
)


class DimensionError(ValueError):
    """Raised when operand shapes do not conform to an operation."""


class ContractError(RuntimeError):
    """Raised when a caller violates an engine precondition."""


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient becomes NaN or infinite."""


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all of these go through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Tape of recorded operations, replayed in reverse by :meth:`backward`."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)

    def clear(self) -> None:
        self.nodes.clear()


_ACTIVE: list[Graph] = []


def active_graph() -> Graph | None:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(graph: Graph, loss: Tensor) -> None:
    """Populate ``.grad`` of every reachable ``requires_grad`` tensor.

    Gradients accumulate into existing ``.grad`` buffers, so callers zero
    them between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for node in reversed(graph.nodes):
        produced.add(id(node.output))
        g_out = upstream.pop(id(node.output), None)
        if g_out is None:
            continue
        node.output.grad = g_out
        for inp, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            upstream[key] = upstream[key] + g if key in upstream else g
    # whatever is left belongs to leaves
    leaves = {id(loss): loss}
    for node in graph.nodes:
        for inp in node.inputs:
            leaves.setdefault(id(inp), inp)
    for key, g in upstream.items():
        leaf = leaves[key]
        if key in produced or not leaf.requires_grad:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, bwd) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    graph = active_graph()
    out.requires_grad = needs and graph is not None
    if out.requires_grad:
        graph.record(Node(kind, tuple(inputs), out, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("elementwise_mul", a, b)
    ad, bd = a.data, b.data
    return _make("elementwise_mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _make("div", (a, b), out, bwd)


def scalar_mul(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make("scalar_mul", (a,), a.data * c, lambda g: (g * c,))


def leaky_relu(a, slope: float = 0.02) -> Tensor:
    a = _as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make("leaky_relu", (a,), a.data * scale, lambda g: (g * scale,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sqrt(a) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0."""
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _make("sqrt", (a,), out, bwd)


# ----------------------------------------------------------------------------
# reductions


def _axis_check(kind: str, a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"{kind}: axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def sum_over_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis = _axis_check("sum_over_axis", a, axis)
    shape = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum_over_axis", (a,), a.data.sum(axis=axis, keepdims=keepdims), bwd)


def mean_over_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis = _axis_check("mean_over_axis", a, axis)
    shape = a.shape
    n = shape[axis]

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean_over_axis", (a,), a.data.mean(axis=axis, keepdims=keepdims), bwd)


def variance_over_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    """Population variance."""
    a = _as_tensor(a)
    axis = _axis_check("variance_over_axis", a, axis)
    n = a.shape[axis]
    centered = a.data - a.data.mean(axis=axis, keepdims=True)
    out = (centered ** 2).mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * (2.0 / n) * centered,)

    return _make("variance_over_axis", (a,), out, bwd)


def std_over_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    """Population standard deviation; zero-spread slices get a zero gradient."""
    a = _as_tensor(a)
    axis = _axis_check("std_over_axis", a, axis)
    n = a.shape[axis]
    centered = a.data - a.data.mean(axis=axis, keepdims=True)
    std_k = np.sqrt((centered ** 2).mean(axis=axis, keepdims=True))
    out = std_k if keepdims else np.squeeze(std_k, axis=axis)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(std_k > 0, std_k, 1.0)
        return (np.where(std_k > 0, g / (n * safe), 0.0) * centered,)

    return _make("std_over_axis", (a,), out, bwd)


def max_over_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; ties route the gradient to the first maximizer."""
    a = _as_tensor(a)
    axis = _axis_check("max_over_axis", a, axis)
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    shape = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(shape)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return _make("max_over_axis", (a,), out, bwd)


def sum_of_squares(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make("sum_of_squares", (a,), np.asarray(np.sum(ad * ad)), lambda g: (2.0 * g * ad,))


# ----------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting; both operands at least 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", (a, b), ad @ bd, bwd)


def broadcast(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    src = a.shape
    return _make("broadcast", (a,), out, lambda g: (_unbroadcast(g, src),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _make("reshape", (a,), out, lambda g: (g.reshape(src),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: shapes {shapes} do not conform along axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make("concat", tensors, out, lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a, index, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradients."""
    a = _as_tensor(a)
    axis = _axis_check("take", a, axis)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < -a.shape[axis] or index.max() >= a.shape[axis]):
        raise DimensionError(f"take: index out of range for axis {axis} of shape {a.shape}")
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full,)

    return _make("take", (a,), np.take(a.data, index, axis=axis), bwd)


def pairwise_distance(points) -> Tensor:
    """Euclidean distance matrix over the last two axes (..., V, 3) -> (..., V, V).

    Coincident points (including the diagonal) get a zero subgradient.
    """
    p = _as_tensor(points)
    if p.ndim < 2:
        raise DimensionError(f"pairwise_distance: expected (..., V, C), got {p.shape}")
    diff = p.data[..., :, None, :] - p.data[..., None, :, :]
    dist = np.sqrt(np.einsum("...ijk,...ijk->...ij", diff, diff))

    def bwd(g):
        safe = np.where(dist > 0, dist, 1.0)
        w = np.where(dist > 0, g / safe, 0.0)
        w = w + np.swapaxes(w, -1, -2)
        # d d_ij / d p_i = (p_i - p_j) / d_ij, summed over both index slots
        grad = w.sum(axis=-1)[..., None] * p.data - w @ p.data
        return (grad,)

    return _make("pairwise_distance", (p,), dist, bwd)


def forward_op(kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Dispatch an operation by name; ``attrs`` carries non-tensor arguments."""
    attrs = dict(attrs or {})
    fn = _DISPATCH.get(kind)
    if fn is None:
        raise ContractError(f"unknown op kind {kind!r}")
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


_DISPATCH = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise_mul": mul,
    "div": div,
    "scalar_mul": scalar_mul,
    "leaky_relu": leaky_relu,
    "relu": relu,
    "sqrt": sqrt,
    "mean_over_axis": mean_over_axis,
    "sum_over_axis": sum_over_axis,
    "variance_over_axis": variance_over_axis,
    "std_over_axis": std_over_axis,
    "max_over_axis": max_over_axis,
    "broadcast": broadcast,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "take": take,
    "sum_of_squares": sum_of_squares,
    "pairwise_distance": pairwise_distance,
}


# ----------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64), **kw)


def adam_step(params, grads, states, lr: float, names=None) -> None:
    """In-place Adam update with bias correction.

    ``params``, ``grads`` and ``states`` are parallel sequences; a ``None``
    gradient counts as zero but still advances that parameter's step counter.
    """
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    for k, (p, g, st) in enumerate(zip(params, grads, states)):
        name = names[k] if names is not None else f"param[{k}]"
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or st.m.shape != p.shape:
            raise DimensionError(f"adam_step: {name} has param {p.shape}, grad {g.shape}, state {st.m.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name} at step {st.step + 1}")
        st.step += 1
        st.m *= st.beta1
        st.m += (1.0 - st.beta1) * g
        st.v *= st.beta2
        st.v += (1.0 - st.beta2) * (g * g)
        m_hat = st.m / (1.0 - st.beta1 ** st.step)
        v_hat = st.v / (1.0 - st.beta2 ** st.step)
        p -= lr * m_hat / (np.sqrt(v_hat) + st.eps)


@dataclass(frozen=True)
class CosineSchedule:
    lr_init: float
    lr_min: float
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")


def lr_at(schedule: CosineSchedule, step: int) -> float:
    if step < 0 or step > schedule.total_steps:
        logger.warning("step %s outside [0, %s]; clamping", step, schedule.total_steps)
        step = min(max(step, 0), schedule.total_steps)
    frac = step / schedule.total_steps
    return schedule.lr_min + 0.5 * (schedule.lr_init - schedule.lr_min) * (1.0 + math.cos(math.pi * frac))
