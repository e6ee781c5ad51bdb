"""Minimal dense-tensor reverse-mode automatic differentiation.

Every differentiable quantity in the engine is a :class:`Tensor` holding a
64-bit float ndarray. Operations record their inputs and a local gradient
rule on the implicit graph; :func:`backward` replays the graph in reverse
topological order. There is no fusion, no graph optimization and no mixed
precision: the engine favors auditability and bit-determinism over speed.

Broadcasting is deliberately restricted to scalar-vs-tensor and equal-shape
operands. Anything richer must go through an explicit :func:`broadcast_to`,
whose backward (sum over the expanded axes) is then visible on the graph.

A local gradient rule maps the output gradient to a list of
``(input, gradient contribution)`` pairs. Contributions are accumulated in
per-call buffers, so intermediate gradients never leak between backward
passes; leaf tensors accumulate into ``.grad`` additively across calls.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "ones",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sigmoid",
    "relu",
    "clamp",
    "sqrt",
    "absolute",
    "power",
    "matmul",
    "tsum",
    "tmean",
    "reshape",
    "transpose2d",
    "broadcast_to",
    "concat",
    "gather_rows",
    "slice_tensor",
    "cumprod",
    "backward",
    "zero_grad",
    "finite_diff",
]


class Tensor:
    """A dense float64 array with an optional entry on the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], list] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data.reshape(()))

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all defer to the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(arr: np.ndarray) -> Tensor:
    """Wrap an array as a non-grad Tensor without copying.

    The caller must treat the array as read-only; broadcast views are fine.
    """
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._backward = None
    return t


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.size == 1


def _check_elementwise_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise ValueError(
        f"{op}: shapes {a.shape} and {b.shape} are not equal and neither is scalar"
    )


def _make(out_data: np.ndarray, parents: Sequence[Tensor], bw) -> Tensor:
    out = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bw
    return out


def _reduce_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` (handles the scalar-broadcast case)."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def custom_op(out_data: np.ndarray, parents: Sequence[Tensor], bw) -> Tensor:
    """Record a fused operation with a hand-written gradient rule.

    `bw` maps the output gradient to (parent, contribution) pairs, exactly
    like the built-in rules. Fused ops must be covered by finite-difference
    checks wherever they are introduced.
    """
    return _make(out_data, parents, bw)


# ---------------------------------------------------------------------------
# Elementwise binary ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise_shapes(a, b, "add")

    def bw(g):
        out = []
        if a.requires_grad:
            out.append((a, _reduce_to_shape(g, a.shape)))
        if b.requires_grad:
            out.append((b, _reduce_to_shape(g, b.shape)))
        return out

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise_shapes(a, b, "sub")

    def bw(g):
        out = []
        if a.requires_grad:
            out.append((a, _reduce_to_shape(g, a.shape)))
        if b.requires_grad:
            out.append((b, _reduce_to_shape(-g, b.shape)))
        return out

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise_shapes(a, b, "mul")

    def bw(g):
        out = []
        if a.requires_grad:
            out.append((a, _reduce_to_shape(g * b.data, a.shape)))
        if b.requires_grad:
            out.append((b, _reduce_to_shape(g * a.data, b.shape)))
        return out

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise_shapes(a, b, "div")

    def bw(g):
        out = []
        if a.requires_grad:
            out.append((a, _reduce_to_shape(g / b.data, a.shape)))
        if b.requires_grad:
            out.append((b, _reduce_to_shape(-g * a.data / (b.data * b.data), b.shape)))
        return out

    return _make(a.data / b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# Elementwise unary ops


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: [(a, -g)])


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: [(a, g * out_data)])


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: [(a, g / a.data)])


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    return _make(out_data, (a,), lambda g: [(a, g * out_data * (1.0 - out_data))])


def relu(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: [(a, g * (a.data > 0.0))])


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes where lo <= x <= hi (inclusive)."""
    a = _as_tensor(a)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: [(a, g * inside)])


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)
    return _make(out_data, (a,), lambda g: [(a, g * 0.5 / out_data)])


def absolute(a) -> Tensor:
    """|x| with the subgradient convention sign(0) = 0."""
    a = _as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: [(a, g * np.sign(a.data))])


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data**p, (a,), lambda g: [(a, g * p * a.data ** (p - 1.0))])


# ---------------------------------------------------------------------------
# Matmul, reductions, shape ops


def matmul(a, b) -> Tensor:
    """2-D matrix product, or batched product when both operands are stacked
    matrices with identical leading (batch) dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if a.data.ndim != b.data.ndim or (a.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ValueError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")

    def bw(g):
        out = []
        if a.requires_grad:
            out.append((a, np.matmul(g, np.swapaxes(b.data, -1, -2))))
        if b.requires_grad:
            out.append((b, np.matmul(np.swapaxes(a.data, -1, -2), g)))
        return out

    return _make(np.matmul(a.data, b.data), (a, b), bw)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return [(a, np.full_like(a.data, g.reshape(())))]
        ge = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(ge, a.shape).copy())]

    return _make(out_data, (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: [(a, g.reshape(a.shape))])


def transpose2d(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose2d: expected a matrix, got shape {a.shape}")
    return _make(
        np.ascontiguousarray(a.data.T), (a,), lambda g: [(a, np.ascontiguousarray(g.T))]
    )


def broadcast_to(a, shape) -> Tensor:
    """Explicit broadcast; backward sums over the expanded axes."""
    a = _as_tensor(a)
    shape = tuple(shape)
    out_data = np.broadcast_to(a.data, shape).copy()
    ndim_added = len(shape) - a.data.ndim
    expanded = tuple(range(ndim_added)) + tuple(
        i + ndim_added
        for i, ext in enumerate(a.shape)
        if ext == 1 and shape[i + ndim_added] != 1
    )

    def bw(g):
        red = np.sum(g, axis=expanded) if expanded else g
        return [(a, red.reshape(a.shape))]

    return _make(out_data, (a,), bw)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    extents = [p.shape[axis] for p in parts]

    def bw(g):
        contribs = []
        offset = 0
        for p, ext in zip(parts, extents):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + ext)
            contribs.append((p, g[tuple(sl)]))
            offset += ext
        return contribs

    return _make(out_data, tuple(parts), bw)


def gather_rows(a, index: np.ndarray) -> Tensor:
    """Select rows along axis 0 by an integer index array.

    Backward scatter-adds, so repeated indices accumulate.
    """
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)

    def bw(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return [(a, acc)]

    return _make(a.data[idx], (a,), bw)


def slice_tensor(a, slices) -> Tensor:
    """Basic slicing with gradient scatter back into the source region."""
    a = _as_tensor(a)
    key = tuple(slices) if isinstance(slices, (tuple, list)) else (slices,)

    def bw(g):
        acc = np.zeros_like(a.data)
        acc[key] = g
        return [(a, acc)]

    return _make(a.data[key].copy(), (a,), bw)


def cumprod(a, axis: int = 0) -> Tensor:
    """Cumulative product along an axis.

    The backward rule divides by the inputs, so entries must be nonzero; the
    compositing path guarantees this because opacities are clamped strictly
    below 1.
    """
    a = _as_tensor(a)
    if np.any(a.data == 0.0):
        raise ValueError("cumprod: zero entries are not supported by the backward rule")
    out_data = np.cumprod(a.data, axis=axis)

    def bw(g):
        gy = g * out_data
        rev = [slice(None)] * gy.ndim
        rev[axis] = slice(None, None, -1)
        rev = tuple(rev)
        tail = np.cumsum(gy[rev], axis=axis)[rev]
        return [(a, tail / a.data)]

    return _make(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# Backward pass and the finite-difference oracle


def _topo_order(root: Tensor) -> list[Tensor]:
    """Topological order of the subgraph below root; iterative DFS."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate gradients of a scalar root into every requires_grad leaf.

    Repeated calls without :func:`zero_grad` keep accumulating. Returns the
    map of leaf tensor -> gradient for callers that want it directly.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _topo_order(root)
    # Per-call gradient buffers; leaves flush into .grad at the end. The
    # first contribution to a node is borrowed (never mutated in place);
    # only on a second contribution does the buffer become owned.
    local: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    owned: set[int] = set()
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = local.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.accumulate_grad(g)
                leaves[node] = node.grad
            continue
        for parent, contrib in node._backward(g):
            if not parent.requires_grad:
                continue
            pid = id(parent)
            buf = local.get(pid)
            if buf is None:
                local[pid] = np.asarray(contrib, dtype=np.float64)
            elif pid in owned:
                buf += contrib
            else:
                local[pid] = buf + contrib
                owned.add(pid)
        owned.discard(id(node))
    return leaves


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def finite_diff(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h."""
    if h <= 0:
        raise ValueError("finite_diff: step h must be positive")
    base = x.data.copy()
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    work = base.copy()
    for i in range(base.size):
        orig = work.reshape(-1)[i]
        work.reshape(-1)[i] = orig + h
        fp = _scalar(f(Tensor(work.copy())))
        work.reshape(-1)[i] = orig - h
        fm = _scalar(f(Tensor(work.copy())))
        work.reshape(-1)[i] = orig
        flat[i] = (fp - fm) / (2.0 * h)
    return grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return float(v.data.reshape(()))
    return float(v)
