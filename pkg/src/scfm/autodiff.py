"""Minimal reverse-mode automatic differentiation over float64 arrays.

Every primitive records its parents and a closure mapping the output
cotangent to one cotangent per parent. ``eval_and_grad`` sorts the graph
reachable from a scalar output into a :class:`Tape` and replays it backwards.

Nothing about a backward pass is stored on the tensors themselves, so the
same graph can be differentiated repeatedly and tensors that never touch a
tape are plain immutable values.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphError, NumericalError, ShapeError

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to the reflected Tensor operators

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, src),), "broadcast")


def _binary_operands(a, b):
    a, b = as_tensor(a), as_tensor(b)
    shape = np.broadcast_shapes(a.shape, b.shape)
    return broadcast_to(a, shape), broadcast_to(b, shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return _make(np.logaddexp(0.0, ad), (a,), lambda g: (g * sig,), "softplus")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def backward(g):
        return (np.broadcast_to(np.reshape(g, kept), src).copy(),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    src = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def backward(g):
        return (np.broadcast_to(np.reshape(g, kept) / count, src).copy(),)

    return _make(np.mean(a.data, axis=axes, keepdims=keepdims), (a,), backward, "mean")


def slice_(a, idx) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx]), (a,), backward, "slice")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            out.append(g[tuple(index)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


def logsumexp(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    ad = a.data
    m = np.max(ad, axis=axes, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(ad - m), axis=axes, keepdims=True)
    lse_kept = np.log(s) + m
    soft = np.exp(ad - lse_kept)
    kept_shape = lse_kept.shape

    def backward(g):
        return (np.reshape(g, kept_shape) * soft,)

    out = lse_kept if keepdims else np.squeeze(lse_kept, axis=axes)
    return _make(out, (a,), backward, "logsumexp")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (np.reshape(g, src),), "reshape")


def stop_gradient(a) -> Tensor:
    """Value-identical tensor that contributes nothing to any backward pass."""
    a = as_tensor(a)
    # stays on the tape (so a is still "in the graph") but passes no cotangent
    return _make(a.data, (a,), lambda g: (None,), "stop_gradient")


sg = stop_gradient


# ---------------------------------------------------------------------------
# compositions


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero where clipping is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    fill = np.where(a.data < lo, lo, hi) * (~inside)
    return a * inside.astype(np.float64) + fill


def sigmoid(a) -> Tensor:
    return exp(-softplus(-as_tensor(a)))


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Topologically ordered record of the primitives behind one output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self._index = {id(n): i for i, n in enumerate(nodes)}

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._index

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, seed: np.ndarray) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        return grads


def eval_and_grad(output: Tensor, wrt: Iterable[Tensor]) -> dict[Tensor, Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``."""
    if output.size != 1:
        raise ShapeError(f"output must be a single element, got shape {output.shape}")
    wrt = list(wrt)
    tape = Tape.record(output)
    for p in wrt:
        if p not in tape:
            raise GraphError(f"{p!r} did not participate in the output's construction")
    grads = tape.backward(np.ones_like(output.data))
    return {p: Tensor(grads.get(id(p), np.zeros_like(p.data)).reshape(p.shape)) for p in wrt}


def grad_check_finite_diff(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences of ``f``.

    ``f`` maps a parameter vector (a Tensor) to a scalar Tensor. Each
    coordinate's error is divided by max(|analytic|, |numeric|, floor) with
    floor = 1e-3 of the largest numeric component, so coordinates whose true
    gradient is zero are not judged on roundoff alone.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(as_tensor(point).data, dtype=np.float64)
    p = Tensor(x0.copy(), requires_grad=True)
    out = f(p)
    analytic = eval_and_grad(out, [p])[p].data.reshape(-1)
    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            vals = []
            for step in (h, -h):
                xp = flat.copy()
                xp[i] += step
                v = f(Tensor(xp.reshape(x0.shape))).data
                if not np.all(np.isfinite(v)):
                    raise NumericalError(f"f is not finite at coordinate {i} offset {step}")
                vals.append(float(v.reshape(-1)[0]))
            numeric[i] = (vals[0] - vals[1]) / (2.0 * h)
    floor = max(1e-3 * float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))
