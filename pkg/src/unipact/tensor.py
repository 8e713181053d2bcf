"""Dense float32 tensors with tape-free reverse-mode differentiation.

Every differentiable op returns a :class:`Tensor` holding references to its
inputs and a closure that maps the output gradient to input gradients.
:func:`backward` orders the reachable graph topologically and runs each
closure once.

Shapes are explicit: binary elementwise ops require equal shapes, except
for a scalar operand.  Bias addition over rows uses :func:`add_bias`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import kernels
from .kernels import _pykernels

DTYPE = np.float32
_kern = kernels  # compiled when available; the NumPy reference in float64 mode


class ShapeError(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def precision(dtype):
    """Compute in ``dtype`` inside the block.

    float64 routes every op through the NumPy reference kernels; it exists
    for finite-difference gradient checks.
    """
    global DTYPE, _kern
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    prev = DTYPE, _kern
    DTYPE, _kern = dtype, (kernels if dtype is np.float32 else _pykernels)
    try:
        yield
    finally:
        DTYPE, _kern = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    # -- convenience -------------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    out.grad = None
    out.name = ""
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    # never update in place: ``g`` may be shared with another parent
    if t.grad is None:
        t.grad = g if g.dtype == DTYPE else g.astype(DTYPE)
    else:
        t.grad = t.grad + g


# -- graph ------------------------------------------------------------------


class Graph:
    """Topologically ordered view of the nodes reachable from a root."""

    def __init__(self, root: Tensor):
        order = []
        seen = set()
        stack = [(root, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.nodes = order  # inputs before outputs

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior nodes release their buffers; leaves keep grads
            node._backward = None
            node._parents = ()
            node.grad = None if node.op != "leaf" else node.grad


# -- elementwise --------------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=DTYPE).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a))
        _accum(b, _unbroadcast(g, b))

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a))
        _accum(b, _unbroadcast(-g, b))

    return _result(a.data - b.data, (a, b), bw, "sub")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: _accum(a, -g), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b))

    return _result(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return _result(a.data * c, (a,), lambda g: _accum(a, g * c), "scale")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: _accum(a, g * y), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.log(x), (a,), lambda g: _accum(a, g / x), "log")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: _accum(a, g * (1.0 - y * y)), "tanh")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0).astype(DTYPE), (a,), lambda g: _accum(a, g * pos), "relu")


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    y, t = _kern.gelu_forward(x)

    def bw(g):
        _accum(a, _kern.gelu_backward(x, t, g))

    return _result(y, (a,), bw, "gelu")


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.shape, dtype=DTYPE) >= rate).astype(DTYPE) * DTYPE(1.0 / (1.0 - rate))
    return _result(a.data * keep, (a,), lambda g: _accum(a, g * keep), "dropout")


# -- reductions & shape -------------------------------------------------------


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def bw(g):
        _accum(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum(dtype=np.float64), dtype=DTYPE), (a,), bw, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size

    def bw(g):
        _accum(a, np.broadcast_to(g / DTYPE(n), a.shape))

    return _result(np.asarray(a.data.mean(dtype=np.float64), dtype=DTYPE), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(old)), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: _accum(a, g.transpose(inv)), "transpose")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(p, np.ascontiguousarray(g[tuple(idx)]))

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, bw, "concat")


def take_rows(a: Tensor, index) -> Tensor:
    """``a[index]`` along the first axis (gather); gradients scatter-add."""
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            _accum(a, full)

    return _result(a.data[index], (a,), bw, "take_rows")


embedding = take_rows


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (..., k, n) with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` over the last axis; ``w`` is (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match weight {w.shape}")
        y += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            _accum(x, (g2 @ w.data).reshape(x.shape))
        if w.requires_grad:
            _accum(w, g2.T @ x2)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))

    return _result(y.reshape(lead + (w.shape[0],)), parents, bw, "linear")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a (d,) bias to every row of (..., d)."""
    if b.shape != (x.shape[-1],):
        raise ShapeError(f"add_bias: bias {b.shape} does not match width {x.shape[-1]}")

    def bw(g):
        _accum(x, g)
        if b.requires_grad:
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _result(x.data + b.data, (x, b), bw, "add_bias")


# -- normalisation & probabilities -------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm: gamma/beta must match the last dimension")
    x2 = x.data.reshape(-1, d)
    y, xhat, rstd = _kern.layer_norm_forward(x2, gamma.data, beta.data, eps)

    def bw(g):
        g2 = g.reshape(-1, d)
        dx, dgamma, dbeta = _kern.layer_norm_backward(g2, xhat, rstd, gamma.data)
        _accum(x, dx.reshape(x.shape))
        _accum(gamma, dgamma)
        _accum(beta, dbeta)

    return _result(y.reshape(x.shape), (x, gamma, beta), bw, "layer_norm")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (row-max subtracted)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (x,), bw, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        _accum(x, g - np.exp(y) * g.sum(axis=-1, keepdims=True))

    return _result(y, (x,), bw, "log_softmax")


class NoSupervisedPositions(ValueError):
    pass


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean of ``-log softmax(logits)[t, target_t]`` over positions where mask is true.

    Unmasked rows contribute neither loss nor gradient; their target ids are
    never read.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (T, V) logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != (logits.shape[0],) or mask.shape != targets.shape:
        raise ShapeError("cross_entropy: targets and mask must have one entry per row")
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise NoSupervisedPositions("no supervised positions: answer mask is empty")
    tgt = targets[rows]
    z = logits.data[rows].astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(rows.size), tgt].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(rows.size), tgt] -= 1.0
        full = np.zeros(logits.shape, dtype=DTYPE)
        full[rows] = (p * (float(g) / rows.size)).astype(DTYPE)
        _accum(logits, full)

    return _result(np.asarray(loss, dtype=DTYPE), (logits,), bw, "cross_entropy")


def causal_mask(t: int) -> np.ndarray:
    return np.tri(t, dtype=bool)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention over (B, H, T, dh) tensors.

    ``mask`` is a bool array broadcastable to (B, H, T, T); True marks the
    key positions a query may attend to.
    """
    if not (q.shape == k.shape == v.shape) or q.ndim != 4:
        raise ShapeError(f"attention expects equal (B, H, T, dh) shapes, got {q.shape}, {k.shape}, {v.shape}")
    dh = q.shape[-1]
    sc = DTYPE(1.0 / math.sqrt(dh))
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * sc
    p = _kern.softmax_rows(s, mask)
    out = p @ v.data

    def bw(g):
        if v.requires_grad:
            _accum(v, np.swapaxes(p, -1, -2) @ g)
        dp = g @ np.swapaxes(v.data, -1, -2)
        ds = _kern.softmax_rows_backward(p, dp) * sc
        if q.requires_grad:
            _accum(q, ds @ k.data)
        if k.requires_grad:
            _accum(k, np.swapaxes(ds, -1, -2) @ q.data)

    return _result(out, (q, k, v), bw, "attention")


def parameters_with_grad(params: Iterable[Tensor]) -> list:
    return [p for p in params if p.requires_grad]
