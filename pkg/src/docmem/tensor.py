"""Dense tensors with reverse-mode automatic differentiation on a numpy backend.

Every op records a closure on the tape when gradient tracking is enabled and at
least one input requires a gradient. ``detach`` returns a value with no tape
linkage; ``Tensor.detach_`` severs an existing node in place so later backward
passes treat it as a constant.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class UsageError(RuntimeError):
    """Raised when a tensor operation is called in an invalid state."""


class _ThreadState(threading.local):
    grad_enabled = True


class _State:
    dtype = np.float32


_tls = _ThreadState()


class _Allocations:
    # live/peak count of values held by Tensor objects
    live = 0
    peak = 0


def get_default_dtype():
    return _State.dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev, _State.dtype = _State.dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _State.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev, _tls.grad_enabled = _tls.grad_enabled, False
    try:
        yield
    finally:
        _tls.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _tls.grad_enabled


def live_values() -> int:
    return _Allocations.live


def reset_peak_values() -> int:
    _Allocations.peak = _Allocations.live
    return _Allocations.live


def peak_values() -> int:
    return _Allocations.peak


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "_nvals", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _State.dtype:
            arr = arr.astype(_State.dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name
        self._nvals = arr.size
        _Allocations.live += arr.size
        if _Allocations.live > _Allocations.peak:
            _Allocations.peak = _Allocations.live

    def __del__(self):
        try:
            _Allocations.live -= self._nvals
        except (AttributeError, TypeError):
            pass

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self):
        self.grad = None

    # -- tape control ----------------------------------------------------
    def detach(self) -> "Tensor":
        return detach(self)

    def detach_(self) -> "Tensor":
        """Sever this node from the tape in place; it becomes a constant."""
        self._parents = ()
        self._backward = None
        self.requires_grad = False
        return self

    def backward(self):
        backward(self)

    # -- operators -------------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _tls.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# -- tape traversal --------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def _run_backward(root: Tensor, capture: dict[int, Tensor] | None, accumulate: bool) -> dict[int, np.ndarray]:
    if root.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {root.shape}")
    if not root.requires_grad:
        raise UsageError("backward called on a tensor with no tape linkage")
    captured: dict[int, np.ndarray] = {}
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if capture is not None and id(node) in capture:
            captured[id(node)] = g
        if node._backward is None:
            if accumulate:
                node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    return captured


def backward(loss: Tensor):
    """Accumulate d loss / d leaf into ``.grad`` of every reachable leaf."""
    _run_backward(loss, None, accumulate=True)


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``inputs`` (zeros if unreachable); ``.grad`` untouched."""
    capture = {id(t): t for t in inputs}
    got = _run_backward(loss, capture, accumulate=False)
    return [got.get(id(t), np.zeros_like(t.data)) for t in inputs]


# -- elementwise -------------------------------------------------------------

def _binary(a, b):
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1 + 0.044715 * x2))
    out = 0.5 * x * (1 + th)

    def bw(g):
        d_inner = _GELU_C * (1 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1 + th) + 0.5 * x * (1 - th * th) * d_inner),)

    return _make(out, (a,), bw)


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _binary(a, b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0), sa), _unbroadcast(np.where(cond, 0, g), sb)),
    )


# -- linear algebra / reductions ---------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {ad.shape} @ {bd.shape}")
    try:
        out = ad @ bd
    except ValueError as exc:
        raise ValueError(f"matmul dimension mismatch: {ad.shape} @ {bd.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if ad.ndim == 2 and g.ndim > 2:
                # shared left operand: fold the batch into the contraction
                gm = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
                bm = np.moveaxis(np.broadcast_to(bd, g.shape[:-2] + bd.shape[-2:]), -2, 0).reshape(bd.shape[-2], -1)
                ga = gm @ bm.T
            else:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and g.ndim > 2:
                am = np.broadcast_to(ad, g.shape[:-2] + ad.shape[-2:]).reshape(-1, ad.shape[-1])
                gb = am.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def expand(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, orig),))


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.data.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    shape, dtype = weight.shape, weight.data.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _make(weight.data[ids], (weight,), bw)


# -- normalisation / probability ----------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax; positions where ``mask`` is False get exactly zero weight.

    A slice with no unmasked position yields all zeros.
    """
    z = x.data
    if not np.isfinite(z).all():
        raise FloatingPointError("softmax received non-finite input")
    if axis >= z.ndim or axis < -z.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {z.ndim}")
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(z - m)
    s = np.sum(e, axis=axis, keepdims=True)
    y = e / np.where(s == 0, 1, s)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data
    m = np.max(z, axis=axis, keepdims=True)
    shifted = z - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last extent {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= p) * np.asarray(1.0 / (1.0 - p), dtype=x.data.dtype)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    ignore_index: int | None = 0,
    label_smoothing: float = 0.0,
    reduction: str = "mean",
) -> Tensor:
    """Token cross-entropy against ``(1-eps)*onehot + eps/V``; ignored targets contribute nothing."""
    z = logits.data
    V = z.shape[-1]
    flat = z.reshape(-1, V)
    t = np.asarray(targets).reshape(-1)
    valid = np.ones_like(t, dtype=bool) if ignore_index is None else t != ignore_index
    m = flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(flat - m).sum(axis=-1, keepdims=True)) + m
    logp = flat - lse
    safe_t = np.where(valid, t, 0)
    nll = -logp[np.arange(len(t)), safe_t]
    smooth = -logp.mean(axis=-1)
    per_tok = ((1 - label_smoothing) * nll + label_smoothing * smooth) * valid
    count = max(int(valid.sum()), 1)
    denom = count if reduction == "mean" else 1
    total = per_tok.sum() / denom

    def bw(g):
        q = np.full_like(flat, label_smoothing / V)
        q[np.arange(len(t)), safe_t] += 1 - label_smoothing
        gz = (np.exp(logp) - q) * (valid[:, None] * (g / denom))
        return (gz.reshape(z.shape),)

    return _make(np.asarray(total, dtype=z.dtype), (logits,), bw)


def detach(x: Tensor) -> Tensor:
    """Same values, no tape linkage."""
    return Tensor(x.data)


# -- finite-difference checking ---------------------------------------------

def numerical_gradient(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of the scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            fp = float(f().data)
        flat[i] = orig - eps
        with no_grad():
            fm = float(f().data)
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a-n| / max(|a|, |n|, floor) with floor = 1% of the largest gradient."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(n).max(initial=0.0), np.abs(a).max(initial=0.0))
    floor = max(1e-2 * scale, 1e-8)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max(initial=0.0))


def gradcheck(f: Callable[[], Tensor], inputs: Iterable[Tensor], eps: float = 1e-3) -> float:
    """Worst relative error between tape gradients and central differences over ``inputs``."""
    inputs = list(inputs)
    loss = f()
    analytic = grad(loss, inputs)
    worst = 0.0
    for x, a in zip(inputs, analytic):
        worst = max(worst, relative_error(a, numerical_gradient(f, x, eps)))
    return worst
