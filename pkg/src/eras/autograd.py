"""A small reverse-mode differentiation engine over float64 numpy arrays.

Each ``Tensor`` produced by a primitive with at least one differentiable input
records its parents and a closure computing the input adjoints. ``backward``
topologically sorts that record (the tape), runs it once in reverse, and then
releases it; a second ``backward`` over the same tape raises.

Shapes are explicit: the only implicit broadcasting is a Python/0-d scalar
against a tensor. Use ``broadcast_to`` for anything else. Tensors are limited
to rank 3.

Complex values are carried as (real, imag) tensor pairs; see ``cmul`` and
``cabs``.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

MAX_RANK = 3


class TapeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, _op: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensors are limited to rank {MAX_RANK}, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._consumed = False

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

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
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, reciprocal(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    if isinstance(x, Tensor):
        return x.data.ndim == 0
    return np.ndim(x) == 0


def _node(data, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward_fn, op)


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (use broadcast_to)")


def _unscalar(g: np.ndarray, like: Tensor) -> np.ndarray:
    # reduce an adjoint back onto a scalar operand
    if like.data.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")

    def bw(g):
        return _unscalar(g, a), _unscalar(g, b)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")

    def bw(g):
        return _unscalar(g, a), _unscalar(-g, b)

    return _node(a.data - b.data, (a, b), bw, "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unscalar(g * bd, a), _unscalar(g * ad, b)

    return _node(ad * bd, (a, b), bw, "mul")


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.data

    def bw(g):
        return (-g * out * out,)

    return _node(out, (a,), bw, "reciprocal")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def tabs(a) -> Tensor:
    """|a| with subgradient 0 at 0."""
    a = as_tensor(a)
    s = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def floor_at(a, floor: float) -> Tensor:
    """max(a, floor); adjoint is zero wherever the floor is active (a <= floor)."""
    a = as_tensor(a)
    live = a.data > floor
    return _node(np.where(live, a.data, floor), (a,), lambda g: (g * live,), "floor")


def relu(a) -> Tensor:
    a = as_tensor(a)
    live = a.data > 0
    return _node(a.data * live, (a,), lambda g: (g * live,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def cabs(re, im, floor: float = 0.0) -> Tensor:
    """Floored magnitude max(sqrt(re^2 + im^2), floor) of a complex pair.

    Bins at or below the floor get a zero adjoint. With ``floor=0`` exact
    zeros also get a zero adjoint.
    """
    re, im = as_tensor(re), as_tensor(im)
    _check_same(re, im, "cabs")
    mag = np.hypot(re.data, im.data)
    live = mag > floor
    out = np.where(live, mag, floor)
    safe = np.where(live, mag, 1.0)

    def bw(g):
        gl = np.where(live, g / safe, 0.0)
        return gl * re.data, gl * im.data

    return _node(out, (re, im), bw, "cabs")


# --------------------------------------------------------------------------
# reductions


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(a.data.sum(axis=axis), (a,), bw, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def var(a, axis: int) -> Tensor:
    """Population variance (divide by the axis length) along ``axis``."""
    a = as_tensor(a)
    n = a.shape[axis]
    centred = a.data - a.data.mean(axis=axis, keepdims=True)
    out = (centred**2).mean(axis=axis)

    def bw(g):
        return (2.0 / n * np.expand_dims(g, axis) * centred,)

    return _node(out, (a,), bw, "var")


def l1_distance(a, b) -> Tensor:
    """sum |a - b| over all elements; subgradient 0 where a == b."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance: shapes {a.shape} and {b.shape} differ")
    s = np.sign(a.data - b.data)
    return _node(np.abs(a.data - b.data).sum(), (a, b), lambda g: (g * s, -g * s), "l1")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """2-D @ 2-D, or batched 3-D @ 3-D with equal batch size."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul: need two 2-D or two 3-D operands, got {a.shape} and {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch sizes differ ({a.shape[0]} vs {b.shape[0]})")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _node(ad @ bd, (a, b), bw, "matmul")


def solve(A, B) -> Tensor:
    """X = A^{-1} B for square A [.., n, n] and B [.., n, r].

    Adjoint: B_bar = A^{-T} X_bar and A_bar = -B_bar X^T.
    """
    A, B = as_tensor(A), as_tensor(B)
    if A.ndim != B.ndim or A.shape[-1] != A.shape[-2] or A.shape[:-1] != B.shape[:-1]:
        raise ShapeError(f"solve: incompatible shapes {A.shape} and {B.shape}")
    X = np.linalg.solve(A.data, B.data)

    def bw(g):
        gb = np.linalg.solve(np.swapaxes(A.data, -1, -2), g)
        return -gb @ np.swapaxes(X, -1, -2), gb

    return _node(X, (A, B), bw, "solve")


# --------------------------------------------------------------------------
# structural


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    key = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in key)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), bw, "getitem")


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw, "concat")


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the adjoint sums over expanded axes."""
    a = as_tensor(a)
    old = a.shape
    lead = len(shape) - len(old)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(old) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _node(np.broadcast_to(a.data, shape).copy(), (a,), bw, "broadcast")


def stack_frames(a, k_past: int, k_future: int) -> Tensor:
    """[F, T] -> [F, T, K] with out[f, t, k] = a[f, t - k_past + k], zero outside.

    Tap order along the last axis is oldest frame first:
    [t - k_past, ..., t, ..., t + k_future].
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"stack_frames expects [F, T], got {a.shape}")
    out = _stack(a.data, k_past, k_future)

    def bw(g):
        return (_unstack(g, k_past, k_future),)

    return _node(out, (a,), bw, "stack_frames")


def _unstack(g: np.ndarray, k_past: int, k_future: int) -> np.ndarray:
    # adjoint of _stack: [F, T, K] -> [F, T]
    n_freq, n_frames, _ = g.shape
    out = np.zeros((n_freq, n_frames), dtype=g.dtype)
    for k in range(k_past + 1 + k_future):
        d = k - k_past
        lo, hi = max(0, -d), min(n_frames, n_frames - d)
        out[:, lo + d : hi + d] += g[:, lo:hi, k]
    return out


def _stack(x: np.ndarray, k_past: int, k_future: int) -> np.ndarray:
    padded = np.pad(x, ((0, 0), (k_past, k_future)))
    return np.lib.stride_tricks.sliding_window_view(padded, k_past + 1 + k_future, axis=1).copy()


def custom(data: np.ndarray, parents: Sequence, backward_fn: Callable, op: str = "custom") -> Tensor:
    """Record a fused operation with a hand-written adjoint.

    ``backward_fn(g)`` must return one adjoint (or None) per parent.
    """
    return _node(np.asarray(data, dtype=np.float64), tuple(as_tensor(p) for p in parents), backward_fn, op)


def stop_gradient(a) -> Tensor:
    return as_tensor(a).detach()


# --------------------------------------------------------------------------
# complex pairs


def cmul(ar, ai, br, bi) -> tuple[Tensor, Tensor]:
    """(ar + i ai)(br + i bi) as a (real, imag) pair."""
    return sub(mul(ar, br), mul(ai, bi)), add(mul(ar, bi), mul(ai, br))


# --------------------------------------------------------------------------
# backward


def backward(root: Tensor, grad=None) -> None:
    if root._consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if not root.requires_grad:
        raise TapeError("backward called on a tensor with no recorded tape")
    if grad is None:
        if root.data.size != 1:
            raise TapeError("backward on a non-scalar needs an explicit output gradient")
        grad = np.ones_like(root.data)
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._consumed:
            raise TapeError("graph contains a node from an already consumed tape")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(root): np.asarray(grad, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            gp = np.asarray(gp, dtype=np.float64)
            if gp.shape != p.shape:
                gp = gp.reshape(p.shape)
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, floor_frac: float = 1e-3) -> float:
    """Worst elementwise relative error between reverse-mode and central differences.

    The relative error of element i is |a_i - d_i| / max(|a_i|, |d_i|, floor),
    with ``floor = floor_frac * max|d|`` so that near-zero components of a
    gradient are judged against the gradient's overall scale.
    """
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    out.backward()
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        num_flat[i] = (fp - fm) / (2 * h)
    scale = max(floor_frac * np.max(np.abs(numeric)), 1e-300)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)
    return float(np.max(np.abs(analytic - numeric) / denom))
