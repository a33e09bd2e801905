"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array. Operations record themselves on the active
Tape (opened with a ``with Tape():`` block) whenever any input requires a
gradient; ``backward`` replays the tape once in reverse. With no tape open,
every op is a plain numpy computation, which is what evaluation-time
forward passes on frozen models use.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class AxisError(ValueError):
    """Axis argument outside the operand's rank."""


class TapeError(RuntimeError):
    """Tape misuse: backward without a tape, double backward, etc."""


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of differentiable ops; inputs always precede use."""

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: "Tensor"):
        """Fill ``grad`` on every requires-grad leaf reachable from ``loss``.

        Visits each recorded node exactly once, in reverse creation order.
        Leaves not reachable from the loss keep ``grad is None`` (read as
        zeros via ``Tensor.grad_array``).
        """
        if self._consumed:
            raise TapeError("backward already ran on this tape")
        if loss.data.shape != ():
            raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
        if loss.tape_id is None:
            raise TapeError("loss is not recorded on this tape")
        self._consumed = True
        loss.grad = np.ones((), dtype=np.float64)
        for out, inputs, backward_fn in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            for t, gi in zip(inputs, backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    # copy: closures may hand back (views of) the upstream buffer
                    t.grad = np.array(gi)
                else:
                    t.grad += gi


def backward(loss: "Tensor"):
    """Backward on the currently active tape."""
    if _ACTIVE_TAPE is None:
        raise TapeError("no active tape")
    _ACTIVE_TAPE.backward(loss)


class Tensor:
    """Dense float64 array node; ``requires_grad`` leaves accumulate grads."""

    __slots__ = ("data", "requires_grad", "grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.tape_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def grad_array(self) -> np.ndarray:
        """Gradient buffer, materialized as zeros when never touched."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar; full set of ops lives at module level
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return take_slice(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def param(data) -> Tensor:
    """Leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _record(out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape_id = len(_ACTIVE_TAPE._nodes)
        _ACTIVE_TAPE._nodes.append((out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_axis(axis, ndim):
    if axis is None:
        return
    for a in np.atleast_1d(axis):
        if not -ndim <= a < ndim:
            raise AxisError(f"axis {a} out of range for rank {ndim}")


# ---------------------------------------------------------------------------
# elementwise and broadcasting ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data / b.data)
    except ValueError:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return (ga, gb)

    return _record(out, (a, b), bwd)


def scale(a, s: float) -> Tensor:
    """Multiply by a plain float constant."""
    a = as_tensor(a)
    s = float(s)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def power(a, p: float) -> Tensor:
    """Elementwise a**p for a float constant p."""
    a = as_tensor(a)
    p = float(p)
    out = Tensor(a.data ** p)
    return _record(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(1.0 / (1.0 + np.exp(-a.data)))
    return _record(out, (a,), lambda g: (g * out.data * (1.0 - out.data),))


def quick_gelu(a) -> Tensor:
    """x * sigmoid(1.702 x); the CLIP-family activation."""
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-1.702 * a.data))
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * (s + 1.702 * a.data * s * (1.0 - s)),))


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """numpy-semantics matmul on stacks of matrices (rank >= 2 each side)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return (ga, gb)

    return _record(out, (a, b), bwd)


def affine(x, w, b) -> Tensor:
    """x @ w + b in one node (the everywhere-used projection-with-bias)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.shape[-1] != w.shape[0] or w.shape[-1] != b.shape[-1]:
        raise ShapeError(f"affine: shapes {x.shape} @ {w.shape} + {b.shape} do not conform")
    out = Tensor(x.data @ w.data + b.data)

    def bwd(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return (gx, gw, gb)

    return _record(out, (x, w, b), bwd)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is not None:
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))

    def bwd(g):
        return (np.transpose(g, None if axes is None else inv),)

    return _record(out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.broadcast_to(a.data, shape).copy())
    return _record(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    _check_axis(axis, tensors[0].ndim)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd)


def take_slice(a, key) -> Tensor:
    """Basic slicing (slices / ints); gradient scatters back into place."""
    a = as_tensor(a)
    out = Tensor(a.data[key].copy())

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _record(out, (a,), bwd)


def gather_positions(a, positions) -> Tensor:
    """Pick one entry along axis 1 per leading row: out[i] = a[i, positions[i]]."""
    a = as_tensor(a)
    pos = np.asarray(positions, dtype=np.intp)
    if pos.shape != (a.shape[0],):
        raise ShapeError(f"positions shape {pos.shape} does not match leading dim {a.shape[0]}")
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, pos].copy())

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, pos), g)
        return (full,)

    return _record(out, (a,), bwd)


def embedding(table, ids) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids outside [0, {table.shape[0]})")
    out = Tensor(table.data[ids])

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _record(out, (table,), bwd)


def masked_fill(a, mask) -> Tensor:
    """Additive -inf at True mask positions (pre-softmax masking)."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    add_term = np.where(mask, -np.inf, 0.0)
    try:
        out = Tensor(a.data + add_term)
    except ValueError:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast to {a.shape}")
    return _record(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


# ---------------------------------------------------------------------------
# reductions and normalizations
# ---------------------------------------------------------------------------


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis(axis, a.ndim)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), bwd)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis(axis, a.ndim)
    n = a.data.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).copy(),)

    return _record(out, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        return (p * (g - (p * g).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse)
    p = np.exp(out.data)

    def bwd(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learnable gain and bias.

    A zero-variance row normalizes to zeros (0 / sqrt(eps)).
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bwd(g):
        dgain = (g * xhat).sum(axis=tuple(range(g.ndim - 1)))
        dbias = g.sum(axis=tuple(range(g.ndim - 1)))
        dxhat = g * gain.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx, dgain, dbias)

    return _record(out, (x, gain, bias), bwd)


def l2_normalize(x, eps: float = 0.0) -> Tensor:
    """Rows scaled to unit L2 norm over the last axis."""
    norm = power(reduce_sum(mul(x, x), axis=-1, keepdims=True), 0.5)
    if eps:
        norm = add(norm, eps)
    return div(x, norm)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a Tensor to a scalar Tensor. Relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|).
    """
    with Tape() as tape:
        probe = param(x.data.copy())
        y = f(probe)
        if not np.isfinite(y.data):
            raise ValueError("f(x) is not finite")
        tape.backward(y)
    analytic = probe.grad_array()

    flat = x.data.copy().reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(Tensor(flat.reshape(x.shape))).data)
        flat[i] = orig - h
        lo = float(f(Tensor(flat.reshape(x.shape))).data)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * h)
    numeric = numeric.reshape(x.shape)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
