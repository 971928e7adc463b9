"""Dense tensors with reverse-mode automatic differentiation on a tape.

Just enough machinery for a small transformer: batched matmul, row softmax,
layer norm, GELU, embedding lookup, concat/slice, reductions. Everything runs
in float64; gradients for non-leaf tensors are kept only when retain_grad is
set (the encoders set it on attention probabilities).
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf


class ParameterError(ValueError):
    """An argument value is outside its documented domain."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A documented precondition was violated."""


_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_TAPES: list["Tape"] = []


class Tensor:
    """A dense array node. Leaf tensors with requires_grad=True accumulate
    gradients in .grad after Tape.backward."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.retain_grad = False
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of operations; replaying it in reverse propagates
    gradients from a scalar output. One tape per thread."""

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def backward(self, out: Tensor, seed: float = 1.0):
        """Accumulate d(out)/d(leaf) into every requires_grad leaf; retained
        intermediates keep their gradients too."""
        if out.data.size != 1:
            raise ContractError(
                f"backward requires a scalar terminal, got shape {out.data.shape}"
            )
        grads: dict[int, np.ndarray] = {id(out): np.full_like(out.data, seed)}
        holders: dict[int, Tensor] = {id(out): out}
        produced: set[int] = set()
        for o, _, _ in self.ops:
            produced.add(id(o))
        for o, inputs, bwd in reversed(self.ops):
            g = grads.pop(id(o), None)
            if g is None:
                continue
            if o.retain_grad:
                o.grad = g.copy() if o.grad is None else o.grad + g
            for t, gi in zip(inputs, bwd(g)):
                if gi is None or not t.requires_grad:
                    continue
                k = id(t)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
                    holders[k] = t
        for k, g in grads.items():
            t = holders[k]
            if t.requires_grad and k not in produced:
                t.grad = g.copy() if t.grad is None else t.grad + g
            elif t.retain_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g


def _record(out: Tensor, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    out.requires_grad = any(t.requires_grad for t in inputs)
    if _TAPES and out.requires_grad:
        _TAPES[-1].ops.append((out, inputs, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise / arithmetic
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data)

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _record(out, (a, b), bwd)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)

    def bwd(g):
        return (g * c,)

    return _record(out, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)

    def bwd(g):
        return (g * y,)

    return _record(out, (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))

    def bwd(g):
        return (g / a.data,)

    return _record(out, (a,), bwd)


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x / _SQRT2))
    out = Tensor(x * phi)

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi + x * pdf),)

    return _record(out, (a,), bwd)


# ----------------------------------------------------------------------------
# linear algebra / structure
# ----------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record(out, (a, b), bwd)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.transpose(a.data, axes))
    if axes is None:
        inv = None
    else:
        inv = list(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record(out, (a,), bwd)


def swap_last(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.swapaxes(a.data, -1, -2))

    def bwd(g):
        return (np.swapaxes(g, -1, -2),)

    return _record(out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _record(out, (a,), bwd)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(out, tuple(parts), bwd)


def slice_(a, key) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data[key])

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _record(out, (a,), bwd)


def embedding(table, ids) -> Tensor:
    """Row gather: out[...] = table[ids[...]]."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), bwd)


def gather_rows(x, idx) -> Tensor:
    """out[i] = x[i, idx[i]] for a batch of row indices."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    batch = np.arange(x.data.shape[0])
    out = Tensor(x.data[batch, idx])

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (batch, idx), g)
        return (gx,)

    return _record(out, (x,), bwd)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _record(out, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ----------------------------------------------------------------------------
# normalization / softmax
# ----------------------------------------------------------------------------


def softmax_rows(m, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax over the last axis with max-subtraction stability."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    m = _as_tensor(m)
    z = m.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - inner) * y / temperature,)

    return _record(out, (m,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bwd(g):
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, ggain, gbias

    return _record(out, (x, gain, bias), bwd)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit Euclidean length."""
    x = _as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps)
    y = x.data / norm
    out = Tensor(y)

    def bwd(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * inner) / norm,)

    return _record(out, (x,), bwd)
