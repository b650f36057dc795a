"""Minimal reverse-mode automatic differentiation over numpy float64 tensors.

The op set is exactly what the encoders, manifold geometry, and losses need.
Everything runs in double precision; graphs are built eagerly and freed after
backward. Non-smooth points (clamp boundaries, hinge kinks) use subgradient 0.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True

# Derivative of acosh stays finite by evaluating it no closer to 1 than this.
ACOSH_GRAD_FLOOR = 1.0 + 1e-7
ARCSIN_GRAD_CEIL = 1.0 - 1e-7


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph: a float64 array plus backward wiring."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward

    # -- plumbing ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p._grad_relevant():
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _grad_relevant(self) -> bool:
        return self.requires_grad or self._parents

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, backward):
    track = _GRAD_ENABLED and any(p._grad_relevant() for p in parents)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, op=op, parents=tuple(parents), backward=backward)


def _accum(t: Tensor, g):
    if not t._grad_relevant():
        return  # frozen leaves and pure constants receive no gradient
    g = np.asarray(g, dtype=np.float64)
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    if t.grad is None:
        # Held by reference and never mutated in place (accumulation below
        # allocates), so sharing one upstream array between parents is safe.
        t.grad = g
    else:
        t.grad = t.grad + g


# -- arithmetic -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, "div", (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out_data = a.data**exponent

    def backward(g):
        _accum(a, g * exponent * a.data ** (exponent - 1))

    return _make(out_data, "pow", (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        # Fast path: stacked input against a plain weight matrix (the common
        # case in the encoders) collapses to two flat GEMMs.
        if a.ndim >= 2 and b.ndim == 2:
            _accum(a, g @ b.data.T)
            if a.ndim == 2:
                _accum(b, a.data.T @ g)
            else:
                d_in, d_out = b.data.shape
                _accum(b, a.data.reshape(-1, d_in).T @ g.reshape(-1, d_out))
            return
        # Promote 1-d operands to matrices so one code path covers all cases.
        ad = a.data[None, :] if a.ndim == 1 else a.data
        bd = b.data[:, None] if b.ndim == 1 else b.data
        gg = g
        if a.ndim == 1:
            gg = np.expand_dims(gg, -2)
        if b.ndim == 1:
            gg = np.expand_dims(gg, -1)
        ga = gg @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ gg
        if a.ndim == 1:
            ga = ga.reshape(-1, a.data.shape[0]).sum(axis=0) if ga.ndim > 2 else ga[..., 0, :]
        if b.ndim == 1:
            gb = gb[..., 0]
        _accum(a, _unbroadcast(np.ascontiguousarray(ga), a.data.shape))
        _accum(b, _unbroadcast(np.ascontiguousarray(gb), b.data.shape))

    return _make(out_data, "matmul", (a, b), backward)


# -- shape ops ---------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out_data, "reshape", (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        _accum(a, g.transpose(inv))

    return _make(out_data, "transpose", (a,), backward)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out_data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accum(a, full)

    return _make(out_data, "getitem", (a,), backward)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(out_data, "concat", tuple(tensors), backward)


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=axis))

    return _make(out_data, "stack", tuple(tensors), backward)


# -- reductions --------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, "sum", (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


# -- pointwise ---------------------------------------------------------------


def _pointwise(a, fn, dfn, op):
    a = as_tensor(a)
    out_data = fn(a.data)

    def backward(g):
        _accum(a, g * dfn(a.data, out_data))

    return _make(out_data, op, (a,), backward)


def exp(a) -> Tensor:
    return _pointwise(a, np.exp, lambda x, y: y, "exp")


def log(a) -> Tensor:
    return _pointwise(a, np.log, lambda x, y: 1.0 / x, "log")


def sqrt(a) -> Tensor:
    return _pointwise(a, np.sqrt, lambda x, y: 0.5 / y, "sqrt")


def cosh(a) -> Tensor:
    return _pointwise(a, np.cosh, lambda x, y: np.sinh(x), "cosh")


def sinh(a) -> Tensor:
    return _pointwise(a, np.sinh, lambda x, y: np.cosh(x), "sinh")


def tanh(a) -> Tensor:
    return _pointwise(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def acosh(a) -> Tensor:
    """acosh with the argument clamped to >= 1; derivative floored away from 1.

    Round-off can push arguments slightly below 1 for near-coincident points;
    the value clamp absorbs that and the gradient clamp keeps it finite.
    """
    a = as_tensor(a)
    arg = np.maximum(a.data, 1.0)
    # Snap arguments within round-off of 1 so d(x, x) is exactly zero.
    arg = np.where(arg - 1.0 < 1e-12, 1.0, arg)
    out_data = np.arccosh(arg)

    def backward(g):
        x = np.maximum(a.data, ACOSH_GRAD_FLOOR)
        _accum(a, g / np.sqrt(x * x - 1.0))

    return _make(out_data, "acosh", (a,), backward)


def arcsin(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.arcsin(np.clip(a.data, -1.0, 1.0))

    def backward(g):
        x = np.clip(a.data, -ARCSIN_GRAD_CEIL, ARCSIN_GRAD_CEIL)
        _accum(a, g / np.sqrt(1.0 - x * x))

    return _make(out_data, "arcsin", (a,), backward)


def arccos(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.arccos(np.clip(a.data, -1.0, 1.0))

    def backward(g):
        x = np.clip(a.data, -ARCSIN_GRAD_CEIL, ARCSIN_GRAD_CEIL)
        _accum(a, -g / np.sqrt(1.0 - x * x))

    return _make(out_data, "arccos", (a,), backward)


_SINHC_TAYLOR_CUTOFF = 1e-4


def sinhc(a) -> Tensor:
    """sinh(t)/t with the removable singularity handled by Taylor expansion."""
    a = as_tensor(a)
    x = a.data
    small = np.abs(x) < _SINHC_TAYLOR_CUTOFF
    safe = np.where(small, 1.0, x)
    out_data = np.where(small, 1.0 + x * x / 6.0 + x**4 / 120.0, np.sinh(safe) / safe)

    def backward(g):
        d = np.where(
            small,
            x / 3.0 + x**3 / 30.0,
            (np.cosh(safe) * safe - np.sinh(safe)) / (safe * safe),
        )
        _accum(a, g * d)

    return _make(out_data, "sinhc", (a,), backward)


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; subgradient 0 at and beyond the boundaries."""
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        mask &= a.data > lo
    if hi is not None:
        mask &= a.data < hi

    def backward(g):
        _accum(a, g * mask)

    return _make(out_data, "clamp", (a,), backward)


def relu(a) -> Tensor:
    return clamp(a, lo=0.0)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * cdf

    def backward(g):
        _accum(a, g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)))

    return _make(out_data, "gelu", (a,), backward)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _make(y, "softmax", (a,), backward)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    y = np.exp(out_data)

    def backward(g):
        _accum(a, g - y * g.sum(axis=axis, keepdims=True))

    return _make(out_data, "log_softmax", (a,), backward)


def layer_normalize(x, gain, bias, eps=1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Fused op: one node instead of the eight a composite would create.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out_data = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accum(x, dx)

    return _make(out_data, "layer_norm", (x, gain, bias), backward)


def embedding_lookup(table, indices) -> Tensor:
    """Row gather from a (vocab, dim) table by an integer index array."""
    table = as_tensor(table)
    indices = np.asarray(indices)
    if indices.min() < 0 or indices.max() >= table.data.shape[0]:
        raise ValueError("embedding index out of range")
    out_data = table.data[indices]

    def backward(g):
        flat_idx = indices.reshape(-1)
        flat_g = g.reshape(-1, table.data.shape[1])
        vocab = table.data.shape[0]
        if flat_idx.size * vocab <= 1 << 22:
            # One-hot GEMM scatter: much faster than np.add.at at toy vocab.
            onehot = np.zeros((flat_idx.size, vocab))
            onehot[np.arange(flat_idx.size), flat_idx] = 1.0
            _accum(table, onehot.T @ flat_g)
        else:
            full = np.zeros_like(table.data)
            np.add.at(full, flat_idx, flat_g)
            _accum(table, full)

    return _make(out_data, "embedding", (table,), backward)


def gather_rows(x, row_indices) -> Tensor:
    """out[b] = x[b, row_indices[b], :] — used for final-token pooling."""
    x = as_tensor(x)
    idx = np.asarray(row_indices)
    batch = np.arange(x.data.shape[0])
    out_data = x.data[batch, idx]

    def backward(g):
        full = np.zeros_like(x.data)
        full[batch, idx] = g
        _accum(x, full)

    return _make(out_data, "gather_rows", (x,), backward)


def l2_norm(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    return sqrt(tsum(a * a, axis=axis, keepdims=keepdims) + 1e-30)


# -- parameters and gradient checking ---------------------------------------


class ParamStore:
    """Named parameter tensors with trainable / weight-decay bookkeeping.

    Frozen parameters (not in `trainable`) never receive gradients and are
    never touched by the optimizer.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.trainable: set[str] = set()
        self.no_decay: set[str] = set()

    def add(self, name, data, trainable=True, no_decay=False):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=trainable)
        self._params[name] = t
        if trainable:
            self.trainable.add(name)
        if no_decay:
            self.no_decay.add(name)
        return t

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def trainable_items(self):
        return [(n, t) for n, t in self._params.items() if n in self.trainable]

    def set_trainable(self, name, flag: bool):
        self._params[name].requires_grad = flag
        (self.trainable.add if flag else self.trainable.discard)(name)

    def freeze_all(self):
        for name in self._params:
            self.set_trainable(name, False)

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def n_trainable(self) -> int:
        return sum(self._params[n].data.size for n in self.trainable)

    def state_arrays(self):
        return {n: t.data.copy() for n, t in self._params.items()}


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_probes: int
    worst: tuple = field(default=())

    @property
    def passed(self):
        return self.max_rel_err < 1e-4


def check_gradients(f, params, n_probes=50, h=1e-5, seed=0) -> GradCheckReport:
    """Compare analytic gradients of scalar `f()` against central differences.

    `params` maps names to trainable Tensors that `f` reads. Probes are random
    coordinates; relative error uses max(|analytic|, |numeric|) as denominator
    and counts near-zero pairs as exact agreement.

    `h` may be a single step size or a sequence. With a sequence, each probe
    is scored at its best-agreeing step: the optimal central-difference step
    depends on local curvature (favoring small steps) versus round-off noise
    relative to the gradient's magnitude (favoring large steps), while a
    genuinely wrong analytic gradient disagrees at every step size.
    """
    named = list(params.items())
    for _, t in named:
        t.grad = None
    out = f()
    out.backward()
    analytic = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in named}

    steps = (h,) if np.isscalar(h) else tuple(h)
    rng = np.random.default_rng(seed)
    sizes = np.array([t.data.size for _, t in named])
    total = int(sizes.sum())
    probes = rng.choice(total, size=min(n_probes, total), replace=False)
    offsets = np.cumsum(sizes)

    max_rel, worst = 0.0, ()
    for flat_idx in probes:
        k = int(np.searchsorted(offsets, flat_idx, side="right"))
        name, t = named[k]
        local = int(flat_idx - (offsets[k - 1] if k else 0))
        idx = np.unravel_index(local, t.data.shape)
        orig = t.data[idx]
        a = float(analytic[name][idx])
        rel_here = None
        for step in steps:
            with no_grad():
                t.data[idx] = orig + step
                f_plus = f().item()
                t.data[idx] = orig - step
                f_minus = f().item()
                t.data[idx] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            denom = max(abs(a), abs(numeric))
            rel = 0.0 if denom < 1e-8 else abs(a - numeric) / denom
            if rel_here is None or rel < rel_here[0]:
                rel_here = (rel, numeric)
        if rel_here[0] > max_rel:
            max_rel, worst = rel_here[0], (name, idx, a, rel_here[1])
    return GradCheckReport(max_rel_err=max_rel, n_probes=len(probes), worst=worst)
