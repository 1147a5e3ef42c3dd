"""A small dense-tensor engine with reverse-mode differentiation.

Every primitive records its parents and a closure mapping the upstream
gradient to per-parent gradients.  :meth:`Tensor.backward` walks the graph
once in reverse topological order, accumulates into leaf ``.grad`` buffers
and then releases the graph; a second backward through a released graph
raises :class:`GraphError` (double-backward is not supported).

Leaf gradients accumulate across *different* graphs until
:func:`zero_grad` is called, which is how gradient accumulation over
micro-batches works.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular as _solve_tri

from . import kernels
from .errors import GraphError, NumericInstabilityError, ShapeError

_CHECK_FINITE = True


def set_check_finite(flag: bool) -> bool:
    """Toggle the per-op NaN/Inf guard; returns the previous setting."""
    global _CHECK_FINITE
    prev, _CHECK_FINITE = _CHECK_FINITE, bool(flag)
    return prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_released")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self._released = False

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operators --------------------------------------------------------
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

    def __rmatmul__(self, other):
        return matmul(other, self)

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

    # -- differentiation ---------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward on a tensor that does not require grad (detached graph)")
        if self._released:
            raise GraphError("backward called twice on the same graph")
        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node.op == "leaf":
                    if g is not None:
                        node.grad = g.copy() if node.grad is None else node.grad + g
                    continue
                raise GraphError(f"backward through released graph at op '{node.op}'")
            if g is None:
                continue
            pgrads = node._backward(g)
            for parent, pg in zip(node._parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node.op != "leaf":
                node._backward = None
                node._released = True
                node._parents = ()


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._released:
            raise GraphError(f"backward through released graph at op '{node.op}'")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def zero_grad(params):
    for p in params:
        p.grad = None


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = np.float64
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward, op):
    # a single reduction is far cheaper than an elementwise isfinite pass; the
    # sum is non-finite whenever any element is (overflow of the sum itself is
    # confirmed by the full check)
    if _CHECK_FINITE and not np.isfinite(np.sum(data)) and not np.all(np.isfinite(data)):
        raise NumericInstabilityError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._released = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), bw, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a):
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def softplus(a):
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype, copy=False)

    def bw(g):
        sig = np.exp(-np.logaddexp(0.0, -x)).astype(x.dtype, copy=False)
        return (g * sig,)

    return _make(out, (a,), bw, "softplus")


_GELU_C = float(np.sqrt(2.0 / np.pi))  # python float so float32 inputs stay float32


def gelu(a):
    """tanh-approximated GELU (the GPT-2 form)."""
    x = a.data
    # in-place chains keep the number of full-size temporaries small
    th = x * x
    th *= 0.044715
    th += 1.0
    th *= x
    th *= _GELU_C
    np.tanh(th, out=th)
    out = th + 1.0
    out *= x
    out *= 0.5

    def bw(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3 k x^2)
        du = x * x
        du *= 3 * 0.044715 * _GELU_C
        du += _GELU_C
        sech2 = th * th
        np.subtract(1.0, sech2, out=sech2)
        sech2 *= x
        sech2 *= du
        sech2 += th
        sech2 += 1.0
        sech2 *= 0.5
        sech2 *= g
        return (sech2,)

    return _make(out, (a,), bw, "gelu")


def abs_(a):
    x = a.data
    return _make(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(tsum(a, axis, keepdims), float(n))


def var(a, axis=None, keepdims=False):
    """Population variance (divides by n)."""
    mu = mean(a, axis, keepdims=True)
    d = a - mu
    return mean(d * d, axis, keepdims)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {ad.shape} @ {bd.shape}")
    if bd.ndim == 2 and ad.ndim > 2:
        return _matmul_flat(a, b)
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}: {exc}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def _matmul_flat(a, b):
    # (..., k) @ (k, n) as one 2-d GEMM; the weight gradient is a single GEMM too
    ad, bd = a.data, b.data
    lead = ad.shape[:-1]
    a2 = ad.reshape(-1, ad.shape[-1])
    out = (a2 @ bd).reshape(lead + (bd.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def einsum(spec, a, b):
    """Two-operand contraction over named axes.

    Each index may appear at most once per operand; every index of an operand
    must occur in the output or in the other operand.
    """
    a, b = _pair(a, b)
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for idx, other in ((ia, ib), (ib, ia)):
        if len(set(idx)) != len(idx) or any(c not in out_idx and c not in other for c in idx):
            raise ShapeError(f"einsum spec '{spec}' is outside the supported subset")
    try:
        out = np.einsum(spec, a.data, b.data, optimize=True)
    except ValueError as exc:
        raise ShapeError(f"einsum '{spec}' on {a.shape}, {b.shape}: {exc}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.einsum(f"{out_idx},{ib}->{ia}", g, bd, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_idx},{ia}->{ib}", g, ad, optimize=True) if b.requires_grad else None
        return ga, gb

    return _make(np.asarray(out), (a, b), bw, "einsum")


def solve_triangular(A, B, lower, unit_diagonal=False):
    """Solve ``A X = B`` for a (batch of) triangular ``A`` of shape (..., n, n)."""
    A, B = _pair(A, B)
    Ad, Bd = A.data, B.data
    if Ad.shape[-1] != Ad.shape[-2] or Bd.shape[-2] != Ad.shape[-1]:
        raise ShapeError(f"solve_triangular: A {Ad.shape}, B {Bd.shape}")
    lead = np.broadcast_shapes(Ad.shape[:-2], Bd.shape[:-2])
    Ab = np.broadcast_to(Ad, lead + Ad.shape[-2:])
    Bb = np.broadcast_to(Bd, lead + Bd.shape[-2:])
    X = np.empty(lead + Bd.shape[-2:], dtype=np.result_type(Ad, Bd))
    for idx in np.ndindex(*lead):
        X[idx] = _solve_tri(Ab[idx], Bb[idx], lower=lower, unit_diagonal=unit_diagonal)
    tri = np.tril if lower else np.triu

    def bw(g):
        gB = np.empty_like(X)
        for idx in np.ndindex(*lead):
            gB[idx] = _solve_tri(Ab[idx], g[idx], lower=lower, trans="T",
                                 unit_diagonal=unit_diagonal)
        gA = None
        if A.requires_grad:
            gA = -tri(np.matmul(gB, np.swapaxes(X, -1, -2)))
            if unit_diagonal:
                n = Ad.shape[-1]
                gA[..., np.arange(n), np.arange(n)] = 0.0
            gA = _unbroadcast(gA, Ad.shape)
        return gA, _unbroadcast(gB, Bd.shape) if B.requires_grad else None

    return _make(X, (A, B), bw, "solve_triangular")


def causal_linear_attention(q, k, v):
    """``y_t = q_t sum_{i<=t} k_i^T v_i`` per leading index; shapes (..., T, dh)."""
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"causal_linear_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    qd, kd, vd = q.data, k.data, v.data
    out = kernels.causal_linear_attention_fwd(qd, kd, vd)

    def bw(g):
        return kernels.causal_linear_attention_bwd(qd, kd, vd, g)

    return _make(out, (q, k, v), bw, "causal_linear_attention")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {old} -> {shape}: {exc}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i, j):
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def getitem(a, idx):
    shape, dtype = a.shape, a.dtype
    if isinstance(idx, Tensor):
        idx = idx.data

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {[t.shape for t in tensors]}: {exc}") from None
    n = len(tensors)
    return _make(out, tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


def cumsum(a, axis):
    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), bw, "cumsum")


# ---------------------------------------------------------------------------
# normalisation and regularisation


def rms_norm(x, gain=None, eps=1e-6):
    """RMS-normalise over the last axis, then scale by ``gain`` if given."""
    xd = x.data
    n = xd.shape[-1]
    ms = np.einsum("...i,...i->...", xd, xd)[..., None]
    ms /= n
    ms += eps
    r = np.sqrt(ms, out=ms)
    xhat = xd / r
    out = xhat * gain.data if gain is not None else xhat
    parents = (x,) if gain is None else (x, gain)

    def bw(g):
        gx_hat = g * gain.data if gain is not None else g
        dot = np.einsum("...i,...i->...", gx_hat, xhat)[..., None]
        dot /= n
        gx = xhat * dot
        np.subtract(gx_hat, gx, out=gx)
        gx /= r
        if gain is None:
            return (gx,)
        return gx, _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None

    return _make(out, parents, bw, "rms_norm")


def layer_norm(x, gain=None, bias=None, eps=1e-5):
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    r = np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    xhat = xc / r
    out = xhat * gain.data if gain is not None else xhat.copy()
    if bias is not None:
        out = out + bias.data
    parents = [x]
    if gain is not None:
        parents.append(gain)
    if bias is not None:
        parents.append(bias)

    def bw(g):
        gx_hat = g * gain.data if gain is not None else g
        gx = (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
              - xhat * np.mean(gx_hat * xhat, axis=-1, keepdims=True)) / r
        res = [gx]
        if gain is not None:
            res.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            res.append(_unbroadcast(g, bias.shape))
        return tuple(res)

    return _make(out, tuple(parents), bw, "layer_norm")


def dropout(x, p, rng):
    """Inverted dropout with a mask drawn from ``rng`` (a numpy Generator).

    ``p == 0`` or ``rng is None`` returns ``x`` unchanged, so evaluation
    paths never consume random numbers.
    """
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape, dtype=x.dtype) >= p).astype(x.dtype)
    keep *= 1.0 / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def mse_loss(pred, target):
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    d = pred - target
    return mean(d * d)
