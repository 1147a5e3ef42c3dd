"""Central finite-difference oracle for reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, zero_grad
from .errors import OracleInvalidError


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``x``.

    ``x.data`` is perturbed in place and restored afterwards.
    """
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def finite_diff_check(f: Callable[[], Tensor], x: Tensor | Sequence[Tensor],
                      h: float = 1e-5, eps: float = 1e-6) -> float:
    """Largest ``|g_ad - g_fd| / (|g_fd| + eps)`` over all entries of ``x``.

    ``f`` is called with no arguments and must read the current values of
    ``x``; it has to be deterministic (dropout off) and run at 64-bit.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise OracleInvalidError(f"finite differences need float64, got {t.dtype}")
    v1, v2 = f(), f()
    if not np.array_equal(v1.data, v2.data):
        raise OracleInvalidError("function is not deterministic: two evaluations disagree")

    zero_grad(xs)
    loss = f()
    if loss.requires_grad:
        loss.backward()
    worst = 0.0
    for t in xs:
        g_ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        g_fd = numeric_grad(f, t, h)
        rel = np.abs(g_ad - g_fd) / (np.abs(g_fd) + eps)
        if rel.size:
            worst = max(worst, float(rel.max()))
    zero_grad(xs)
    return worst
