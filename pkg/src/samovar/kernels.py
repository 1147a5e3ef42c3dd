"""Backend selection for the fast-weight kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``SAMOVAR_PURE_PYTHON=1`` to force the fallback.

Even with the extension present, short or wide inputs go to the fallback:
its masked matmuls cost O(T^2 dh) but run in BLAS, while the compiled scan
costs O(T dh^2) in plain loops.  ``benchmarks/bench_kernels.py`` puts the
crossover near ``T = 4 dh``.
"""
import os

from . import _fastweight_py

BACKEND = "python"
_impl = _fastweight_py
CROSSOVER = 4  # compiled when T >= CROSSOVER * dh

if os.environ.get("SAMOVAR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _fastweight as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"


def _pick(q):
    if _impl is not _fastweight_py and q.shape[-2] >= CROSSOVER * q.shape[-1]:
        return _impl
    return _fastweight_py


def causal_linear_attention_fwd(q, k, v):
    """``y_t = q_t @ sum_{i<=t} k_i^T v_i`` for arrays shaped ``(..., T, dh)``."""
    return _pick(q).causal_linear_attention_fwd(q, k, v)


def causal_linear_attention_bwd(q, k, v, gy):
    """Return ``(dq, dk, dv)`` given the upstream gradient ``gy``."""
    return _pick(q).causal_linear_attention_bwd(q, k, v, gy)


def backends():
    """Map backend name -> module, for benchmarks and cross-checks."""
    out = {"python": _fastweight_py}
    try:
        from . import _fastweight as _compiled
    except ImportError:
        pass
    else:
        out["compiled"] = _compiled
    return out
