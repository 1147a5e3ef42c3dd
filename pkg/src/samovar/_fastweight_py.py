"""Pure numpy fast-weight kernels (fallback when the compiled module is absent).

All arrays are ``(G, T, dh)`` with G = flattened batch x heads.  The running
state ``W_t = sum_{i<=t} k_i^T v_i`` is never materialised; instead the
equivalent masked score form ``tril(q k^T) v`` is evaluated with batched
matmuls, which is what BLAS is good at.
"""
import numpy as np


def _causal_mask(T, dtype):
    return np.tril(np.ones((T, T), dtype=dtype))


def causal_linear_attention_fwd(q, k, v):
    scores = np.matmul(q, np.swapaxes(k, -1, -2))
    scores *= _causal_mask(q.shape[-2], q.dtype)
    return np.matmul(scores, v)


def causal_linear_attention_bwd(q, k, v, gy):
    mask = _causal_mask(q.shape[-2], q.dtype)
    scores = np.matmul(q, np.swapaxes(k, -1, -2))
    scores *= mask
    gs = np.matmul(gy, np.swapaxes(v, -1, -2))
    gs *= mask
    dq = np.matmul(gs, k)
    dk = np.matmul(np.swapaxes(gs, -1, -2), q)
    dv = np.matmul(np.swapaxes(scores, -1, -2), gy)
    return dq, dk, dv
