# cython: language_level=3, boundscheck=False, cdivision=True
# wraparound=False is deliberately absent: combined with boundscheck=False it
# miscompiles the fused-type dispatch under Cython 3.2 (segfault on call).
"""Compiled fast-weight kernels.

Recurrent form of causal linear attention: a dh x dh state is accumulated
along time, so the cost is O(T dh^2) per sequence instead of O(T^2 dh).
Arrays are (G, T, dh), C-contiguous, float32 or float64.
"""
import numpy as np

ctypedef fused real:
    float
    double


def _fwd(real[:, :, ::1] q, real[:, :, ::1] k, real[:, :, ::1] v,
         real[:, :, ::1] y, real[:, ::1] state):
    cdef Py_ssize_t G = q.shape[0], T = q.shape[1], D = q.shape[2]
    cdef Py_ssize_t g, t, a, b
    cdef real c
    cdef real* S = &state[0, 0]
    cdef real* qt
    cdef real* kt
    cdef real* vt
    cdef real* yt
    cdef real* row
    with nogil:
        for g in range(G):
            for a in range(D * D):
                S[a] = 0
            for t in range(T):
                qt = &q[g, t, 0]
                kt = &k[g, t, 0]
                vt = &v[g, t, 0]
                yt = &y[g, t, 0]
                for b in range(D):
                    yt[b] = 0
                for a in range(D):
                    row = S + a * D
                    c = kt[a]
                    for b in range(D):
                        row[b] += c * vt[b]
                    c = qt[a]
                    for b in range(D):
                        yt[b] += c * row[b]


def _bwd(real[:, :, ::1] q, real[:, :, ::1] k, real[:, :, ::1] v,
         real[:, :, ::1] gy, real[:, :, ::1] dq, real[:, :, ::1] dk,
         real[:, :, ::1] dv, real[:, ::1] state):
    cdef Py_ssize_t G = q.shape[0], T = q.shape[1], D = q.shape[2]
    cdef Py_ssize_t g, t, a, b
    cdef real c, acc
    cdef real* S = &state[0, 0]
    cdef real* qt
    cdef real* kt
    cdef real* vt
    cdef real* gt
    cdef real* out
    cdef real* out2
    cdef real* row
    with nogil:
        for g in range(G):
            # forward sweep: dq_t = gy_t W_t^T
            for a in range(D * D):
                S[a] = 0
            for t in range(T):
                kt = &k[g, t, 0]
                vt = &v[g, t, 0]
                gt = &gy[g, t, 0]
                out = &dq[g, t, 0]
                for a in range(D):
                    row = S + a * D
                    c = kt[a]
                    acc = 0
                    for b in range(D):
                        row[b] += c * vt[b]
                        acc += gt[b] * row[b]
                    out[a] = acc
            # reverse sweep: R_t = sum_{s>=t} q_s^T gy_s
            for a in range(D * D):
                S[a] = 0
            for t in range(T - 1, -1, -1):
                qt = &q[g, t, 0]
                kt = &k[g, t, 0]
                vt = &v[g, t, 0]
                gt = &gy[g, t, 0]
                out = &dk[g, t, 0]
                out2 = &dv[g, t, 0]
                for b in range(D):
                    out2[b] = 0
                for a in range(D):
                    row = S + a * D
                    c = qt[a]
                    acc = 0
                    for b in range(D):
                        row[b] += c * gt[b]
                        acc += row[b] * vt[b]
                    out[a] = acc
                    c = kt[a]
                    for b in range(D):
                        out2[b] += c * row[b]


def causal_linear_attention_fwd(q, k, v):
    q = np.ascontiguousarray(q)
    if q.dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {q.dtype}")
    k = np.ascontiguousarray(k, dtype=q.dtype)
    v = np.ascontiguousarray(v, dtype=q.dtype)
    lead = q.shape[:-2]
    T, D = q.shape[-2], q.shape[-1]
    q3 = q.reshape(-1, T, D)
    y = np.empty_like(q3)
    state = np.empty((D, D), dtype=q.dtype)
    if q3.shape[0] and T and D:
        _fwd(q3, k.reshape(-1, T, D), v.reshape(-1, T, D), y, state)
    return y.reshape(lead + (T, D))


def causal_linear_attention_bwd(q, k, v, gy):
    q = np.ascontiguousarray(q)
    if q.dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {q.dtype}")
    k = np.ascontiguousarray(k, dtype=q.dtype)
    v = np.ascontiguousarray(v, dtype=q.dtype)
    gy = np.ascontiguousarray(gy, dtype=q.dtype)
    lead = q.shape[:-2]
    T, D = q.shape[-2], q.shape[-1]
    q3 = q.reshape(-1, T, D)
    dq = np.empty_like(q3)
    dk = np.empty_like(q3)
    dv = np.empty_like(q3)
    state = np.empty((D, D), dtype=q.dtype)
    if q3.shape[0] and T and D:
        _bwd(q3, k.reshape(-1, T, D), v.reshape(-1, T, D), gy.reshape(-1, T, D),
             dq, dk, dv, state)
    shape = lead + (T, D)
    return dq.reshape(shape), dk.reshape(shape), dv.reshape(shape)
