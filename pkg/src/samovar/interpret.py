"""Explicit dynamic-VAR weights, influence paths and contribution maps.

Everything here uses the column convention of the VAR reading: a layer maps
key columns ``k_i`` to outputs ``y_t = sum_i A_{t,i} k_i`` with
``A_{t,i} = v_i q_t^T`` (per head, block-diagonal across heads).  The model
code works with row vectors; the two are transposes of each other, so the
row-form mix ``y @ D^-1`` becomes ``D^-T y`` here.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .attn_stack import Model, build_D_inverse, samovar_qv
from .autodiff import Tensor
from .errors import ConfigError, PathBudgetError

PATH_BUDGET = 100_000


def _block_diag(blocks):
    """(..., H, dh, dh) -> (..., H*dh, H*dh)."""
    H, dh = blocks.shape[-3], blocks.shape[-1]
    out = np.zeros(blocks.shape[:-3] + (H * dh, H * dh), dtype=blocks.dtype)
    for h in range(H):
        out[..., h * dh:(h + 1) * dh, h * dh:(h + 1) * dh] = blocks[..., h, :, :]
    return out


@dataclass
class LayerStreams:
    q: np.ndarray  # (H, T, dh)
    v: np.ndarray  # (H, T, dh)


@dataclass
class VarWeightTensor:
    A: list  # per layer: (T, T, d, d), block-diagonal per head, zero for i > t
    B: list  # per layer: (T, T, d, d)
    C_prime: np.ndarray  # (T, T, d, d), sum of B over layers
    C_total: np.ndarray  # C_prime plus identity on the diagonal t == j
    mix: np.ndarray  # (d, d) column-form output mix D^-T (identity when disabled)
    K: list  # per layer key map (d, d): W_k^T or identity
    streams: list  # per layer LayerStreams
    H: int

    @property
    def T(self) -> int:
        return self.C_prime.shape[0]

    @property
    def d(self) -> int:
        return self.C_prime.shape[-1]

    def head_block(self, M: np.ndarray, h: int) -> np.ndarray:
        dh = self.d // self.H
        return M[..., h * dh:(h + 1) * dh, h * dh:(h + 1) * dh]

    def reconstruct(self, X1: np.ndarray) -> np.ndarray:
        """``x_t + D^-T sum_j C'_{t,j} x_j`` for a (T, d) observation stream (row output)."""
        lin = np.einsum("tjab,jb->ta", self.C_prime, X1)
        return X1 + lin @ self.mix.T


def _as_array(X1) -> np.ndarray:
    return X1.data if isinstance(X1, Tensor) else np.asarray(X1)


def _check_samovar(model: Model):
    if model.cfg.variant != "samovar":
        raise ConfigError(f"explicit VAR weights exist only for SAMoVAR, not {model.cfg.variant}")


def layer_streams(model: Model, X1) -> list:
    """Normalised q/v of every layer for a single sequence ``X1`` (T, d)."""
    _check_samovar(model)
    x = _as_array(X1)
    if x.ndim == 2:
        x = x[None]
    out = []
    for i in range(model.cfg.l):
        q, v = samovar_qv(Tensor(x), model.w, model.cfg, i)
        out.append(LayerStreams(q.data[0], v.data[0]))
    return out


def output_mix(model: Model) -> np.ndarray:
    """Column-form mixing matrix applied to each layer's output (d, d)."""
    cfg = model.cfg
    if not cfg.use_Dinv:
        return np.eye(cfg.d)
    Dinv = build_D_inverse(model.w["D.L"], model.w["D.U"])[0].data  # row form, per head
    return _block_diag(Dinv).T


def key_maps(model: Model) -> list:
    cfg = model.cfg
    if cfg.use_Wk:
        return [model.w[f"attn.{i}.W_k"].data.T.astype(np.float64) for i in range(cfg.l)]
    return [np.eye(cfg.d) for _ in range(cfg.l)]


def explicit_var_weights(model: Model, X1) -> VarWeightTensor:
    """Literal recursion ``B^(l)_{t,j} = sum_{i=j..t} A^(l)_{t,i} K^(l) M B^(l-1)_{i,j}``.

    ``M`` is the identity when the next layer reads the pre-mix outputs (the
    default), and ``D^-T`` otherwise.  Cost is O(l T^3 d^3); meant for short
    sequences and as the reference for the faster probe path.
    """
    cfg = model.cfg
    streams = layer_streams(model, X1)
    T = streams[0].q.shape[1]
    d, H = cfg.d, cfg.H
    mix = output_mix(model).astype(np.float64)
    between = mix if cfg.next_input == "post_dinv" else np.eye(d)
    Ks = key_maps(model)
    causal = np.tril(np.ones((T, T)))
    A_list, B_list = [], []
    prev = None
    for layer, st in enumerate(streams):
        # per head A[t, i] = v_i q_t^T
        Ah = np.einsum("hia,htb->tihab", st.v.astype(np.float64), st.q.astype(np.float64))
        Ah *= causal[:, :, None, None, None]
        A = _block_diag(Ah)
        AK = A @ Ks[layer]
        if prev is None:
            B = AK.copy()
        else:
            right = between @ prev  # (T, T, d, d) indexed [i, j]
            # A is zero for i > t and B^(l-1) for j > i, so the plain sum over
            # i is the causal sum over j <= i <= t
            B = np.einsum("tiab,ijbc->tjac", AK, right)
        A_list.append(A)
        B_list.append(B)
        prev = B
    Cp = np.sum(B_list, axis=0)
    Ct = Cp.copy()
    idx = np.arange(T)
    Ct[idx, idx] += np.eye(d)
    return VarWeightTensor(A_list, B_list, Cp, Ct, mix, Ks, streams, H)


def explicit_reconstruction(model: Model, X1) -> np.ndarray:
    """Forward output rebuilt from the explicit weights (row stream (T, d))."""
    x = _as_array(X1)
    x = x[0] if x.ndim == 3 else x
    return explicit_var_weights(model, x).reconstruct(x.astype(np.float64))


def probe_C_prime(model: Model, X1, probes: np.ndarray | None = None) -> np.ndarray:
    """``C'_{t,j} P`` for every (t, j) by pushing probes through the frozen stack.

    With q and v fixed the stack is linear in the key stream, so a probe
    ``P`` (d x r, default the identity) placed at source ``j`` and zero
    elsewhere comes out at position ``t`` as ``C'_{t,j} P``.  Returns
    ``(T, T, d, r)``; uses the same fast-weight kernel as the forward pass.
    """
    cfg = model.cfg
    streams = layer_streams(model, X1)
    H, dh, d = cfg.H, cfg.dh, cfg.d
    T = streams[0].q.shape[1]
    P = np.eye(d) if probes is None else np.asarray(probes, dtype=np.float64)
    r = P.shape[1]
    mix = output_mix(model).astype(np.float64)
    Ks = key_maps(model)
    # key stream z[j, p, i, :] = P[:, p] if i == j
    z = np.zeros((T, r, T, d))
    z[np.arange(T), :, np.arange(T), :] = P.T[None]
    total = np.zeros((T, r, T, d))
    for layer, st in enumerate(streams):
        keys = z @ Ks[layer].T  # row form of K z
        k = keys.reshape(T * r, T, H, dh).transpose(0, 2, 1, 3)
        q = np.broadcast_to(st.q.astype(np.float64), (T * r, H, T, dh))
        v = np.broadcast_to(st.v.astype(np.float64), (T * r, H, T, dh))
        y = kernels.causal_linear_attention_fwd(q, k, v)  # (T*r, H, T, dh)
        y = y.transpose(0, 2, 1, 3).reshape(T, r, T, d)
        total += y
        z = y @ mix.T if cfg.next_input == "post_dinv" else y
    # total[j, p, t, :] = (C'_{t,j} P[:, p])^T
    return total.transpose(2, 0, 3, 1)


# ---------------------------------------------------------------------------
# influence paths


def path_count(delta: int, l: int) -> int:
    """Number of monotone depth-``l`` paths spanning ``delta`` steps: C(delta + l - 1, l - 1)."""
    if delta < 0 or l < 1:
        raise ConfigError("path_count needs delta >= 0 and l >= 1")
    return math.comb(delta + l - 1, l - 1)


@dataclass
class InfluencePath:
    source: int
    sink: int
    depth: int
    intermediates: tuple  # i_1 >= ... >= i_{m-1}
    P: np.ndarray
    chain: tuple = ()  # dot products q . v linking consecutive layers (per-head paths)
    head: int | None = None

    @property
    def indices(self) -> tuple:
        return (self.sink,) + self.intermediates + (self.source,)


def monotone_sequences(t: int, j: int, m: int):
    """All ``t >= i_1 >= ... >= i_{m-1} >= j`` as tuples of length m-1."""
    for combo in itertools.combinations_with_replacement(range(j, t + 1), m - 1):
        yield tuple(sorted(combo, reverse=True))


def enumerate_paths(vw: VarWeightTensor, t: int, j: int, depth: int,
                    head: int | None = None, budget: int = PATH_BUDGET) -> list:
    """Every depth-``depth`` path from ``j`` to ``t`` with its product matrix.

    ``P = A^(m)_{t,i1} K^(m) A^(m-1)_{i1,i2} ... A^(1)_{i_{m-1},j} K^(1)`` (with the
    between-layer map when layers read mixed outputs).  With ``head`` set the
    per-head (dh x dh) block is returned along with the scalar chain.
    """
    if not 0 <= j <= t < vw.T:
        raise ConfigError(f"need 0 <= j <= t < T, got j={j}, t={t}, T={vw.T}")
    if not 1 <= depth <= len(vw.A):
        raise ConfigError(f"depth must lie in [1, {len(vw.A)}]")
    n = path_count(t - j, depth)
    if n > budget:
        raise PathBudgetError(f"{n} paths from {j} to {t} at depth {depth} exceed the budget of {budget}")
    AK = [A_l[..., :, :] for A_l in vw.A]
    out = []
    for mids in monotone_sequences(t, j, depth):
        idx = (t,) + mids + (j,)
        P = np.eye(vw.d)
        for s in range(depth):
            layer = depth - 1 - s
            P = P @ (AK[layer][idx[s], idx[s + 1]] @ vw.K[layer])
        chain = ()
        if head is not None:
            P = vw.head_block(P, head)
            chain = tuple(
                float(vw.streams[depth - 1 - s].q[head, idx[s]] @ vw.streams[depth - 2 - s].v[head, idx[s + 2]])
                for s in range(depth - 1))
        out.append(InfluencePath(j, t, depth, mids, P, chain, head))
    return out


def paths_between(model: Model, X1, t: int, j: int, head: int | None = None,
                  budget: int = PATH_BUDGET):
    """All paths from ``j`` to ``t`` at every depth, with global token indices.

    Paths never leave ``[j, t]``, so only that slice of the sequence is
    reconstructed; indices are shifted back afterwards.  Also returns the
    slice's VarWeightTensor (local indices).
    """
    X1 = _as_array(X1)
    if not 0 <= j <= t < X1.shape[0]:
        raise ConfigError(f"need 0 <= j <= t < T, got j={j}, t={t}, T={X1.shape[0]}")
    vw = explicit_var_weights(model, X1[j:t + 1])
    out = []
    for depth in range(1, len(vw.A) + 1):
        for p in enumerate_paths(vw, t - j, 0, depth, head=head, budget=budget):
            p.source, p.sink = j, t
            p.intermediates = tuple(i + j for i in p.intermediates)
            out.append(p)
    return out, vw


def path_mass_by_delta(C: np.ndarray) -> np.ndarray:
    """Mean |entry| of ``C[t, t - delta]`` blocks for each token lag delta."""
    T = C.shape[0]
    mass = np.zeros(T)
    for delta in range(T):
        t = np.arange(delta, T)
        mass[delta] = np.mean(np.abs(C[t, t - delta]))
    return mass


def pruning_stats(model: Model, X1, threshold: float = 1e-6, C_prime: np.ndarray | None = None) -> dict:
    """Share of near-zero ``q_t . v_i`` dot products (i <= t) per layer, and path mass per lag."""
    streams = layer_streams(model, X1)
    T = streams[0].q.shape[1]
    mask = np.tril(np.ones((T, T), dtype=bool))
    per_layer = []
    for st in streams:
        dots = np.einsum("hta,hia->hti", st.q, st.v)[:, mask]
        per_layer.append(float(np.mean(np.abs(dots) < threshold)))
    if C_prime is None:
        C_prime = probe_C_prime(model, X1)
    mass = path_mass_by_delta(C_prime)
    return {"pruned_fraction": per_layer, "mass_by_token_lag": mass.tolist(),
            "mass_by_patch_lag": fold_token_lags(mass).tolist(), "threshold": threshold}


def fold_token_lags(mass: np.ndarray) -> np.ndarray:
    """Collapse token lags to patch lags (two tokens per patch)."""
    n = (len(mass) + 1) // 2
    out = np.zeros(n)
    for delta, m in enumerate(mass):
        out[delta // 2] += m
    return out


# ---------------------------------------------------------------------------
# contribution heatmaps


def _fold_channels(tok_map: np.ndarray, W_ex: np.ndarray) -> np.ndarray:
    """Token-level maps per output channel -> patch/channel maps.

    ``tok_map`` is (C, N_out, 2N, ...) for endogenous sink tokens; returns
    (N_out, N, C_out, C_in, ...).  Endogenous sources belong to their own
    channel, exogenous ones are spread over input channels by ``W_ex``.
    """
    C = tok_map.shape[0]
    exo = tok_map[:, :, 0::2]
    endo = tok_map[:, :, 1::2]
    extra = tok_map.shape[3:]
    out = np.zeros((tok_map.shape[1], exo.shape[2], C, C) + extra)
    for c in range(C):
        out[:, :, c, c] += endo[c]
        for c_in in range(C):
            out[:, :, c, c_in] += W_ex[c_in, c] * exo[c]
    return out


def contribution_heatmap(model: Model, x_window, raw: bool = False) -> np.ndarray:
    """``W_out (D^-T C'_{t,j} + I[t=j]) W_out^T`` per (output patch, source patch, C_out, C_in).

    ``x_window`` is one raw input window (L_I, C).  The scalar per block is
    the mean |entry| unless ``raw`` is set, in which case the (L_P x L_P)
    blocks are returned as trailing axes.
    """
    _check_samovar(model)
    cfg = model.cfg
    res = model.forward(np.asarray(x_window)[None])
    X1 = res.X1.data  # (C, 2N, d)
    W_out = model.w["tok.W_out"].data.astype(np.float64)  # (L_P, d)
    mix = output_mix(model)
    maps = []
    for c in range(cfg.C):
        CP = probe_C_prime(model, X1[c], W_out.T)  # (T, T, d, L_P)
        # the key shortcut enters the residual stream unmixed
        blocks = np.einsum("pa,ab,tjbr->tjpr", W_out, mix, CP)
        idx = np.arange(CP.shape[0])
        blocks[idx, idx] += W_out @ W_out.T
        maps.append(blocks[1::2])  # endogenous sinks
    tok = np.stack(maps)  # (C, N, 2N, L_P, L_P)
    folded = _fold_channels(tok, model.w["tok.W_ex"].data.astype(np.float64))
    if raw:
        return folded
    return np.mean(np.abs(folded), axis=(-2, -1))


def lintrans_attention_map(model: Model, x_window) -> np.ndarray:
    """Layer- and head-averaged ``q_t . k_i`` map (C, 2N, 2N), causal."""
    if model.cfg.variant != "lintrans":
        raise ConfigError("averaged attention maps are exported for LinTrans checkpoints")
    trace = []
    model.forward(np.asarray(x_window)[None], trace=trace)
    T = trace[0]["q"].shape[2]
    mask = np.tril(np.ones((T, T)))
    maps = [np.einsum("ghta,ghia->ghti", tr["q"], tr["k"]).mean(axis=1) * mask for tr in trace]
    return np.mean(maps, axis=0)


def lintrans_heatmap(model: Model, x_window) -> np.ndarray:
    """LinTrans averaged attention folded to (output patch, source patch, C_out, C_in)."""
    att = lintrans_attention_map(model, x_window)  # (C, 2N, 2N)
    tok = att[:, 1::2, :]
    return np.abs(_fold_channels(tok, model.w["tok.W_ex"].data.astype(np.float64)))


def deinterleave_order(T: int) -> np.ndarray:
    """Token order with all exogenous tokens first, then all endogenous ones."""
    return np.concatenate([np.arange(0, T, 2), np.arange(1, T, 2)])


def heatmap_vs_truth(heat: np.ndarray, truth: np.ndarray, max_lag: int = 8):
    """Pair model heatmap entries with ground-truth sensitivities.

    ``heat[a, b]`` is the model's output at patch ``a`` (forecasting step
    ``a + 1``) attributed to source patch ``b``; ``truth[t, j]`` is the
    ground-truth map of the window.  Pairs with ``1 <= a + 1 - b <= max_lag``.
    """
    N = heat.shape[0]
    xs, ys = [], []
    for a in range(N - 1):
        t = a + 1
        for b in range(max(0, t - max_lag), t):
            xs.append(np.abs(heat[a, b]).ravel())
            ys.append(np.abs(truth[t, b]).ravel())
    return np.concatenate(xs), np.concatenate(ys)


# ---------------------------------------------------------------------------
# exports


def export_matrix_csv(path, M: np.ndarray, meta: dict | None = None):
    """Row-major CSV; leading ``#`` lines hold JSON metadata (shape etc.)."""
    M = np.asarray(M)
    header = {"shape": list(M.shape), **(meta or {})}
    flat = M.reshape(M.shape[0], -1) if M.ndim > 1 else M[:, None]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + json.dumps(header) + "\n")
        for row in flat:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def export_matrix_json(path, M: np.ndarray, meta: dict | None = None):
    M = np.asarray(M)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"meta": {"shape": list(M.shape), **(meta or {})}, "data": M.tolist()}, fh)


def token_label(pos: int) -> str:
    kind = "ex" if pos % 2 == 0 else "en"
    return f"{pos}:{kind}"


def paths_to_dot(paths: list, name: str = "paths") -> str:
    """Graphviz description of influence paths; edge weight = mean path-matrix entry."""
    lines = [f"digraph {name} {{", "  rankdir=LR;"]
    edges = {}
    nodes = set()
    for p in paths:
        seq = list(reversed(p.indices))  # source -> sink
        w = float(np.mean(p.P))
        for a, b in zip(seq, seq[1:]):
            edges.setdefault((a, b), []).append(w)
            nodes.update((a, b))
    for n in sorted(nodes):
        lines.append(f'  n{n} [label="{token_label(n)}"];')
    for (a, b), ws in sorted(edges.items()):
        lines.append(f'  n{a} -> n{b} [label="{np.mean(ws):.3g}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
