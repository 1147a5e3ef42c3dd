"""Model variants: SAMoVAR, the pre-norm linear Transformer and FixedVAR.

All three share the ARX tokenizer and the read-out head.  Activations use
row vectors, so a projection is ``x @ W``; the per-head structural mix is
``y @ D^-1`` exactly as in the reference algorithm.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConditioningError, ConfigError, ShapeError
from .tokenizer import patchify, pad_length, revin_normalize, build_arx_tokens, project_out

VARIANTS = ("samovar", "lintrans", "fixedvar")
INIT_STD = 0.02
# softplus(U_DIAG_INIT) == 1, so D starts at the identity when L, U are near zero
U_DIAG_INIT = math.log(math.e - 1.0)


@dataclass
class StackConfig:
    variant: str = "samovar"
    C: int = 2
    L_I: int = 64
    L_P: int = 1
    d: int | None = None
    H: int | None = None
    l: int = 3
    dropout: float = 0.1
    use_Wk: bool = False
    use_Dinv: bool = True
    qv_norm: bool = True
    next_input: str = "pre_dinv"  # or "post_dinv": what layer l+1 uses as keys
    qv_gain_init: float = 1.0
    revin_mean: str = "auto"  # token | window | auto (window when L_P == 1)
    revin_std: str = "window"
    pos_table: int | None = None  # FixedVAR q/k table length (default 512)
    dtype: str = "float32"

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d is None:
            self.d = 32 * int(math.isqrt(self.C))
        if self.H is None:
            self.H = max(1, self.d // 16) if self.variant == "samovar" else 8
        if self.pos_table is None and self.variant == "fixedvar":
            self.pos_table = max(512, self.n_tokens)
        self.validate()

    def validate(self):
        if min(self.C, self.L_I, self.L_P, self.d, self.H, self.l) < 1:
            raise ConfigError("C, L_I, L_P, d, H and l must all be positive")
        if self.d % self.H:
            raise ConfigError(f"d={self.d} is not divisible by H={self.H}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.next_input not in ("pre_dinv", "post_dinv"):
            raise ConfigError(f"next_input must be 'pre_dinv' or 'post_dinv', got {self.next_input!r}")
        if self.revin_mean not in ("token", "window", "auto") or self.revin_std not in ("token", "window"):
            raise ConfigError("bad RevIN mode")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.variant == "fixedvar" and self.pos_table < self.n_tokens:
            raise ConfigError(f"position table ({self.pos_table}) shorter than the sequence ({self.n_tokens})")

    @property
    def dh(self) -> int:
        return self.d // self.H

    @property
    def N(self) -> int:
        return (self.L_I + pad_length(self.L_I, self.L_P)) // self.L_P

    @property
    def n_tokens(self) -> int:
        return 2 * self.N

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def mean_mode(self) -> str:
        if self.revin_mean == "auto":
            return "window" if self.L_P == 1 else "token"
        return self.revin_mean

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StackConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# weights


def init_weights(cfg: StackConfig, seed: int = 0) -> dict:
    """Fresh parameters as an ordered ``name -> Tensor`` dict."""
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    d, C, L_P, H, dh = cfg.d, cfg.C, cfg.L_P, cfg.H, cfg.dh
    w = {}

    def normal(name, shape, std=INIT_STD):
        w[name] = rng.normal(0.0, std, size=shape).astype(dt)

    def const(name, shape, value):
        w[name] = np.full(shape, value, dtype=dt)

    normal("tok.W_tok", (d, L_P))
    normal("tok.W_ex", (C, C))
    const("tok.pos_emb", (cfg.n_tokens, d), 0.0)
    const("tok.chan_emb", (C, d), 0.0)
    normal("tok.W_out", (L_P, d))
    const("head.norm", (d,), 1.0)

    def mlp(prefix):
        const(f"{prefix}.norm", (d,), 1.0)
        normal(f"{prefix}.W1", (d, 4 * d))
        const(f"{prefix}.b1", (4 * d,), 0.0)
        normal(f"{prefix}.W2", (4 * d, d), INIT_STD / math.sqrt(cfg.l))
        const(f"{prefix}.b2", (d,), 0.0)

    if cfg.variant in ("samovar", "fixedvar"):
        for i in range(cfg.l):
            mlp(f"mlp.{i}")
        const("front.norm", (d,), 1.0)

    if cfg.variant == "samovar":
        for i in range(cfg.l):
            normal(f"attn.{i}.W_q", (d, d))
            normal(f"attn.{i}.W_v", (d, d))
            if cfg.use_Wk:
                normal(f"attn.{i}.W_k", (d, d))
            if cfg.qv_norm:
                const(f"attn.{i}.q_norm", (H, dh), cfg.qv_gain_init)
                const(f"attn.{i}.v_norm", (H, dh), cfg.qv_gain_init)
        if cfg.use_Dinv:
            normal("D.L", (H, dh, dh))
            U = rng.normal(0.0, INIT_STD, size=(H, dh, dh))
            U[:, np.arange(dh), np.arange(dh)] = U_DIAG_INIT
            w["D.U"] = U.astype(dt)
    elif cfg.variant == "lintrans":
        for i in range(cfg.l):
            const(f"block.{i}.attn_norm", (d,), 1.0)
            for nm in ("W_q", "W_k", "W_v", "W_o"):
                normal(f"block.{i}.{nm}", (d, d))
            mlp(f"block.{i}.mlp")
    else:  # fixedvar
        normal("fixed.q_table", (cfg.pos_table, d))
        normal("fixed.k_table", (cfg.pos_table, d))
        normal("fixed.W_v", (d, d))
        normal("fixed.W_o", (d, d))
    return {k: Tensor(v, requires_grad=True) for k, v in w.items()}


def tril_mask(dh, k=0):
    return np.tril(np.ones((dh, dh)), k)


def build_D_inverse(L_raw: Tensor, U_raw: Tensor, floor: float = 1e-8):
    """``D^-1`` per head for ``D = L U``; returns ``(Dinv, D)`` as Tensors.

    Only the strictly-lower part of ``L_raw`` and the upper part of ``U_raw``
    are used; L has a unit diagonal and U's diagonal goes through softplus.
    """
    dh = L_raw.shape[-1]
    dt = L_raw.dtype
    strict = tril_mask(dh, -1).astype(dt)
    eye = np.eye(dh, dtype=dt)
    L = L_raw * strict + eye
    diag_sel = eye
    off = U_raw * (np.triu(np.ones((dh, dh)), 1).astype(dt))
    diag = ad.softplus(U_raw * diag_sel)  # softplus(0) off the diagonal is masked below
    U = off + diag * diag_sel
    sp_diag = np.diagonal(diag.data, axis1=-2, axis2=-1)
    if np.min(sp_diag) < floor:
        raise ConditioningError(f"softplus diagonal of U fell to {np.min(sp_diag):.3g} (< {floor:g})")
    I = Tensor(np.broadcast_to(eye, L.shape).copy())
    Linv = ad.solve_triangular(L, I, lower=True, unit_diagonal=True)
    Dinv = ad.solve_triangular(U, Linv, lower=False)
    return Dinv, ad.matmul(L, U)


# ---------------------------------------------------------------------------
# building blocks


def _heads(x: Tensor, H: int) -> Tensor:
    """(G, T, d) -> (G, H, T, dh)."""
    G, T, d = x.shape
    return x.reshape(G, T, H, d // H).transpose(0, 2, 1, 3)


def _merge(x: Tensor) -> Tensor:
    """(G, H, T, dh) -> (G, T, d)."""
    G, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(G, T, H * dh)


def mlp_block(x: Tensor, w: dict, prefix: str, p: float, rng) -> Tensor:
    h = ad.rms_norm(x, w[f"{prefix}.norm"])
    h = ad.gelu(ad.matmul(h, w[f"{prefix}.W1"]) + w[f"{prefix}.b1"])
    h = ad.matmul(h, w[f"{prefix}.W2"]) + w[f"{prefix}.b2"]
    return x + ad.dropout(h, p, rng)


def mlp_front(x: Tensor, w: dict, cfg: StackConfig, rng=None) -> Tensor:
    """Position-wise residual MLP blocks then RMSNorm; ``(G, T, d) -> (G, T, d)``."""
    p = cfg.dropout if rng is not None else 0.0
    for i in range(cfg.l):
        x = mlp_block(x, w, f"mlp.{i}", p, rng)
    return ad.rms_norm(x, w["front.norm"])


def samovar_qv(X1: Tensor, w: dict, cfg: StackConfig, layer: int):
    """Per-head query and value streams ``(G, H, T, dh)`` of one layer."""
    H = cfg.H
    q = ad.matmul(X1, w[f"attn.{layer}.W_q"])
    v = ad.matmul(X1, w[f"attn.{layer}.W_v"])
    G, T, d = q.shape
    q = q.reshape(G, T, H, cfg.dh)
    v = v.reshape(G, T, H, cfg.dh)
    if cfg.qv_norm:
        q = ad.rms_norm(q, w[f"attn.{layer}.q_norm"])
        v = ad.rms_norm(v, w[f"attn.{layer}.v_norm"])
    return q.transpose(0, 2, 1, 3), v.transpose(0, 2, 1, 3)


def samovar_forward(X1: Tensor, w: dict, cfg: StackConfig, rng=None, trace: list | None = None) -> Tensor:
    """SAMoVAR attention stack on ``X1`` (G, T, d); returns the accumulated ``X~``.

    ``trace``, when a list, receives per-layer dicts with the arrays the
    explicit reconstruction needs (q, k, v, y).
    """
    H = cfg.H
    p = cfg.dropout if rng is not None else 0.0
    Dinv = build_D_inverse(w["D.L"], w["D.U"])[0] if cfg.use_Dinv else None
    Xh = _heads(X1, H)
    acc = Xh
    X = X1
    for i in range(cfg.l):
        q, v = samovar_qv(X1, w, cfg, i)
        k = _heads(ad.matmul(X, w[f"attn.{i}.W_k"]) if cfg.use_Wk else X, H)
        y = ad.causal_linear_attention(q, k, v)
        y = ad.dropout(y, p, rng)
        yt = ad.matmul(y, Dinv) if Dinv is not None else y  # per-head y @ D^-1
        acc = acc + yt
        if trace is not None:
            trace.append({"q": q.data, "k": k.data, "v": v.data, "y": y.data})
        X = _merge(yt if cfg.next_input == "post_dinv" else y)
    return _merge(acc)


def lintrans_forward(x: Tensor, w: dict, cfg: StackConfig, rng=None, trace: list | None = None) -> Tensor:
    """Pre-norm linear Transformer blocks (no softmax, no normaliser)."""
    H = cfg.H
    p = cfg.dropout if rng is not None else 0.0
    for i in range(cfg.l):
        pre = f"block.{i}"
        h = ad.rms_norm(x, w[f"{pre}.attn_norm"])
        q = _heads(ad.matmul(h, w[f"{pre}.W_q"]), H)
        k = _heads(ad.matmul(h, w[f"{pre}.W_k"]), H)
        v = _heads(ad.matmul(h, w[f"{pre}.W_v"]), H)
        if trace is not None:
            trace.append({"q": q.data, "k": k.data, "v": v.data})
        y = ad.causal_linear_attention(q, k, v)
        y = ad.matmul(_merge(y), w[f"{pre}.W_o"])
        x = x + ad.dropout(y, p, rng)
        x = mlp_block(x, w, f"{pre}.mlp", p, rng)
    return x


def fixedvar_forward(X1: Tensor, w: dict, cfg: StackConfig, rng=None, trace: list | None = None) -> Tensor:
    """One attention-shaped layer whose q and k depend on position only."""
    G, T, d = X1.shape
    H, dh = cfg.H, cfg.dh
    if T > w["fixed.q_table"].shape[0]:
        raise ShapeError(f"sequence of {T} tokens exceeds the FixedVAR position table "
                         f"({w['fixed.q_table'].shape[0]})")
    p = cfg.dropout if rng is not None else 0.0
    zeros = np.zeros((G, 1, 1, 1), dtype=X1.dtype)
    q = ad.getitem(w["fixed.q_table"], slice(0, T)).reshape(1, T, H, dh).transpose(0, 2, 1, 3) + zeros
    k = ad.getitem(w["fixed.k_table"], slice(0, T)).reshape(1, T, H, dh).transpose(0, 2, 1, 3) + zeros
    v = _heads(ad.matmul(X1, w["fixed.W_v"]), H)
    if trace is not None:
        trace.append({"q": q.data, "k": k.data, "v": v.data})
    y = ad.causal_linear_attention(q, k, v)
    y = ad.matmul(_merge(y), w["fixed.W_o"])
    return X1 + ad.dropout(y, p, rng)


# ---------------------------------------------------------------------------
# full model


@dataclass
class ForwardResult:
    pred: Tensor  # (B, C, N, L_P), de-normalised
    hidden: Tensor  # (B*C, 2N, d) stack output before the read-out norm
    X1: Tensor | None  # observation stream fed to attention (SAMoVAR/FixedVAR)
    tokens: object  # TokenBatch
    trace: list = field(default_factory=list)


class Model:
    """A model variant bound to its parameters."""

    def __init__(self, cfg: StackConfig, weights: dict | None = None, seed: int = 0):
        self.cfg = cfg
        self.w = weights if weights is not None else init_weights(cfg, seed)

    def parameters(self):
        return list(self.w.values())

    def named_parameters(self):
        return list(self.w.items())

    def tokenizer_weights(self) -> dict:
        return {k.split(".", 1)[1]: v for k, v in self.w.items() if k.startswith("tok.")}

    def tokenize(self, x):
        cfg = self.cfg
        x = np.asarray(x, dtype=cfg.np_dtype)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (cfg.L_I, cfg.C):
            raise ShapeError(f"expected windows (B, {cfg.L_I}, {cfg.C}), got {x.shape}")
        patches, P = patchify(x, cfg.L_P)
        norm, stats = revin_normalize(patches, P, cfg.mean_mode, cfg.revin_std)
        stats.mean = stats.mean.astype(cfg.np_dtype)
        stats.std = stats.std.astype(cfg.np_dtype)
        return build_arx_tokens(Tensor(norm.astype(cfg.np_dtype)), self.tokenizer_weights(), stats, P)

    def body(self, tokens: Tensor, rng=None, trace=None):
        """Token stream ``(G, 2N, d)`` -> ``(hidden, X1)``."""
        cfg, w = self.cfg, self.w
        if cfg.variant == "lintrans":
            return lintrans_forward(tokens, w, cfg, rng, trace), None
        X1 = mlp_front(tokens, w, cfg, rng)
        if cfg.variant == "samovar":
            return samovar_forward(X1, w, cfg, rng, trace), X1
        return fixedvar_forward(X1, w, cfg, rng, trace), X1

    def readout(self, hidden: Tensor, tb, B: int) -> Tensor:
        cfg = self.cfg
        endo = ad.getitem(hidden, (slice(None), slice(1, None, 2)))
        endo = ad.rms_norm(endo, self.w["head.norm"])
        endo = endo.reshape(B, cfg.C, tb.N, cfg.d)
        return project_out(endo, self.tokenizer_weights(), tb.stats)

    def forward(self, x, rng=None, trace: list | None = None) -> ForwardResult:
        """Windows ``(B, L_I, C)`` -> next-patch predictions for every patch."""
        tb = self.tokenize(x)
        B = tb.tokens.shape[0]
        hidden, X1 = self.body(tb.folded(), rng, trace)
        return ForwardResult(self.readout(hidden, tb, B), hidden, X1, tb, trace if trace is not None else [])

    def predict_last(self, x) -> np.ndarray:
        """Forecast ``(B, L_P, C)`` from the last endogenous token (no dropout)."""
        pred = self.forward(x).pred.data  # (B, C, N, L_P)
        return pred[:, :, -1, :].transpose(0, 2, 1)


def count_footprint(cfg: StackConfig, w: dict | None = None):
    """``(trainable scalar count, multiply-adds of one forward on C x 2N x d)``."""
    if w is None:
        w = init_weights(cfg, 0)
    n = 0
    for name, t in w.items():
        if name in ("D.L", "D.U"):
            H, dh, _ = t.shape
            n += H * (dh * (dh - 1) // 2 if name == "D.L" else dh * (dh + 1) // 2)
        else:
            n += t.data.size
    C, T, d, H, dh, L_P, N = cfg.C, cfg.n_tokens, cfg.d, cfg.H, cfg.dh, cfg.L_P, cfg.N
    G = C
    mlp = G * T * (2 * d * 4 * d)
    # recurrent linear attention: state update + query readout per token and head
    attn = G * H * T * (2 * dh * dh)
    flops = G * N * L_P * d * 2 + C * N * L_P * C  # tokens (endo + exo) and exogenous mixing
    flops += G * N * d * L_P  # read-out
    if cfg.variant == "samovar":
        per = G * T * 2 * d * d + attn + (G * H * T * dh * dh if cfg.use_Dinv else 0)
        if cfg.use_Wk:
            per += G * T * d * d
        flops += cfg.l * (mlp + per)
    elif cfg.variant == "lintrans":
        flops += cfg.l * (mlp + G * T * 4 * d * d + attn)
    else:
        flops += cfg.l * mlp + G * T * 2 * d * d + attn
    return n, flops
