"""ARX tokenisation: patching, RevIN, exogenous mixing and interleaving.

Layout conventions used throughout the package:

* raw windows are ``(B, L_I, C)``;
* patches are ``(B, C, N, L_P)``;
* tokens are ``(B, C, 2N, d)`` with the exogenous token of patch ``i`` at
  position ``2i`` and the endogenous token at ``2i + 1``.  Downstream the
  channel axis is folded into the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

STD_FLOOR = 1e-5


def pad_length(L_I: int, L_P: int) -> int:
    return (-L_I) % L_P


def patchify(x, L_P: int):
    """Left-pad with zeros to a multiple of ``L_P`` and cut into patches.

    ``x`` is ``(L_I, C)`` or ``(B, L_I, C)``; returns ``(patches, P)`` with
    patches shaped ``(C, N, L_P)`` or ``(B, C, N, L_P)``.
    """
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1] < 1:
        raise ShapeError(f"patchify expects (B, L_I, C) with L_I >= 1, got {x.shape}")
    if L_P < 1:
        raise ConfigError("L_P must be >= 1")
    B, L_I, C = x.shape
    P = pad_length(L_I, L_P)
    if P:
        x = np.concatenate([np.zeros((B, P, C), dtype=x.dtype), x], axis=1)
    N = (L_I + P) // L_P
    patches = x.reshape(B, N, L_P, C).transpose(0, 3, 1, 2)
    return (patches[0] if single else patches), P


@dataclass
class RevinStats:
    mean: np.ndarray  # (..., C, N, 1)
    std: np.ndarray  # (..., C, 1, 1) or (..., C, N, 1)


def revin_normalize(patches, P: int = 0, mean_mode: str = "token", std_mode: str = "window"):
    """Normalise patches; returns ``(normalized, RevinStats)``.

    ``mean_mode="token"`` subtracts each token's own mean, ``"window"`` the
    per-channel mean of the whole window.  ``std_mode`` selects between the
    whole-window per-channel std and a per-token std.  Padding is excluded
    from the window statistics.  Stds are floored at ``STD_FLOOR``.
    """
    patches = np.asarray(patches)
    shape = patches.shape
    flat = patches.reshape(shape[:-2] + (-1,))[..., P:]  # (..., C, L_I)
    if mean_mode == "token":
        mean = patches.mean(axis=-1, keepdims=True)
    elif mean_mode == "window":
        mean = np.broadcast_to(flat.mean(axis=-1)[..., None, None], shape[:-1] + (1,)).copy()
    else:
        raise ConfigError(f"unknown RevIN mean mode {mean_mode!r}")
    if std_mode == "window":
        std = flat.std(axis=-1)[..., None, None]
    elif std_mode == "token":
        std = patches.std(axis=-1, keepdims=True)
    else:
        raise ConfigError(f"unknown RevIN std mode {std_mode!r}")
    std = np.maximum(std, STD_FLOOR)
    return (patches - mean) / std, RevinStats(mean, std)


def revin_denormalize(values, stats: RevinStats | None, token_index=None):
    """Undo :func:`revin_normalize`; works on arrays and on Tensors.

    ``token_index`` selects which tokens' means to use when ``values`` only
    covers some of them (for example the last token).
    """
    if stats is None:
        raise ConfigError("RevIN statistics missing; cannot de-normalise")
    mean, std = stats.mean, stats.std
    if token_index is not None:
        mean = mean[..., token_index, :]
        if std.shape[-2] != 1:
            std = std[..., token_index, :]
    if isinstance(values, Tensor):
        return values * std.astype(values.dtype) + mean.astype(values.dtype)
    return values * std + mean


def interleave(exo, endo):
    """Merge two ``(..., N, d)`` streams into ``(..., 2N, d)``, exogenous first."""
    if isinstance(exo, Tensor) or isinstance(endo, Tensor):
        st = ad.stack([exo, endo], axis=-2)
        return st.reshape(*st.shape[:-3], -1, st.shape[-1])
    st = np.stack([exo, endo], axis=-2)
    return st.reshape(st.shape[:-3] + (-1, st.shape[-1]))


def deinterleave(tokens):
    """Inverse of :func:`interleave`; returns ``(exo, endo)``."""
    if isinstance(tokens, Tensor):
        return ad.getitem(tokens, (Ellipsis, slice(0, None, 2), slice(None))), \
            ad.getitem(tokens, (Ellipsis, slice(1, None, 2), slice(None)))
    return tokens[..., 0::2, :], tokens[..., 1::2, :]


@dataclass
class TokenBatch:
    tokens: Tensor  # (B, C, 2N, d)
    stats: RevinStats
    P: int
    N: int

    @property
    def endo_index(self) -> np.ndarray:
        return np.arange(1, 2 * self.N, 2)

    def folded(self) -> Tensor:
        B, C, T, d = self.tokens.shape
        return self.tokens.reshape(B * C, T, d)


def build_arx_tokens(patches_norm, w: dict, stats: RevinStats | None = None, P: int = 0,
                     use_pos: bool = True) -> TokenBatch:
    """Project normalised patches ``(B, C, N, L_P)`` to interleaved ARX tokens.

    ``w`` must hold ``W_tok`` (d, L_P), ``W_ex`` (C, C), ``pos_emb`` (2N_max, d)
    and ``chan_emb`` (C, d).  The exogenous input of channel ``j`` is
    ``sum_c W_ex[c, j] * patch_c``.
    """
    x = patches_norm if isinstance(patches_norm, Tensor) else Tensor(patches_norm)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    B, C, N, L_P = x.shape
    W_tok, W_ex = w["W_tok"], w["W_ex"]
    if W_tok.shape[1] != L_P or W_ex.shape != (C, C):
        raise ShapeError(f"tokenizer weights W_tok {W_tok.shape}, W_ex {W_ex.shape} "
                         f"do not fit patches {x.shape}")
    endo = ad.matmul(x, W_tok.T)  # (B, C, N, d)
    mixed = ad.einsum("bcnp,ce->benp", x, W_ex)
    exo = ad.matmul(mixed, W_tok.T)
    tok = interleave(exo, endo)
    if use_pos:
        pos = w["pos_emb"]
        if pos.shape[0] < 2 * N:
            raise ShapeError(f"sequence of {2 * N} tokens exceeds the position table ({pos.shape[0]})")
        tok = tok + ad.getitem(pos, slice(0, 2 * N))
    tok = tok + w["chan_emb"].reshape(C, 1, -1)
    return TokenBatch(tok, stats, P, N)


def project_out(endo_outputs, w: dict, stats: RevinStats | None, token_index=None):
    """Map endogenous outputs ``(..., N, d)`` to de-normalised patches ``(..., N, L_P)``."""
    pred = ad.matmul(endo_outputs, w["W_out"].T)
    return revin_denormalize(pred, stats, token_index)


def tokenize(x, L_P: int, w: dict, mean_mode: str = "token", std_mode: str = "window",
             dtype=np.float64) -> TokenBatch:
    """Raw windows ``(B, L_I, C)`` to a :class:`TokenBatch` (convenience pipeline)."""
    patches, P = patchify(np.asarray(x, dtype=dtype), L_P)
    if patches.ndim == 3:
        patches = patches[None]
    norm, stats = revin_normalize(patches, P, mean_mode, std_mode)
    return build_arx_tokens(Tensor(norm.astype(dtype)), w, stats, P)
