import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from samovar.autodiff import Tensor
from samovar.errors import ConfigError, ShapeError
from samovar.tokenizer import (RevinStats, build_arx_tokens, deinterleave, interleave, patchify, project_out,
                               revin_denormalize, revin_normalize, tokenize)


@pytest.mark.parametrize("L_I,L_P,N,P", [(64, 1, 64, 0), (1024, 96, 11, 32), (96, 96, 1, 0)])
def test_patch_counts(L_I, L_P, N, P):
    patches, pad = patchify(np.zeros((L_I, 3)), L_P)
    assert patches.shape == (3, N, L_P) and pad == P


def test_left_padding_keeps_last_patch_complete():
    x = np.arange(1.0, 11.0)[:, None]
    patches, P = patchify(x, 4)
    assert P == 2
    np.testing.assert_array_equal(patches[0, 0], [0, 0, 1, 2])
    np.testing.assert_array_equal(patches[0, -1], [7, 8, 9, 10])


def test_constant_patch_normalises_to_zero():
    patches = np.array([[[2.0, 2.0], [5.0, 5.0]]])  # (C=1, N=2, L_P=2)
    norm, stats = revin_normalize(patches, mean_mode="token")
    np.testing.assert_array_equal(norm, 0.0)
    np.testing.assert_array_equal(stats.mean[0, :, 0], [2.0, 5.0])
    np.testing.assert_allclose(stats.std[0, 0, 0], 1.5)


def test_zero_window_uses_floor():
    norm, stats = revin_normalize(np.zeros((2, 4, 3)))
    np.testing.assert_array_equal(norm, 0.0)
    assert np.all(stats.std == 1e-5)


def test_padding_excluded_from_stats():
    x = np.array([[3.0], [5.0], [7.0]])
    patches, P = patchify(x, 2)
    _, stats = revin_normalize(patches, P, mean_mode="window")
    assert stats.mean[0, 0, 0] == pytest.approx(5.0)
    assert stats.std[0, 0, 0] == pytest.approx(np.std([3.0, 5.0, 7.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["token", "window"]), st.sampled_from(["token", "window"]),
       st.sampled_from([1, 2, 4]))
def test_revin_round_trip(seed, mean_mode, std_mode, L_P):
    x = np.random.default_rng(seed).standard_normal((3, 16, 2)) * 10 + 3
    patches, P = patchify(x, L_P)
    norm, stats = revin_normalize(patches, P, mean_mode, std_mode)
    back = revin_denormalize(norm, stats)
    assert np.max(np.abs(back - patches)) / np.max(np.abs(patches)) < 1e-6


def test_revin_errors():
    with pytest.raises(ConfigError):
        revin_normalize(np.zeros((1, 2, 2)), mean_mode="bogus")
    with pytest.raises(ConfigError):
        revin_denormalize(np.zeros(2), None)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_interleave_round_trip_exact(N, d, seed):
    rng = np.random.default_rng(seed)
    exo, endo = rng.standard_normal((2, N, d)), rng.standard_normal((2, N, d))
    tok = interleave(exo, endo)
    assert tok.shape == (2, 2 * N, d)
    np.testing.assert_array_equal(tok[:, 0], exo[:, 0])
    a, b = deinterleave(tok)
    np.testing.assert_array_equal(a, exo)
    np.testing.assert_array_equal(b, endo)


def weights(C, L_P, d, N, seed=0, W_ex=None):
    rng = np.random.default_rng(seed)
    return {"W_tok": Tensor(rng.standard_normal((d, L_P))),
            "W_ex": Tensor(np.eye(C) if W_ex is None else W_ex),
            "pos_emb": Tensor(np.zeros((2 * N, d))), "chan_emb": Tensor(np.zeros((C, d))),
            "W_out": Tensor(rng.standard_normal((L_P, d)))}


def test_identity_mixing_makes_streams_coincide():
    patches = np.random.default_rng(1).standard_normal((1, 2, 64, 1))
    tb = build_arx_tokens(patches, weights(2, 1, 8, 64))
    assert tb.tokens.shape == (1, 2, 128, 8)
    exo, endo = deinterleave(tb.tokens.data)
    np.testing.assert_array_equal(exo, endo)
    np.testing.assert_array_equal(tb.endo_index[:3], [1, 3, 5])


def test_exogenous_mixing_formula():
    rng = np.random.default_rng(2)
    W_ex = rng.standard_normal((3, 3))
    patches = rng.standard_normal((1, 3, 4, 2))
    w = weights(3, 2, 5, 4, W_ex=W_ex)
    exo, endo = deinterleave(build_arx_tokens(patches, w).tokens.data)
    W_tok = w["W_tok"].data
    for j in range(3):
        mixed = np.einsum("cnp,c->np", patches[0], W_ex[:, j])
        np.testing.assert_allclose(exo[0, j], mixed @ W_tok.T, rtol=1e-12)
    np.testing.assert_allclose(endo[0, 1], patches[0, 1] @ W_tok.T, rtol=1e-12)


def test_single_channel_exo_is_scaled_copy():
    patches = np.random.default_rng(3).standard_normal((1, 1, 3, 2))
    exo, endo = deinterleave(build_arx_tokens(patches, weights(1, 2, 4, 3, W_ex=np.array([[0.5]]))).tokens.data)
    np.testing.assert_allclose(exo, 0.5 * endo)


def test_embeddings_added_by_position_and_channel():
    w = weights(2, 1, 3, 2)
    w["pos_emb"] = Tensor(np.arange(12.0).reshape(4, 3))
    w["chan_emb"] = Tensor(np.array([[100.0] * 3, [200.0] * 3]))
    tok = build_arx_tokens(np.zeros((1, 2, 2, 1)), w).tokens.data
    np.testing.assert_array_equal(tok[0, 1, 2], [206.0, 207.0, 208.0])


def test_token_causality_at_patch_granularity():
    rng = np.random.default_rng(4)
    patches = rng.standard_normal((1, 2, 5, 2))
    w = weights(2, 2, 4, 5, W_ex=rng.standard_normal((2, 2)))
    a = build_arx_tokens(patches, w).tokens.data
    patches[:, :, 3] += 1.0
    b = build_arx_tokens(patches, w).tokens.data
    np.testing.assert_array_equal(a[..., :6, :], b[..., :6, :])
    assert not np.array_equal(a[..., 6:8, :], b[..., 6:8, :])


def test_sequence_longer_than_position_table():
    with pytest.raises(ShapeError):
        build_arx_tokens(np.zeros((1, 1, 4, 1)), weights(1, 1, 2, 2))


def test_project_out_zero_weights_gives_means():
    stats = RevinStats(np.full((2, 3, 1), 4.0), np.full((2, 1, 1), 2.0))
    out = project_out(Tensor(np.ones((2, 3, 5))), {"W_out": Tensor(np.zeros((1, 5)))}, stats)
    np.testing.assert_array_equal(out.data, 4.0)


def test_project_out_identity():
    x = np.random.default_rng(5).standard_normal((2, 3, 4))
    stats = RevinStats(np.zeros((2, 3, 1)), np.ones((2, 1, 1)))
    out = project_out(Tensor(x), {"W_out": Tensor(np.eye(4))}, stats)
    np.testing.assert_array_equal(out.data, x)


def test_full_pipeline_shapes():
    w = weights(3, 4, 8, 3)
    tb = tokenize(np.random.default_rng(6).standard_normal((2, 10, 3)), 4, w)
    assert tb.tokens.shape == (2, 3, 6, 8) and tb.P == 2 and tb.N == 3
    out = project_out(deinterleave(tb.tokens)[1], w, tb.stats)
    assert out.shape == (2, 3, 3, 4)
