import numpy as np
import pytest

from tadprop.decoder import (Decoder, DecoderConfig, Heads, MultiheadAttention, decoder_forward,
                             heads_forward, segments_from_center_width)
from tadprop.boundary import Memory
from tadprop.numerics import DimensionError, sinusoidal_table


def _named(module):
    return dict(module.named_parameters())


def test_degenerate_attention_is_uniform_average():
    d = 4
    attn = MultiheadAttention(d, 1, np.random.default_rng(0))
    p = _named(attn)
    for name in ("q.w", "k.w", "q.b", "k.b", "v.b", "o.b"):
        p[name].data[...] = 0.0
    p["v.w"].data[...] = np.eye(d)
    p["o.w"].data[...] = np.eye(d)
    rng = np.random.default_rng(1)
    query = rng.normal(size=(1, 3, d))
    memory = rng.normal(size=(1, 7, d))
    out, w = attn(query, memory, memory)
    np.testing.assert_allclose(out.data[0], np.tile(memory[0].mean(axis=0), (3, 1)), atol=1e-12)
    np.testing.assert_allclose(w, 1.0 / 7)


def test_attention_key_mask():
    attn = MultiheadAttention(4, 2, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    mem = rng.normal(size=(1, 5, 4))
    mask = np.array([[1, 1, 1, 0, 0]])
    _, w = attn(rng.normal(size=(1, 2, 4)), mem, mem, mask)
    np.testing.assert_allclose(w[..., 3:], 0.0, atol=1e-300)
    np.testing.assert_allclose(w.sum(-1), 1.0)


def test_attention_width_check():
    attn = MultiheadAttention(4, 2, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        attn(np.ones((1, 2, 4)), np.ones((1, 3, 6)), np.ones((1, 3, 6)))


def _decoder(n_q=5, seed=0, pos_mode="attn"):
    return Decoder(DecoderConfig(2, 2, 8, 16), n_q, np.random.default_rng(seed), pos_mode)


@pytest.mark.parametrize("T", [1, 9, 30])
def test_decoder_shape(T):
    dec = _decoder()
    mem = Memory(np.random.default_rng(0).normal(size=(T, 8)), sinusoidal_table(T, 8))
    assert decoder_forward(dec, mem).shape == (1, 5, 8)


def test_decoder_rejects_bad_memory():
    dec = _decoder()
    with pytest.raises(DimensionError):
        dec(np.ones((4, 6)), None)
    with pytest.raises(DimensionError):
        dec(np.ones((0, 8)), None)


@pytest.mark.parametrize("pos_mode", ["attn", "input", "none"])
def test_query_permutation_equivariance(pos_mode):
    dec = _decoder(pos_mode=pos_mode)
    rng = np.random.default_rng(2)
    mem = rng.normal(size=(1, 11, 8))
    pos = sinusoidal_table(11, 8)
    base = dec(mem, pos).data
    perm = np.array([3, 0, 4, 1, 2])
    dec.query_embed.data[...] = dec.query_embed.data[perm]
    np.testing.assert_allclose(dec(mem, pos).data, base[:, perm], atol=1e-12)


def test_decoder_trace_records_every_layer():
    dec = _decoder()
    trace = []
    dec(np.random.default_rng(0).normal(size=(1, 6, 8)), sinusoidal_table(6, 8), trace=trace)
    assert len(trace) == 2
    w_self, w_cross = trace[0]
    assert w_self.shape == (1, 5, 5) and w_cross.shape == (1, 5, 6)


def test_center_width_parametrization():
    np.testing.assert_allclose(segments_from_center_width(0.5, 0.5), (0.25, 0.75))
    ts, te = segments_from_center_width(0.1, 0.5)
    assert ts == 0.0 and te == pytest.approx(0.35)


def test_zero_heads():
    heads = Heads(6, np.random.default_rng(0))
    for p in heads.parameters():
        p.data[...] = 0.0
    preds = heads_forward(heads, np.random.default_rng(1).normal(size=(4, 6)))
    assert len(preds) == 4
    for p in preds:
        assert (p.t_start, p.t_end, p.p_bc, p.p_c) == (0.25, 0.75, 0.5, 0.5)


def test_heads_ranges():
    heads = Heads(6, np.random.default_rng(0))
    out = heads(np.random.default_rng(1).normal(size=(2, 7, 6)) * 5)
    for k in ("t_start", "t_end", "p_bc", "p_c"):
        assert out[k].shape == (2, 7)
        assert np.all((out[k].data >= 0) & (out[k].data <= 1))
    assert np.all(out["t_start"].data <= out["t_end"].data)


def test_completeness_head_sees_neighbours():
    heads = Heads(6, np.random.default_rng(0))
    h = np.random.default_rng(1).normal(size=(1, 5, 6))
    a = heads(h)["p_c"].data
    h2 = h.copy()
    h2[0, 2] += 1.0
    b = heads(h2)["p_c"].data
    # kernel 3 over queries: rows 1..3 change, rows 0 and 4 do not
    assert np.allclose(a[0, [0, 4]], b[0, [0, 4]])
    assert not np.allclose(a[0, 1:4], b[0, 1:4])
