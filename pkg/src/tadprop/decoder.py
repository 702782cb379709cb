"""Query-based transformer decoder and the three prediction heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import MLP, Conv1d, DimensionError, LayerNorm, Linear, Module, Tensor, softmax_stable
from .numerics.tensor import tensor as T_
from .numerics.tensor import clip, relu, sigmoid, swapaxes

NEG_INF = -1e9


@dataclass
class DecoderConfig:
    layers: int = 6
    heads: int = 4
    d_model: int = 64
    d_ffn: int = 256

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")


@dataclass
class ProposalPrediction:
    t_start: float
    t_end: float
    p_bc: float
    p_c: float


class MultiheadAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.d, self.h = d_model, heads
        self.q = self.add_child("q", Linear(d_model, d_model, rng))
        self.k = self.add_child("k", Linear(d_model, d_model, rng))
        self.v = self.add_child("v", Linear(d_model, d_model, rng))
        self.o = self.add_child("o", Linear(d_model, d_model, rng))

    def _split(self, x: Tensor) -> Tensor:
        # (B, N, d) -> (B, h, N, d/h)
        b, n, _ = x.shape
        return swapaxes(x.reshape(b, n, self.h, self.d // self.h), 1, 2)

    def __call__(self, query, key, value, key_mask: np.ndarray | None = None):
        """query (B, Nq, d), key/value (B, T, d); key_mask (B, T) with 1 = keep.

        Returns (output (B, Nq, d), head-averaged weights (B, Nq, T) as numpy).
        """
        query, key, value = T_(query), T_(key), T_(value)
        if key.shape[-1] != self.d or query.shape[-1] != self.d:
            raise DimensionError(f"attention width mismatch: expected {self.d}, "
                                 f"got query {query.shape[-1]} / key {key.shape[-1]}")
        b, nq, _ = query.shape
        q = self._split(self.q(query))
        k = self._split(self.k(key))
        v = self._split(self.v(value))
        scores = (q @ swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.d // self.h))
        if key_mask is not None:
            scores = scores + np.where(np.asarray(key_mask) > 0, 0.0, NEG_INF)[:, None, None, :]
        attn = softmax_stable(scores, axis=-1)
        out = swapaxes(attn @ v, 1, 2).reshape(b, nq, self.d)
        return self.o(out), attn.data.mean(axis=1)


class DecoderLayer(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        super().__init__()
        self.self_attn = self.add_child("self_attn", MultiheadAttention(cfg.d_model, cfg.heads, rng))
        self.cross_attn = self.add_child("cross_attn", MultiheadAttention(cfg.d_model, cfg.heads, rng))
        self.ffn = self.add_child("ffn", MLP([cfg.d_model, cfg.d_ffn, cfg.d_model], rng))
        self.n1 = self.add_child("n1", LayerNorm(cfg.d_model))
        self.n2 = self.add_child("n2", LayerNorm(cfg.d_model))
        self.n3 = self.add_child("n3", LayerNorm(cfg.d_model))

    def __call__(self, tgt, query_pos, memory, mem_pos, mem_mask=None, trace=None):
        qk = tgt + query_pos
        sa, w_self = self.self_attn(qk, qk, tgt)
        tgt = self.n1(tgt + sa)
        key = memory if mem_pos is None else memory + mem_pos
        ca, w_cross = self.cross_attn(tgt + query_pos, key, memory, mem_mask)
        tgt = self.n2(tgt + ca)
        tgt = self.n3(tgt + self.ffn(tgt))
        if trace is not None:
            trace.append((w_self, w_cross))
        return tgt


class Decoder(Module):
    """Stack of post-norm decoder layers driven by learned query embeddings.

    Query embeddings act as positions: they are added to the inputs of both
    attentions but never to the values, and the content stream starts at zero.
    ``pos_mode``: "attn" adds memory positions to cross-attention keys only;
    "input" adds them to the memory itself; "none" drops them.
    """

    def __init__(self, cfg: DecoderConfig, n_queries: int, rng: np.random.Generator,
                 pos_mode: str = "attn"):
        super().__init__()
        self.cfg = cfg
        self.pos_mode = pos_mode
        self.query_embed = self.add_param("query_embed", rng.standard_normal((n_queries, cfg.d_model)))
        self.layers = [self.add_child(f"layer{i}", DecoderLayer(cfg, rng)) for i in range(cfg.layers)]

    @property
    def n_queries(self) -> int:
        return self.query_embed.shape[0]

    def __call__(self, memory, mem_pos: np.ndarray | None, mem_mask=None, trace=None) -> Tensor:
        memory = T_(memory)
        if memory.ndim == 2:
            memory = memory.reshape(1, *memory.shape)
        if memory.shape[-1] != self.cfg.d_model:
            raise DimensionError(f"memory width {memory.shape[-1]} != d_model {self.cfg.d_model}")
        if memory.shape[-2] == 0:
            raise DimensionError("memory is empty")
        b = memory.shape[0]
        if self.pos_mode == "input" and mem_pos is not None:
            memory = memory + mem_pos
            mem_pos = None
        elif self.pos_mode == "none":
            mem_pos = None
        tgt = Tensor(np.zeros((b, self.n_queries, self.cfg.d_model)))
        for layer in self.layers:
            tgt = layer(tgt, self.query_embed, memory, mem_pos, mem_mask, trace)
        return tgt


def decoder_forward(decoder: Decoder, memory, trace=None) -> Tensor:
    """Run the decoder on a boundary Memory (values + positional table)."""
    return decoder(memory.values, memory.pos, trace=trace)


def segments_from_center_width(center, width):
    """(center, width) -> clamped (t_start, t_end); works on tensors or arrays."""
    if isinstance(center, Tensor) or isinstance(width, Tensor):
        ts = clip(center - width * 0.5, 0.0, 1.0)
        te = clip(center + width * 0.5, 0.0, 1.0)
        return ts, te
    c, w = np.asarray(center, dtype=float), np.asarray(width, dtype=float)
    return np.clip(c - w / 2, 0.0, 1.0), np.clip(c + w / 2, 0.0, 1.0)


class Heads(Module):
    """Boundary (3-layer FFN), classification (linear) and completeness heads.

    The completeness head convolves across the query axis (kernel 3) before a
    fully connected layer, so each score sees neighbouring proposals.
    """

    def __init__(self, d_model: int, rng: np.random.Generator):
        super().__init__()
        self.boundary = self.add_child("boundary", MLP([d_model, d_model, d_model, 2], rng))
        self.cls = self.add_child("cls", Linear(d_model, 1, rng))
        self.comp_conv = self.add_child("comp_conv", Conv1d(d_model, d_model, 3, rng, gain=2.0))
        self.comp_fc = self.add_child("comp_fc", Linear(d_model, 1, rng))

    @property
    def completeness_params(self):
        return self.comp_conv.parameters() + self.comp_fc.parameters()

    def __call__(self, h) -> dict:
        h = T_(h)
        cw = sigmoid(self.boundary(h))
        ts, te = segments_from_center_width(cw[..., 0], cw[..., 1])
        p_bc = sigmoid(self.cls(h))[..., 0]
        p_c = sigmoid(self.comp_fc(relu(self.comp_conv(h))))[..., 0]
        return {"t_start": ts, "t_end": te, "p_bc": p_bc, "p_c": p_c}


def heads_forward(heads: Heads, dec_out) -> list[ProposalPrediction]:
    """Predictions for a single window's decoder output (N_q, d_model)."""
    dec_out = T_(dec_out)
    out = heads(dec_out)
    ts, te = out["t_start"].data, out["t_end"].data
    pb, pc = out["p_bc"].data, out["p_c"].data
    return [ProposalPrediction(float(a), float(b), float(c), float(d))
            for a, b, c, d in zip(ts.reshape(-1), te.reshape(-1), pb.reshape(-1), pc.reshape(-1))]
