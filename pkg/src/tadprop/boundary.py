"""Boundary scoring and boundary-attentive memory encoding.

A small temporal conv net (TEM) predicts per-step start/end probabilities.
At inference they are min-max normalized per window, scaled by ``alpha_r``,
multiplied into the features, position-tagged and passed through an MLP.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .numerics import MLP, Conv1d, DimensionError, Linear, Module, Tensor, sinusoidal_table
from .numerics.tensor import tensor as T_
from .numerics.tensor import clip, concat, log, relu, sigmoid

PROB_EPS = 1e-12


class PreconditionError(ValueError):
    pass


@dataclass
class BoundaryScores:
    p_start: np.ndarray
    p_end: np.ndarray

    def __post_init__(self):
        self.p_start = np.asarray(self.p_start, dtype=float)
        self.p_end = np.asarray(self.p_end, dtype=float)
        if self.p_start.shape != self.p_end.shape:
            raise ValueError("start and end scores differ in length")

    def __len__(self) -> int:
        return self.p_start.shape[-1]


class TEM(Module):
    """Three kernel-3 temporal convolutions; the last emits (start, end) logits."""

    def __init__(self, c_in: int, hidden: int = 128, kernel: int = 3,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.kernel = kernel
        self.c1 = self.add_child("c1", Conv1d(c_in, hidden, kernel, rng, gain=2.0))
        self.c2 = self.add_child("c2", Conv1d(hidden, hidden, kernel, rng, gain=2.0))
        self.c3 = self.add_child("c3", Conv1d(hidden, 2, kernel, rng))

    def __call__(self, x) -> Tensor:
        """x: (..., T, C) -> probabilities (..., T, 2)."""
        x = T_(x)
        if x.shape[-2] < self.kernel:
            raise DimensionError(f"TEM needs at least {self.kernel} steps, got {x.shape[-2]}")
        h = relu(self.c1(x))
        h = relu(self.c2(h))
        return sigmoid(self.c3(h))


def tem_forward(tem: TEM, features) -> BoundaryScores:
    """Boundary probabilities for one (T, C) sequence."""
    vals = features.values if hasattr(features, "values") else np.asarray(features)
    p = tem(vals).data
    return BoundaryScores(p[..., 0], p[..., 1])


def boundary_labels(T: int, gt_segments, expansion: float = 0.1) -> np.ndarray:
    """Per-step (start, end) 0/1 targets, shape (T, 2).

    ``gt_segments`` are (start, end) in [0, 1] window coordinates. Each
    boundary b of an instance of duration d (in steps) marks every step
    [t, t+1) that intersects [b - expansion*d, b + expansion*d].
    """
    if expansion <= 0:
        raise PreconditionError("expansion must be positive")
    gts = np.asarray(gt_segments, dtype=float).reshape(-1, 2) * T
    lab = np.zeros((T, 2))
    lo = np.arange(T, dtype=float)
    for s, e in gts:
        w = expansion * (e - s)
        for ch, b in ((0, s), (1, e)):
            lab[(lo < b + w) & (lo + 1 > b - w), ch] = 1.0
    return lab


def balanced_bce(prob: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Class-balanced binary cross-entropy over all entries of one channel.

    Positives and negatives each get half the total weight, so a constant
    0.5 prediction scores ln 2 regardless of the class ratio.
    """
    target = np.asarray(target, dtype=float)
    mask = np.ones_like(target) if mask is None else np.asarray(mask, dtype=float)
    n = mask.sum()
    n_pos = (target * mask).sum()
    n_neg = n - n_pos
    w_pos = 0.5 * n / n_pos if n_pos > 0 else 0.0
    w_neg = 0.5 * n / n_neg if n_neg > 0 else 0.0
    if n_pos == 0 or n_neg == 0:
        # one class only: its term carries the full weight
        w_pos, w_neg = (n / n_pos if n_pos else 0.0), (n / n_neg if n_neg else 0.0)
    p = clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    wp = w_pos * target * mask
    wn = w_neg * (1.0 - target) * mask
    ll = log(p) * wp + log(1.0 - p) * wn
    return ll.sum() * (-1.0 / n)


def tem_loss(probs, gt_segments_per_window, expansion: float = 0.1,
             mask: np.ndarray | None = None) -> Tensor:
    """Sum of balanced BCE on the start and end channels.

    probs: (B, T, 2) or (T, 2) tensor, or BoundaryScores. ``gt_segments_per_window``
    lists window-coordinate segments for each window (or one list when unbatched).
    """
    if isinstance(probs, BoundaryScores):
        probs = Tensor(np.stack([probs.p_start, probs.p_end], axis=-1))
    probs = T_(probs)
    batched = probs.ndim == 3
    gts_list = gt_segments_per_window if batched else [gt_segments_per_window]
    T = probs.shape[-2]
    labels = []
    for g in gts_list:
        if len(np.asarray(g).reshape(-1, 2)) == 0:
            raise PreconditionError("training window has no ground truth")
        labels.append(boundary_labels(T, g, expansion))
    lab = np.stack(labels) if batched else labels[0]
    m = np.ones(lab.shape[:-1]) if mask is None else np.asarray(mask, dtype=float)
    return balanced_bce(probs[..., 0], lab[..., 0], m) + balanced_bce(probs[..., 1], lab[..., 1], m)


def normalize_and_scale(scores, alpha_r: float = 2.0, mask: np.ndarray | None = None):
    """Min-max normalize each channel over the window, then scale by alpha_r.

    Accepts BoundaryScores or an array of shape (..., T). Constant channels
    map to 0.5 * alpha_r.
    """
    if alpha_r <= 0:
        raise ValueError("alpha_r must be positive")
    if isinstance(scores, BoundaryScores):
        return BoundaryScores(normalize_and_scale(scores.p_start, alpha_r, mask),
                              normalize_and_scale(scores.p_end, alpha_r, mask))
    x = np.asarray(scores, dtype=float)
    valid = np.ones(x.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask) > 0, x.shape)
    lo = np.where(valid, x, np.inf).min(axis=-1, keepdims=True)
    hi = np.where(valid, x, -np.inf).max(axis=-1, keepdims=True)
    span = hi - lo
    flat = span <= 0
    out = np.where(flat, 0.5, (x - lo) / np.where(flat, 1.0, span))
    return out * alpha_r


def enhance(features, scaled: BoundaryScores | np.ndarray) -> np.ndarray:
    """Row t -> (p_start[t] * f_t) || (p_end[t] * f_t).

    ``scaled`` is BoundaryScores or an array (..., T, 2).
    """
    f = features.values if hasattr(features, "values") else np.asarray(features, dtype=float)
    if isinstance(scaled, BoundaryScores):
        s, e = scaled.p_start, scaled.p_end
    else:
        s, e = scaled[..., 0], scaled[..., 1]
    if s.shape[-1] != f.shape[-2]:
        raise DimensionError(f"scores length {s.shape[-1]} != feature length {f.shape[-2]}")
    return np.concatenate([f * s[..., None], f * e[..., None]], axis=-1)


class MemoryEncoder(Module):
    """Per-step encoder that turns boundary-weighted features into decoder memory.

    Default order: weight features by scaled boundary scores, concatenate the
    sinusoidal position table, then a 3-layer MLP. ``placement="project_first"``
    runs the MLP on raw features first and weights its output instead.
    """

    def __init__(self, c_in: int, d_model: int, d_pos: int = 32, rng=None,
                 placement: str = "enhance_first", enhancement: str = "multiply",
                 pos_mode: str = "concat"):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.placement, self.enhancement, self.pos_mode = placement, enhancement, pos_mode
        self.d_pos = d_pos
        self.c_in = c_in
        if placement == "enhance_first":
            width = 2 * c_in if enhancement == "multiply" else c_in + 2
            self.enh_width = width
            in_dim = width + (d_pos if pos_mode == "concat" else 0)
            self.mlp = self.add_child("mlp", MLP([in_dim, d_model, d_model, d_model], rng))
        else:
            in_dim = c_in + (d_pos if pos_mode == "concat" else 0)
            self.enh_width = c_in
            self.mlp = self.add_child("mlp", MLP([in_dim, d_model, d_model, d_model], rng))
            width = 2 * d_model if enhancement == "multiply" else d_model + 2
            self.post = self.add_child("post", Linear(width, d_model, rng))

    def _with_pos(self, x: np.ndarray | Tensor, pos: np.ndarray) -> Tensor:
        x = T_(x)
        if self.pos_mode == "none":
            return x
        if self.pos_mode == "add":
            table = sinusoidal_table(x.shape[-2], x.shape[-1]) if pos.shape[-1] != x.shape[-1] else pos
            return x + table
        table = np.broadcast_to(pos, x.shape[:-1] + (pos.shape[-1],))
        return concat([x, Tensor(table)], axis=-1)

    def _weight(self, x, scaled: np.ndarray):
        if self.enhancement == "multiply":
            if isinstance(x, Tensor):
                return concat([x * scaled[..., 0:1], x * scaled[..., 1:2]], axis=-1)
            return enhance(x, scaled)
        if isinstance(x, Tensor):
            return concat([x, Tensor(scaled)], axis=-1)
        return np.concatenate([x, scaled], axis=-1)

    def __call__(self, features: np.ndarray, scaled: np.ndarray, pos: np.ndarray | None = None) -> Tensor:
        """features (..., T, C); scaled (..., T, 2) in [0, alpha_r]; pos (T, d_pos)."""
        T = features.shape[-2]
        if pos is None:
            pos = sinusoidal_table(T, self.d_pos)
        if self.placement == "enhance_first":
            return self.mlp(self._with_pos(self._weight(features, scaled), pos))
        h = self.mlp(self._with_pos(features, pos))
        return self.post(self._weight(h, scaled))


@dataclass
class Memory:
    values: Tensor  # (..., T, d_model)
    pos: np.ndarray  # (T, d_model) table used at decoder attention


def encode_memory(encoder: MemoryEncoder, features, scaled, d_model: int,
                  pos_offset: int = 0) -> Memory:
    """Encode one window and attach the decoder-side position table."""
    f = features.values if hasattr(features, "values") else np.asarray(features, dtype=float)
    if isinstance(scaled, BoundaryScores):
        scaled = np.stack([scaled.p_start, scaled.p_end], axis=-1)
    T = f.shape[-2]
    enc_pos = sinusoidal_table(T, encoder.d_pos, offset=pos_offset)
    return Memory(encoder(f, scaled, enc_pos), sinusoidal_table(T, d_model, offset=pos_offset))


def write_boundary_csv(path, scores: BoundaryScores, seconds_per_step: float = 1.0,
                       offset: int = 0) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "p_start", "p_end"])
        for i, (s, e) in enumerate(zip(scores.p_start, scores.p_end)):
            w.writerow([repr((offset + i) * seconds_per_step), repr(float(s)), repr(float(e))])
