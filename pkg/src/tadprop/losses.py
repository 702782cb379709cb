"""Classification, boundary and completeness losses, and per-batch assembly."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .matching import (Assignment, CostWeights, cost_matrix, hungarian_match, relax_assignment,
                       tiou_matrix)
from .numerics import Tensor
from .numerics.tensor import tensor as T_
from .numerics.tensor import absolute, clip, log, maximum, minimum, relu

PROB_EPS = 1e-12


def loss_cls(p_bc, positive, gamma: float = 2.0) -> Tensor:
    """-gamma * mean binary log-likelihood; ``positive`` marks targets of 1."""
    p = clip(T_(p_bc), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(positive, dtype=float).reshape(p.shape)
    if p.size < 1:
        raise ValueError("need at least one proposal")
    ll = log(p) * y + log(1.0 - p) * (1.0 - y)
    return ll.mean() * (-gamma)


def tiou_tensor(ts, te, gs, ge) -> Tensor:
    """Differentiable tIoU between predicted (ts, te) and fixed targets (gs, ge)."""
    ts, te = T_(ts), T_(te)
    inter = relu(minimum(te, ge) - maximum(ts, gs))
    union = (te - ts) + (np.asarray(ge) - np.asarray(gs)) - inter
    return inter / union


def loss_boundary(t_start, t_end, pairs, alpha: float = 1.0, beta: float = 5.0):
    """Mean over enabled positives of alpha*l1 + beta*(1 - tIoU).

    ``pairs`` is a list of (flat query index, (gt_start, gt_end)). Returns
    (loss, has_positives); with no positives the loss is a constant 0.
    """
    if not pairs:
        return Tensor(0.0), False
    idx = np.array([n for n, _ in pairs])
    gt = np.array([g for _, g in pairs], dtype=float).reshape(-1, 2)
    ts = T_(t_start)[idx]
    te = T_(t_end)[idx]
    l1 = absolute(ts - gt[:, 0]) + absolute(te - gt[:, 1])
    overlap = 1.0 - tiou_tensor(ts, te, gt[:, 0], gt[:, 1])
    per = l1 * alpha + overlap * beta
    return per.mean(), True


def completeness_targets(pred_segments, gt_segments) -> np.ndarray:
    """Each proposal's best tIoU over the ground truths (0 with none)."""
    p = np.asarray(pred_segments, dtype=float).reshape(-1, 2)
    g = np.asarray(gt_segments, dtype=float).reshape(-1, 2)
    if len(g) == 0:
        return np.zeros(len(p))
    return tiou_matrix(p, g).max(axis=1)


def loss_complete(p_c, targets) -> Tensor:
    """Mean squared error between completeness scores and target tIoUs."""
    p_c = T_(p_c)
    t = np.asarray(targets, dtype=float).reshape(p_c.shape)
    d = p_c - t
    return (d * d).mean()


@dataclass
class LossBundle:
    l_cls: Tensor
    l_boundary: Tensor
    l_complete: Tensor
    total: Tensor
    n_pos: int
    assignments: list = field(default_factory=list)

    def values(self) -> dict:
        return {"l_cls": float(self.l_cls.data), "l_boundary": float(self.l_boundary.data),
                "l_complete": float(self.l_complete.data), "n_pos": self.n_pos}


def assign_batch(segs: np.ndarray, p_bc: np.ndarray, gts: list, w: CostWeights,
                 relax_mode: str | None = None, threshold: float = 0.7) -> list[Assignment]:
    """Hungarian (and optionally relaxed) assignment for each window in a batch."""
    out = []
    for b, g in enumerate(gts):
        g = np.asarray(g, dtype=float).reshape(-1, 2)
        if len(g) == 0:
            out.append(Assignment([None] * segs.shape[1]))
            continue
        sigma = hungarian_match(segs[b], p_bc[b], g, w, cost=cost_matrix(segs[b], p_bc[b], g, w))
        if relax_mode is not None:
            sigma = relax_assignment(sigma, segs[b], g, relax_mode, threshold)
        out.append(sigma)
    return out


def batch_losses(out: dict, gts: list, w: CostWeights, phase: str = "strict",
                 relax_mode: str = "threshold_cls_loc", threshold: float = 0.7,
                 assignments: list | None = None) -> LossBundle:
    """Losses for one batch of model outputs.

    ``phase`` picks the objective: "strict" (Hungarian only) and
    "relaxed_finetune" minimize cls + boundary; "completeness" minimizes the
    completeness MSE. Passing ``assignments`` reuses a fixed label assignment.
    """
    ts, te, p_bc, p_c = out["t_start"], out["t_end"], out["p_bc"], out["p_c"]
    B, nq = p_bc.shape
    segs = np.stack([ts.data, te.data], axis=-1)
    zero = Tensor(0.0)
    if phase == "completeness":
        targets = np.stack([completeness_targets(segs[b], gts[b]) for b in range(B)])
        lc = loss_complete(p_c, targets)
        return LossBundle(zero, zero, lc, lc, 0, [])
    if assignments is None:
        mode = relax_mode if phase == "relaxed_finetune" else None
        assignments = assign_batch(segs, p_bc.data, gts, w, mode, threshold)
    positive = np.zeros(B * nq, dtype=bool)
    pairs = []
    for b, a in enumerate(assignments):
        g = np.asarray(gts[b], dtype=float).reshape(-1, 2)
        for n in a.positives:
            positive[b * nq + n] = True
        for n, gi in a.loc_pairs().items():
            pairs.append((b * nq + n, tuple(g[gi])))
    lcls = loss_cls(p_bc.reshape(-1), positive, w.gamma)
    lb, _ = loss_boundary(ts.reshape(-1), te.reshape(-1), pairs, w.alpha, w.beta)
    return LossBundle(lcls, lb, zero, lcls + lb, int(positive.sum()), assignments)
