"""Temporal IoU, the set-prediction matcher and relaxed label assignment."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RELAX_MODES = ("threshold_cls_loc", "threshold_cls", "top1_cls_loc")


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class CostWeights:
    alpha: float = 1.0  # l1 term
    beta: float = 5.0  # tIoU term
    gamma: float = 2.0  # classification term

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise MatchingError("cost weights must be nonnegative")


@dataclass
class Assignment:
    """Per-query ground-truth index (or None) plus relaxation bookkeeping.

    ``relaxed[n]`` is True when query n is positive only through relaxation.
    ``relaxed_loc`` says whether relaxed positives also feed the boundary loss.
    """
    pairs: list
    relaxed: list = field(default_factory=list)
    relaxed_loc: bool = True

    def __post_init__(self):
        if not self.relaxed:
            self.relaxed = [False] * len(self.pairs)

    @property
    def positives(self) -> set[int]:
        return {n for n, g in enumerate(self.pairs) if g is not None}

    @property
    def n_pos(self) -> int:
        return len(self.positives)

    def strict_pairs(self) -> dict[int, int]:
        return {n: g for n, g in enumerate(self.pairs) if g is not None and not self.relaxed[n]}

    def loc_pairs(self) -> dict[int, int]:
        """Query -> ground truth pairs that contribute to the boundary loss."""
        return {n: g for n, g in enumerate(self.pairs)
                if g is not None and (self.relaxed_loc or not self.relaxed[n])}


# ---------------------------------------------------------------------------
# tIoU

def tiou(a, b) -> float:
    """Temporal IoU of two (start, end) intervals; 0 when the union is empty."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def tiou_matrix(segs_a, segs_b) -> np.ndarray:
    """Pairwise tIoU, shape (len(segs_a), len(segs_b))."""
    a = np.asarray(segs_a, dtype=float).reshape(-1, 2)
    b = np.asarray(segs_b, dtype=float).reshape(-1, 2)
    inter = np.clip(np.minimum(a[:, None, 1], b[None, :, 1])
                    - np.maximum(a[:, None, 0], b[None, :, 0]), 0.0, None)
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


# ---------------------------------------------------------------------------
# matcher cost

def match_cost(pred_segment, p_bc: float, gt_segment, w: CostWeights = CostWeights()) -> float:
    l1 = abs(pred_segment[0] - gt_segment[0]) + abs(pred_segment[1] - gt_segment[1])
    return w.alpha * l1 - w.beta * tiou(pred_segment, gt_segment) - w.gamma * p_bc


def cost_matrix(pred_segments, p_bc, gt_segments, w: CostWeights = CostWeights()) -> np.ndarray:
    """Matcher cost for every (prediction, ground truth) pair, shape (N_p, N_g)."""
    p = np.asarray(pred_segments, dtype=float).reshape(-1, 2)
    g = np.asarray(gt_segments, dtype=float).reshape(-1, 2)
    l1 = np.abs(p[:, None, :] - g[None, :, :]).sum(-1)
    return (w.alpha * l1 - w.beta * tiou_matrix(p, g)
            - w.gamma * np.asarray(p_bc, dtype=float).reshape(-1, 1))


def linear_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of every row to a distinct column.

    Shortest augmenting path with dual potentials, O(n^2 m). Requires
    rows <= columns. Returns the column chosen for each row.
    """
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    if n > m:
        raise MatchingError(f"more rows ({n}) than columns ({m})")
    if n == 0:
        return np.zeros(0, dtype=int)
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # owner[j]: 1-based row holding column j; 0 = free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cols = np.nonzero(free)[0]
            cur = cost[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            k = int(np.argmin(minv[cols]))
            j1 = int(cols[k])
            delta = minv[j1]
            used_idx = np.nonzero(used)[0]
            u[owner[used_idx]] += delta
            v[used_idx] -= delta
            minv[cols] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    rows_to_col = np.empty(n, dtype=int)
    for j in range(1, m + 1):
        if owner[j]:
            rows_to_col[owner[j] - 1] = j - 1
    return rows_to_col


def hungarian_match(pred_segments, p_bc, gt_segments, w: CostWeights = CostWeights(),
                    cost: np.ndarray | None = None) -> Assignment:
    """Bipartite match of ground truths onto predictions at minimum total cost.

    Unmatched predictions pair with the empty target at zero cost, so only the
    matched pairs enter the objective.
    """
    n_p = len(np.asarray(p_bc).reshape(-1)) if cost is None else cost.shape[0]
    n_g = len(np.asarray(gt_segments).reshape(-1, 2)) if cost is None else cost.shape[1]
    if n_p < n_g:
        raise MatchingError(f"need at least as many predictions ({n_p}) as ground truths ({n_g})")
    if cost is None:
        cost = cost_matrix(pred_segments, p_bc, gt_segments, w)
    pairs: list = [None] * n_p
    for g, q in enumerate(linear_assignment(cost.T)):
        pairs[int(q)] = g
    return Assignment(pairs=pairs)


def assignment_cost(assign: Assignment, cost: np.ndarray) -> float:
    return float(sum(cost[n, g] for n, g in assign.strict_pairs().items()))


def relax_assignment(sigma: Assignment, pred_segments, gt_segments, mode: str = "threshold_cls_loc",
                     threshold: float = 0.7) -> Assignment:
    """Add extra positives on top of a bipartite assignment.

    threshold modes: every unmatched prediction whose best tIoU reaches the
    threshold becomes positive for its best ground truth (lowest index on
    ties). ``threshold_cls`` keeps those additions out of the boundary loss.
    top1 mode: each ground truth's highest-tIoU prediction becomes positive.
    """
    if mode not in RELAX_MODES:
        raise MatchingError(f"unknown relaxation mode {mode!r}; expected one of {RELAX_MODES}")
    if not 0.0 < threshold <= 1.0:
        raise MatchingError(f"relaxation threshold must lie in (0, 1], got {threshold}")
    pairs = list(sigma.pairs)
    relaxed = list(sigma.relaxed)
    gts = np.asarray(gt_segments, dtype=float).reshape(-1, 2)
    if len(gts):
        iou = tiou_matrix(pred_segments, gts)
        if mode == "top1_cls_loc":
            for g in range(len(gts)):
                n = int(np.argmax(iou[:, g]))
                if pairs[n] is None and iou[n, g] > 0:
                    pairs[n] = g
                    relaxed[n] = True
        else:
            best = iou.argmax(axis=1)
            for n in range(len(pairs)):
                if pairs[n] is None and iou[n, best[n]] >= threshold:
                    pairs[n] = int(best[n])
                    relaxed[n] = True
    return Assignment(pairs=pairs, relaxed=relaxed, relaxed_loc=mode != "threshold_cls")
