"""Proposal and detection metrics: AR@AN, AUC, mAP, false-positive profile, Soft-NMS."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .matching import tiou_matrix

log = logging.getLogger(__name__)

FP_BUCKETS = ("tp", "duplicate", "localization", "background")


def tiou_thresholds(lo: float = 0.5, hi: float = 1.0, step: float = 0.05) -> np.ndarray:
    n = int(round((hi - lo) / step)) + 1
    return np.round(lo + step * np.arange(n), 10)


THUMOS_THRESHOLDS = tiou_thresholds(0.5, 1.0, 0.05)
ANET_THRESHOLDS = tiou_thresholds(0.5, 0.95, 0.05)


def _segs(items) -> np.ndarray:
    rows = [(p.start_sec, p.end_sec) if hasattr(p, "start_sec") else (p[0], p[1]) for p in items]
    return np.asarray(rows, dtype=float).reshape(-1, 2)


@dataclass
class RecallTable:
    an: np.ndarray  # (A,)
    thresholds: np.ndarray  # (K,)
    recall: np.ndarray  # (A, K) pooled recall at each AN and threshold
    n_gt: int

    @property
    def ar(self) -> np.ndarray:
        return self.recall.mean(axis=1)

    def at(self, an: int, threshold: float | None = None) -> float:
        i = int(np.nonzero(self.an == an)[0][0])
        if threshold is None:
            return float(self.ar[i])
        k = int(np.nonzero(np.isclose(self.thresholds, threshold))[0][0])
        return float(self.recall[i, k])

    def check_monotone(self) -> None:
        if np.any(np.diff(self.recall, axis=0) < -1e-12):
            raise AssertionError("AR decreased with AN")


def ar_at_an(proposals: dict, gts: dict, thresholds=THUMOS_THRESHOLDS, an_list=None) -> RecallTable:
    """Corpus-pooled recall of the top-AN proposals per video.

    ``proposals`` maps video id -> proposals sorted by descending score
    (ScoredProposal objects or (start, end) pairs); ``gts`` maps video id ->
    ground-truth intervals. Videos without ground truth are skipped.
    """
    thresholds = np.asarray(thresholds, dtype=float)
    an_list = np.arange(1, 101) if an_list is None else np.asarray(an_list, dtype=int)
    hits = np.zeros((len(an_list), len(thresholds)))
    n_gt = 0
    for vid in sorted(gts):
        g = _segs(gts[vid])
        if len(g) == 0:
            continue
        n_gt += len(g)
        p = _segs(proposals.get(vid, []))
        if len(p) == 0:
            continue
        best = np.maximum.accumulate(tiou_matrix(p, g), axis=0)  # (P, G)
        rows = np.minimum(an_list, len(p)) - 1
        hits += (best[rows][:, :, None] >= thresholds[None, None, :]).sum(axis=1)
    recall = hits / n_gt if n_gt else hits
    table = RecallTable(an_list, thresholds, recall, n_gt)
    table.check_monotone()
    return table


def auc(table: RecallTable) -> float:
    """Trapezoidal area under AR vs AN, scaled to [0, 100]."""
    ar = table.ar
    an = table.an.astype(float)
    if len(an) == 1:
        return float(100.0 * ar[0])
    area = np.sum((ar[1:] + ar[:-1]) * np.diff(an)) / 2.0
    return float(100.0 * area / (an[-1] - an[0]))


# ---------------------------------------------------------------------------
# detection mAP

def interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """All-point interpolated average precision."""
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def average_precision(dets: list, gts: list, threshold: float) -> float:
    """AP for one class. dets: (video, start, end, score); gts: (video, start, end)."""
    if not gts:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: -dets[i][3])
    by_video: dict = {}
    for j, g in enumerate(gts):
        by_video.setdefault(g[0], []).append(j)
    claimed = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        vid, s, e = dets[i][:3]
        cand = by_video.get(vid, [])
        if not cand:
            continue
        ious = tiou_matrix([(s, e)], [gts[j][1:3] for j in cand])[0]
        for k in np.argsort(-ious, kind="stable"):
            if ious[k] < threshold:
                break
            if claimed[cand[k]]:
                continue
            claimed[cand[k]] = True
            tp[rank] = 1.0
            break
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(dets) + 1)
    recall = ctp / len(gts)
    return interpolated_ap(precision, recall) if len(dets) else 0.0


def map_metric(detections: list, gts: list, thresholds=(0.3, 0.4, 0.5, 0.6, 0.7)) -> dict:
    """Per-threshold per-class AP and their means.

    detections: (video, start, end, score, label); gts: (video, start, end, label).
    """
    classes = sorted({d[4] for d in detections} | {g[3] for g in gts})
    gt_classes = {g[3] for g in gts}
    for c in classes:
        if c not in gt_classes:
            log.warning("class %r has detections but no ground truth; AP = 0", c)
    ap = {}
    for thr in thresholds:
        ap[float(thr)] = {c: average_precision([d[:4] for d in detections if d[4] == c],
                                               [g[:3] for g in gts if g[3] == c], thr)
                          for c in classes}
    per_thr = {t: (float(np.mean(list(v.values()))) if v else 0.0) for t, v in ap.items()}
    return {"ap": ap, "map": per_thr, "mean": float(np.mean(list(per_thr.values()))) if per_thr else 0.0}


# ---------------------------------------------------------------------------
# false-positive profile

def fp_profile(proposals: dict, gts: dict, g_multiplier: int = 10, tp_threshold: float = 0.5,
               loc_floor: float = 0.1) -> dict:
    """Bucket the top-(g_multiplier * G) proposals of each video.

    In score order: tp claims the best unclaimed ground truth reaching
    ``tp_threshold``; duplicate reaches it only on already-claimed ones;
    localization has best tIoU in [loc_floor, tp_threshold); background below.
    """
    counts = dict.fromkeys(FP_BUCKETS, 0)
    for vid in sorted(gts):
        g = _segs(gts[vid])
        if len(g) == 0:
            continue
        p = _segs(proposals.get(vid, []))[: g_multiplier * len(g)]
        if len(p) == 0:
            continue
        ious = tiou_matrix(p, g)
        claimed = np.zeros(len(g), dtype=bool)
        for row in ious:
            best = row.max()
            if best >= tp_threshold:
                open_ = np.where(~claimed & (row >= tp_threshold), row, -1.0)
                k = int(np.argmax(open_))
                if open_[k] >= 0:
                    claimed[k] = True
                    counts["tp"] += 1
                else:
                    counts["duplicate"] += 1
            elif best >= loc_floor:
                counts["localization"] += 1
            else:
                counts["background"] += 1
    return counts


def fp_profile_curve(proposals: dict, gts: dict, max_multiplier: int = 10,
                     tp_threshold: float = 0.5) -> list[dict]:
    """Bucket fractions at 1G .. max_multiplier*G."""
    rows = []
    for k in range(1, max_multiplier + 1):
        c = fp_profile(proposals, gts, k, tp_threshold)
        total = sum(c.values())
        rows.append({"multiplier": k, "total": total,
                     **{b: (c[b] / total if total else 0.0) for b in FP_BUCKETS}})
    return rows


# ---------------------------------------------------------------------------
# Soft-NMS (ablation baseline only)

def soft_nms(proposals: list, sigma: float = 0.5, score_floor: float = 1e-3) -> list:
    """Gaussian Soft-NMS on one video's proposals.

    Repeatedly takes the highest remaining score and decays the rest by
    exp(-tIoU^2 / sigma). Proposals falling below ``score_floor`` are dropped.
    Items are ScoredProposal objects or (start, end, score) tuples.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not proposals:
        return []
    segs = _segs(proposals)
    scores = np.array([p.score if hasattr(p, "score") else p[2] for p in proposals], dtype=float)
    iou = tiou_matrix(segs, segs)
    remaining = list(range(len(proposals)))
    new = scores.copy()
    order = []
    while remaining:
        k = max(remaining, key=lambda i: (new[i], -i))
        remaining.remove(k)
        order.append(k)
        if remaining:
            r = np.array(remaining)
            new[r] *= np.exp(-(iou[k, r] ** 2) / sigma)
    out = []
    for i in sorted(order, key=lambda i: (-new[i], i)):
        if new[i] < score_floor:
            continue
        p = proposals[i]
        out.append(replace(p, score=float(new[i])) if hasattr(p, "score")
                   else (p[0], p[1], float(new[i])))
    return out
