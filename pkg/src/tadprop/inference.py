"""NMS-free inference: windows in, globally-timed scored proposals out."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .boundary import BoundaryScores, write_boundary_csv
from .config import TrainConfig
from .data import FeatureSequence, Window, sliding_windows, whole_window
from .model import ProposalModel


@dataclass
class ScoredProposal:
    video_id: str
    start_sec: float
    end_sec: float
    score: float
    p_bc: float
    p_c: float
    label: str | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        if d["label"] is None:
            del d["label"]
        return d


def fuse_scores(p_bc: float, p_c: float) -> float:
    """Arithmetic mean of classification and completeness scores."""
    if not (0.0 <= p_bc <= 1.0 and 0.0 <= p_c <= 1.0):
        raise ValueError(f"scores must lie in [0, 1], got {p_bc}, {p_c}")
    return (p_bc + p_c) / 2.0


def sort_proposals(props: list[ScoredProposal]) -> list[ScoredProposal]:
    return sorted(props, key=lambda p: (-p.score, p.start_sec, p.end_sec))


def inference_windows(video: FeatureSequence, cfg: TrainConfig, mode: str) -> list[Window]:
    if mode == "whole":
        return [whole_window(video, [], cfg.window_length)]
    return sliding_windows(video, [], cfg.window_length, cfg.test_overlap, train=False)


def infer(video: FeatureSequence, model: ProposalModel, cfg: TrainConfig, mode: str | None = None,
          timings: dict | None = None, trace: list | None = None,
          boundary_out: list | None = None) -> list[ScoredProposal]:
    """Every query of every window becomes a proposal; nothing is suppressed.

    ``timings`` (if given) accumulates per-stage milliseconds. ``trace``
    collects per-layer attention maps; ``boundary_out`` collects raw boundary
    scores per window.
    """
    mode = mode or cfg.mode
    wins = inference_windows(video, cfg, mode)
    feats = np.stack([w.features for w in wins])
    masks = np.stack([w.mask for w in wins])
    clock = time.perf_counter
    t0 = clock()
    raw = model.boundary_probs(feats)
    scaled = model.scaled_scores(feats, masks)
    t1 = clock()
    memory, pos = model.encode(feats, scaled)
    t2 = clock()
    h = model.decoder(memory, pos, masks, trace)
    t3 = clock()
    out = model.heads(h)
    t4 = clock()
    if timings is not None:
        for k, v in (("boundary_ms", t1 - t0), ("encoder_ms", t2 - t1), ("decoder_ms", t3 - t2),
                     ("heads_ms", t4 - t3)):
            timings[k] = timings.get(k, 0.0) + 1e3 * v
    if boundary_out is not None:
        for b, w in enumerate(wins):
            boundary_out.append((w, BoundaryScores(raw[b, :, 0], raw[b, :, 1])))
    ts, te = out["t_start"].data, out["t_end"].data
    pb, pc = out["p_bc"].data, out["p_c"].data
    props = []
    for b, w in enumerate(wins):
        g0 = w.to_global(ts[b])
        g1 = w.to_global(te[b])
        for n in range(ts.shape[1]):
            props.append(ScoredProposal(video.video_id, float(g0[n]), float(g1[n]),
                                        fuse_scores(float(pb[b, n]), float(pc[b, n])),
                                        float(pb[b, n]), float(pc[b, n])))
    return sort_proposals(props)


# ---------------------------------------------------------------------------
# proposal files

def write_proposals(path, props: list[ScoredProposal]) -> None:
    with open(path, "w") as fh:
        for p in props:
            fh.write(json.dumps(p.to_json()) + "\n")


def read_proposals(path) -> list[ScoredProposal]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(ScoredProposal(str(d["video_id"]), float(d["start_sec"]),
                                          float(d["end_sec"]), float(d["score"]),
                                          float(d.get("p_bc", d["score"])),
                                          float(d.get("p_c", d["score"])), d.get("label")))
    return out


def group_by_video(props: list[ScoredProposal]) -> dict[str, list[ScoredProposal]]:
    out: dict[str, list[ScoredProposal]] = {}
    for p in props:
        out.setdefault(p.video_id, []).append(p)
    return {k: sort_proposals(v) for k, v in sorted(out.items())}


def write_attention_csvs(out_dir, trace: list, window_index: int = 0, prefix: str = "") -> list[Path]:
    """One CSV per layer and attention type (head-averaged weights)."""
    out_dir = Path(out_dir)
    paths = []
    for layer, (w_self, w_cross) in enumerate(trace):
        for kind, mat in (("self", w_self), ("cross", w_cross)):
            p = out_dir / f"{prefix}attn_{kind}_layer{layer}.csv"
            with open(p, "w", newline="") as fh:
                csv.writer(fh).writerows([[repr(float(x)) for x in row]
                                          for row in mat[window_index]])
            paths.append(p)
    return paths


__all__ = ["ScoredProposal", "fuse_scores", "infer", "read_proposals", "write_proposals",
           "group_by_video", "write_attention_csvs", "write_boundary_csv", "sort_proposals"]
