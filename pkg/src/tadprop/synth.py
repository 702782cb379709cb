"""Synthetic untrimmed-video feature corpora with planted action intervals."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import (Annotation, FeatureSequence, GroundTruthInstance, Video, write_annotation,
                   write_features)


class GenerationError(RuntimeError):
    pass


@dataclass
class SyntheticConfig:
    n_train: int = 200
    n_val: int = 50
    T: int = 100
    C: int = 16
    min_instances: int = 1
    max_instances: int = 4
    min_len: int = 6  # steps
    max_len: int = 30
    min_gap: int = 3
    noise: float = 0.3
    smooth_radius: int = 2
    jitter: float = 0.3  # per-segment deviation from its kind's prototype
    n_classes: int = 3
    seconds_per_step: float = 1.0
    max_retries: int = 100

    @classmethod
    def from_dict(cls, obj: dict) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**obj)


def _pack_intervals(cfg: SyntheticConfig, rng: np.random.Generator) -> list[tuple[int, int]]:
    for _ in range(cfg.max_retries):
        k = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
        lengths = rng.integers(cfg.min_len, cfg.max_len + 1, size=k)
        slack = cfg.T - int(lengths.sum()) - (k - 1) * cfg.min_gap
        if slack < 0:
            continue
        # random composition of the slack into k + 1 gaps
        cuts = np.sort(rng.integers(0, slack + 1, size=k))
        gaps = np.diff(np.concatenate([[0], cuts]))
        out, pos = [], 0
        for i in range(k):
            pos += int(gaps[i]) + (cfg.min_gap if i else 0)
            out.append((pos, pos + int(lengths[i])))
            pos += int(lengths[i])
        return out
    raise GenerationError(
        f"could not pack {cfg.min_instances}-{cfg.max_instances} instances of length "
        f"{cfg.min_len}-{cfg.max_len} with gap {cfg.min_gap} into T={cfg.T}")


def _smooth(x: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return x
    padded = np.pad(x, ((radius, radius), (0, 0)), mode="edge")
    csum = np.cumsum(np.concatenate([np.zeros((1, x.shape[1])), padded]), axis=0)
    w = 2 * radius + 1
    return (csum[w:] - csum[:-w]) / w


def synth_video(cfg: SyntheticConfig, rng: np.random.Generator, video_id: str,
                class_protos: np.ndarray, bg_proto: np.ndarray) -> Video:
    intervals = _pack_intervals(cfg, rng)
    labels = rng.integers(0, cfg.n_classes, size=len(intervals))
    feats = np.empty((cfg.T, cfg.C))
    edges = [0]
    for s, e in intervals:
        edges += [s, e]
    edges.append(cfg.T)
    # alternate background gap / action segment
    for i in range(len(edges) - 1):
        a, b = edges[i], edges[i + 1]
        if i % 2 == 0:
            base = bg_proto
        else:
            base = class_protos[labels[i // 2]]
        feats[a:b] = base + cfg.jitter * rng.standard_normal(cfg.C)
    if cfg.noise > 0:
        feats = feats + cfg.noise * rng.standard_normal(feats.shape)
    feats = _smooth(feats, cfg.smooth_radius)
    sps = cfg.seconds_per_step
    ann = Annotation(video_id, cfg.T * sps,
                     [GroundTruthInstance(s * sps, e * sps, f"class_{int(c)}")
                      for (s, e), c in zip(intervals, labels)])
    return Video(FeatureSequence(video_id, feats, sps), ann)


def synth_generate(cfg: SyntheticConfig, seed: int) -> dict[str, list[Video]]:
    """Generate ``{"train": [...], "val": [...]}`` deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    class_protos = rng.standard_normal((cfg.n_classes, cfg.C))
    bg_proto = rng.standard_normal(cfg.C)
    out = {"train": [], "val": []}
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val)):
        for i in range(n):
            out[split].append(synth_video(cfg, rng, f"{split}_{i:04d}", class_protos, bg_proto))
    return out


def write_dataset(root, splits: dict[str, list[Video]], cfg: SyntheticConfig | None = None) -> None:
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    for videos in splits.values():
        for v in videos:
            write_features(root / "features" / f"{v.features.video_id}.rtdf", v.features)
            write_annotation(root / "annotations" / f"{v.features.video_id}.json", v.annotation)
    ids = {k: [v.features.video_id for v in vs] for k, vs in splits.items()}
    (root / "splits.json").write_text(json.dumps(ids, indent=1) + "\n")
    if cfg is not None:
        (root / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=1) + "\n")
