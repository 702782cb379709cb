"""Feature files, annotations, windowing and rescaling."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RTDF_MAGIC = b"RTDF"
RTDF_VERSION = 1
_HEADER = struct.Struct("<4sIIId")


class FeatureFormatError(ValueError):
    pass


class FusionError(ValueError):
    pass


@dataclass
class FeatureSequence:
    video_id: str
    values: np.ndarray  # (T, C)
    seconds_per_step: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError(f"features must be a non-empty T x C matrix, got {self.values.shape}")
        if self.seconds_per_step <= 0:
            raise ValueError("seconds_per_step must be positive")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def C(self) -> int:
        return self.values.shape[1]

    @property
    def duration_sec(self) -> float:
        return self.T * self.seconds_per_step


@dataclass(frozen=True)
class GroundTruthInstance:
    start_sec: float
    end_sec: float
    label: str = "action"

    def __post_init__(self):
        if not self.end_sec > self.start_sec:
            raise ValueError(f"instance end {self.end_sec} must exceed start {self.start_sec}")


@dataclass
class Annotation:
    video_id: str
    duration_sec: float
    instances: list[GroundTruthInstance] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"video_id": self.video_id, "duration_sec": self.duration_sec,
                "instances": [{"start_sec": g.start_sec, "end_sec": g.end_sec, "label": g.label}
                              for g in self.instances]}

    @classmethod
    def from_json(cls, obj: dict) -> "Annotation":
        return cls(str(obj["video_id"]), float(obj["duration_sec"]),
                   [GroundTruthInstance(float(i["start_sec"]), float(i["end_sec"]),
                                        str(i.get("label", "action")))
                    for i in obj.get("instances", [])])


@dataclass
class Window:
    """A fixed-length slice of a feature sequence, in step units.

    ``gts`` holds (start, end) pairs in [0, 1] window coordinates. ``mask``
    marks real (1) versus zero-padded (0) steps.
    """
    video_id: str
    offset: int
    length: int
    features: np.ndarray
    mask: np.ndarray
    gts: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    labels: list = field(default_factory=list)
    seconds_per_step: float = 1.0

    def to_global(self, local: np.ndarray) -> np.ndarray:
        """Window coordinates in [0, 1] -> seconds."""
        return (self.offset + np.asarray(local, dtype=float) * self.length) * self.seconds_per_step

    def to_local(self, seconds: np.ndarray) -> np.ndarray:
        return (np.asarray(seconds, dtype=float) / self.seconds_per_step - self.offset) / self.length


# ---------------------------------------------------------------------------
# RTDF files

def encode_features(fs: FeatureSequence) -> bytes:
    t, c = fs.values.shape
    head = _HEADER.pack(RTDF_MAGIC, RTDF_VERSION, t, c, float(fs.seconds_per_step))
    return head + np.ascontiguousarray(fs.values, dtype="<f8").tobytes()


def decode_features(buf: bytes, video_id: str = "") -> FeatureSequence:
    if len(buf) < 4 or buf[:4] != RTDF_MAGIC:
        raise FeatureFormatError("bad magic at byte 0")
    if len(buf) < _HEADER.size:
        raise FeatureFormatError(f"truncated header at byte {len(buf)}")
    _, version, t, c, sps = _HEADER.unpack_from(buf, 0)
    if version != RTDF_VERSION:
        raise FeatureFormatError(f"unsupported version {version} at byte 4")
    need = _HEADER.size + 8 * t * c
    if len(buf) < need:
        raise FeatureFormatError(f"truncated payload at byte {len(buf)} (expected {need} bytes)")
    vals = np.frombuffer(buf, dtype="<f8", count=t * c, offset=_HEADER.size)
    return FeatureSequence(video_id, vals.reshape(t, c).astype(np.float64), sps)


def write_features(path, fs: FeatureSequence) -> None:
    Path(path).write_bytes(encode_features(fs))


def load_features(path, *more_paths, video_id: str | None = None) -> FeatureSequence:
    """Read one RTDF file, or several streams fused channel-wise."""
    paths = [Path(path), *map(Path, more_paths)]
    vid = video_id if video_id is not None else paths[0].stem
    streams = [decode_features(p.read_bytes(), vid) for p in paths]
    return fuse_streams(streams) if len(streams) > 1 else streams[0]


def fuse_streams(streams: list[FeatureSequence]) -> FeatureSequence:
    t = {s.T for s in streams}
    if len(t) != 1:
        raise FusionError(f"streams disagree on length: {sorted(t)}")
    sps = {s.seconds_per_step for s in streams}
    if len(sps) != 1:
        raise FusionError(f"streams disagree on seconds_per_step: {sorted(sps)}")
    return FeatureSequence(streams[0].video_id, np.concatenate([s.values for s in streams], axis=1),
                           streams[0].seconds_per_step)


def write_annotation(path, ann: Annotation) -> None:
    Path(path).write_text(json.dumps(ann.to_json(), indent=1) + "\n")


def load_annotation(path) -> Annotation:
    return Annotation.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# windowing

def window_starts(T: int, length: int, overlap: float) -> list[int]:
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    if length < 1:
        raise ValueError("window length must be >= 1")
    if T <= length:
        return [0]
    stride = max(1, int(round(length * (1.0 - overlap))))
    starts = list(range(0, T - length + 1, stride))
    if starts[-1] + length < T:
        starts.append(T - length)
    return starts


def sliding_windows(fs: FeatureSequence, gts: list[GroundTruthInstance], length: int = 100,
                    overlap: float = 0.5, train: bool = False) -> list[Window]:
    """Cut ``fs`` into windows; the last one is snapped to end at T.

    Ground truths are clipped to each window; fragments shorter than one step
    are dropped. In train mode windows left without any ground truth are
    skipped.
    """
    out = []
    for s in window_starts(fs.T, length, overlap):
        feats = fs.values[s:s + length]
        mask = np.ones(length)
        if feats.shape[0] < length:
            mask[feats.shape[0]:] = 0.0
            feats = np.concatenate([feats, np.zeros((length - feats.shape[0], fs.C))])
        segs, labels = [], []
        for g in gts:
            a = max(g.start_sec / fs.seconds_per_step, s)
            b = min(g.end_sec / fs.seconds_per_step, s + length)
            if b - a >= 1.0:
                segs.append(((a - s) / length, (b - s) / length))
                labels.append(g.label)
        if train and not segs:
            continue
        out.append(Window(fs.video_id, s, length, feats, mask,
                          np.asarray(segs, dtype=float).reshape(-1, 2), labels, fs.seconds_per_step))
    return out


def whole_window(fs: FeatureSequence, gts: list[GroundTruthInstance], length: int = 100) -> Window:
    """Rescale a whole video to ``length`` steps and present it as one window."""
    r = rescale_linear(fs, length) if fs.T != length else fs
    segs = [(g.start_sec / fs.duration_sec, g.end_sec / fs.duration_sec) for g in gts]
    segs = np.clip(np.asarray(segs, dtype=float).reshape(-1, 2), 0.0, 1.0)
    return Window(fs.video_id, 0, length, r.values, np.ones(length), segs,
                  [g.label for g in gts], fs.duration_sec / length)


def rescale_linear(fs: FeatureSequence, target_len: int) -> FeatureSequence:
    """Per-channel linear interpolation to ``target_len`` steps; endpoints kept."""
    if target_len < 2:
        raise ValueError("target_len must be >= 2")
    if fs.T == 1:
        raise ValueError("cannot interpolate a single-step sequence")
    if fs.T == target_len:
        return FeatureSequence(fs.video_id, fs.values.copy(), fs.seconds_per_step)
    src = np.linspace(0.0, 1.0, fs.T)
    dst = np.linspace(0.0, 1.0, target_len)
    vals = np.stack([np.interp(dst, src, fs.values[:, c]) for c in range(fs.C)], axis=1)
    return FeatureSequence(fs.video_id, vals, fs.duration_sec / target_len)


# ---------------------------------------------------------------------------
# dataset directories

@dataclass
class Video:
    features: FeatureSequence
    annotation: Annotation


def load_dataset(root, split: str | None = None, streams: tuple = ("features",)) -> list[Video]:
    """Load ``root/<stream>/<id>.rtdf`` and ``root/annotations/<id>.json``.

    With ``split`` set, only ids listed under that key of ``root/splits.json``
    are loaded. Several streams are fused channel-wise.
    """
    root = Path(root)
    if split is not None:
        ids = json.loads((root / "splits.json").read_text())[split]
    else:
        ids = sorted(p.stem for p in (root / "annotations").glob("*.json"))
    out = []
    for vid in sorted(ids):
        fs = load_features(*[root / s / f"{vid}.rtdf" for s in streams], video_id=vid)
        out.append(Video(fs, load_annotation(root / "annotations" / f"{vid}.json")))
    return out
