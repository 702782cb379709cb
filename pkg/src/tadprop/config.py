"""Training/inference configuration and JSON loading."""
from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

from .matching import RELAX_MODES, CostWeights


class ConfigParseError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        super().__init__(msg if line is None else f"line {line}: {msg}")
        self.line = line


@dataclass
class TrainConfig:
    # matcher / loss weights
    alpha: float = 1.0
    beta: float = 5.0
    gamma: float = 2.0
    # boundary-attentive module
    alpha_r: float = 2.0
    d_pos: int = 32
    tem_hidden: int = 128
    tem_kernel: int = 3
    tem_epochs: int = 30
    tem_lr: float = 1e-3
    boundary_expansion: float = 0.1
    projection_placement: str = "enhance_first"  # or "project_first"
    boundary_enhancement: str = "multiply"  # or "concat"
    encoder_pos: str = "concat"  # "concat" | "add" | "none"
    # windowing
    window_length: int = 100
    train_overlap: float = 0.75
    test_overlap: float = 0.5
    # decoder
    layers: int = 6
    heads: int = 4
    d_model: int = 64
    d_ffn: int = 256
    decoder_pos: str = "attn"  # "attn" | "input" | "none"
    n_queries: int = 32
    n_queries_whole: int = 100
    # optimization
    lr: float = 1e-4
    batch_size: int = 32
    weight_decay: float = 1e-4
    max_grad_norm: float = 0.0  # 0 disables clipping
    # relaxation
    relax_mode: str = "threshold_cls_loc"
    relax_threshold: float = 0.7
    # schedule
    epochs_strict: int = 80
    epochs_relaxed: int = 20
    epochs_complete: int = 20
    seed: int = 0
    mode: str = "window"  # "window" | "whole"
    feature_streams: list = field(default_factory=lambda: ["features"])

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.relax_mode in RELAX_MODES, f"relax_mode must be one of {RELAX_MODES}"),
            (0.0 < self.relax_threshold <= 1.0, "relax_threshold must lie in (0, 1]"),
            (self.mode in ("window", "whole"), "mode must be 'window' or 'whole'"),
            (self.d_model % self.heads == 0, "d_model must be divisible by heads"),
            (self.layers >= 1, "layers must be >= 1"),
            (self.lr > 0 and self.tem_lr > 0, "learning rates must be positive"),
            (self.alpha_r > 0, "alpha_r must be positive"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (0.0 <= self.train_overlap < 1.0 and 0.0 <= self.test_overlap < 1.0,
             "overlaps must lie in [0, 1)"),
            (self.projection_placement in ("enhance_first", "project_first"),
             "projection_placement must be 'enhance_first' or 'project_first'"),
            (self.boundary_enhancement in ("multiply", "concat"),
             "boundary_enhancement must be 'multiply' or 'concat'"),
            (self.encoder_pos in ("concat", "add", "none"), "encoder_pos must be concat/add/none"),
            (self.decoder_pos in ("attn", "input", "none"), "decoder_pos must be attn/input/none"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigParseError(msg)

    @property
    def cost_weights(self) -> CostWeights:
        return CostWeights(self.alpha, self.beta, self.gamma)

    @property
    def queries(self) -> int:
        return self.n_queries_whole if self.mode == "whole" else self.n_queries

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict, lines: dict | None = None) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        for k in obj:
            if k not in known:
                raise ConfigParseError(f"unknown config key {k!r}", (lines or {}).get(k))
            want = _json_type(cls, known[k])
            if want is not None and not _type_ok(obj[k], want):
                raise ConfigParseError(f"{k} must be {want.__name__}, got {obj[k]!r}",
                                       (lines or {}).get(k))
        try:
            return cls(**obj)
        except (ConfigParseError, TypeError) as e:
            # point at the first offending key named in the message
            msg = str(e)
            key = next((k for k in obj if msg.startswith(k)), None)
            raise ConfigParseError(msg, (lines or {}).get(key)) from None


def _json_type(cls, f):
    default = f.default_factory() if f.default_factory is not MISSING else f.default
    return None if default is MISSING else type(default)


def _type_ok(value, want) -> bool:
    if want is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if want is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, want)


def _key_lines(text: str) -> dict:
    out = {}
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith('"'):
            out.setdefault(s[1:].split('"', 1)[0], i)
    return out


def parse_json_config(text: str) -> dict:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigParseError(e.msg, e.lineno) from None
    if not isinstance(obj, dict):
        raise ConfigParseError("config must be a JSON object", 1)
    return obj


def load_config(path, overrides: dict | None = None, cls=TrainConfig):
    """Read a JSON config file; ``overrides`` (from CLI flags) win."""
    obj, lines = {}, {}
    if path is not None:
        text = Path(path).read_text()
        obj = parse_json_config(text)
        lines = _key_lines(text)
    obj.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if cls is TrainConfig:
        return TrainConfig.from_dict(obj, lines)
    try:
        return cls.from_dict(obj)
    except (TypeError, ValueError) as e:
        raise ConfigParseError(str(e)) from None
