"""The full proposal network: TEM -> memory encoder -> decoder -> heads."""
from __future__ import annotations

import numpy as np

from .boundary import TEM, MemoryEncoder, normalize_and_scale
from .config import TrainConfig
from .decoder import Decoder, DecoderConfig, Heads
from .numerics import Module, sinusoidal_table


class ProposalModel(Module):
    def __init__(self, cfg: TrainConfig, c_in: int, seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.c_in = c_in
        ss = np.random.SeedSequence(cfg.seed if seed is None else seed)
        r_tem, r_enc, r_dec, r_head = (np.random.default_rng(s) for s in ss.spawn(4))
        self.tem = self.add_child("tem", TEM(c_in, cfg.tem_hidden, cfg.tem_kernel, r_tem))
        self.encoder = self.add_child("encoder", MemoryEncoder(
            c_in, cfg.d_model, cfg.d_pos, r_enc, cfg.projection_placement,
            cfg.boundary_enhancement, cfg.encoder_pos))
        dcfg = DecoderConfig(cfg.layers, cfg.heads, cfg.d_model, cfg.d_ffn)
        self.decoder = self.add_child("decoder", Decoder(dcfg, cfg.queries, r_dec, cfg.decoder_pos))
        self.heads = self.add_child("heads", Heads(cfg.d_model, r_head))

    # -- boundary stage ---------------------------------------------------
    def boundary_probs(self, feats: np.ndarray) -> np.ndarray:
        """Raw TEM probabilities (B, T, 2), no graph kept."""
        return self.tem(np.asarray(feats, dtype=float)).data

    def scaled_scores(self, feats: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        p = self.boundary_probs(feats)
        m = None if mask is None else np.asarray(mask)[..., None, :]
        # normalize over time: move the channel axis in front of time
        scaled = normalize_and_scale(np.swapaxes(p, -1, -2), self.cfg.alpha_r, m)
        return np.swapaxes(scaled, -1, -2)

    # -- main path --------------------------------------------------------
    def encode(self, feats: np.ndarray, scaled: np.ndarray):
        T = feats.shape[-2]
        memory = self.encoder(feats, scaled, sinusoidal_table(T, self.cfg.d_pos))
        return memory, sinusoidal_table(T, self.cfg.d_model)

    def __call__(self, feats: np.ndarray, scaled: np.ndarray | None = None,
                 mask: np.ndarray | None = None, trace=None) -> dict:
        """feats (B, T, C) -> dict of (B, N_q) tensors plus decoder output ``h``."""
        feats = np.asarray(feats, dtype=float)
        if feats.ndim == 2:
            feats = feats[None]
            scaled = None if scaled is None else np.asarray(scaled)[None]
            mask = None if mask is None else np.asarray(mask)[None]
        if scaled is None:
            scaled = self.scaled_scores(feats, mask)
        memory, pos = self.encode(feats, scaled)
        h = self.decoder(memory, pos, mask, trace)
        out = self.heads(h)
        out["h"] = h
        return out

    # -- parameter groups ---------------------------------------------------
    def completeness_params(self):
        return self.heads.completeness_params

    def phase_params(self, phase: str):
        """Trainable parameter set for a schedule phase."""
        if phase == "strict":
            comp = {id(p) for p in self.completeness_params()}
            return [p for p in (self.encoder.parameters() + self.decoder.parameters()
                                + self.heads.parameters()) if id(p) not in comp]
        if phase == "relaxed_finetune":
            return (self.heads.cls.parameters() + self.heads.boundary.parameters()
                    + [self.decoder.query_embed])
        if phase == "completeness":
            return self.completeness_params()
        if phase == "tem":
            return self.tem.parameters()
        raise ValueError(f"unknown phase {phase!r}")

    def freeze_all_but(self, phase: str):
        self.set_trainable(False)
        params = self.phase_params(phase)
        for p in params:
            p.set_trainable(True)
        return params
