"""TEM pre-training and the three-phase proposal training schedule."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .boundary import tem_loss
from .config import ConfigParseError, TrainConfig
from .data import Video, Window, sliding_windows, whole_window
from .losses import batch_losses, completeness_targets, loss_complete
from .model import ProposalModel
from .numerics import AdamW, Tensor
from .numerics.tensor import relu, sigmoid

log = logging.getLogger(__name__)

PHASES = ("strict", "relaxed_finetune", "completeness")
LOG_FIELDS = ("epoch", "phase", "l_cls", "l_boundary", "l_complete", "n_pos")


@dataclass
class SchedulePhase:
    name: str
    epochs: int
    matcher: str | None  # relaxation mode, None for strict Hungarian


def schedule(cfg: TrainConfig) -> list[SchedulePhase]:
    return [SchedulePhase("strict", cfg.epochs_strict, None),
            SchedulePhase("relaxed_finetune", cfg.epochs_relaxed, cfg.relax_mode),
            SchedulePhase("completeness", cfg.epochs_complete, None)]


def training_windows(videos: list[Video], cfg: TrainConfig) -> list[Window]:
    out = []
    for v in videos:
        if cfg.mode == "whole":
            w = whole_window(v.features, v.annotation.instances, cfg.window_length)
            if len(w.gts):
                out.append(w)
        else:
            out.extend(sliding_windows(v.features, v.annotation.instances, cfg.window_length,
                                       cfg.train_overlap, train=True))
    return out


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def clip_grad_norm(params, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


def train_tem(model: ProposalModel, windows: list[Window], cfg: TrainConfig,
              rng: np.random.Generator | None = None) -> list[float]:
    """Frame-level training of the boundary predictor; returns per-epoch loss."""
    if not windows:
        raise ConfigParseError("no training windows")
    rng = rng or np.random.default_rng(cfg.seed)
    params = model.freeze_all_but("tem")
    opt = AdamW(params, lr=cfg.tem_lr, weight_decay=cfg.weight_decay)
    feats = np.stack([w.features for w in windows])
    masks = np.stack([w.mask for w in windows])
    history = []
    for epoch in range(cfg.tem_epochs):
        tot, n = 0.0, 0
        for idx in _batches(len(windows), cfg.batch_size, rng):
            opt.zero_grad()
            probs = model.tem(feats[idx])
            loss = tem_loss(probs, [windows[i].gts for i in idx], cfg.boundary_expansion, masks[idx])
            loss.backward()
            opt.step()
            tot += float(loss.data) * len(idx)
            n += len(idx)
        history.append(tot / n)
        log.debug("tem epoch %d loss %.5f", epoch, history[-1])
    model.tem.set_trainable(False)
    return history


class Trainer:
    """Runs strict -> relaxed fine-tune -> completeness on fixed windows."""

    def __init__(self, model: ProposalModel, windows: list[Window], cfg: TrainConfig):
        if not windows:
            raise ConfigParseError("empty training set")
        self.model, self.windows, self.cfg = model, windows, cfg
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.feats = np.stack([w.features for w in windows])
        self.masks = np.stack([w.mask for w in windows])
        self.gts = [w.gts for w in windows]
        self.scaled = model.scaled_scores(self.feats, self.masks)
        self.log: list[dict] = []

    def _forward(self, idx):
        return self.model(self.feats[idx], self.scaled[idx], self.masks[idx])

    def run_phase(self, phase: SchedulePhase, on_epoch=None) -> None:
        cfg = self.cfg
        params = self.model.freeze_all_but(phase.name)
        opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        if phase.name == "completeness":
            self._run_completeness(phase, opt, on_epoch)
            return
        for epoch in range(phase.epochs):
            sums = {"l_cls": 0.0, "l_boundary": 0.0, "l_complete": 0.0, "n_pos": 0}
            nb = 0
            for idx in _batches(len(self.windows), cfg.batch_size, self.rng):
                opt.zero_grad()
                out = self._forward(idx)
                bundle = batch_losses(out, [self.gts[i] for i in idx], cfg.cost_weights,
                                      phase.name, cfg.relax_mode, cfg.relax_threshold)
                bundle.total.backward()
                clip_grad_norm(params, cfg.max_grad_norm)
                opt.step()
                for k, v in bundle.values().items():
                    sums[k] += v
                nb += 1
            self._record(len(self.log), phase.name, sums, nb, on_epoch)

    def _run_completeness(self, phase: SchedulePhase, opt: AdamW, on_epoch) -> None:
        # Everything upstream of the completeness head is frozen here, so the
        # decoder output and the tIoU targets are constants of the phase.
        cfg = self.cfg
        hs, targets = [], []
        for start in range(0, len(self.windows), cfg.batch_size):
            idx = np.arange(start, min(start + cfg.batch_size, len(self.windows)))
            out = self._forward(idx)
            segs = np.stack([out["t_start"].data, out["t_end"].data], axis=-1)
            hs.append(out["h"].data)
            targets.append(np.stack([completeness_targets(segs[j], self.gts[i])
                                     for j, i in enumerate(idx)]))
        h_all = np.concatenate(hs)
        t_all = np.concatenate(targets)
        heads = self.model.heads
        for epoch in range(phase.epochs):
            sums = {"l_cls": 0.0, "l_boundary": 0.0, "l_complete": 0.0, "n_pos": 0}
            nb = 0
            for idx in _batches(len(self.windows), cfg.batch_size, self.rng):
                opt.zero_grad()
                p_c = sigmoid(heads.comp_fc(relu(heads.comp_conv(Tensor(h_all[idx])))))[..., 0]
                loss = loss_complete(p_c, t_all[idx])
                loss.backward()
                clip_grad_norm(opt.params, cfg.max_grad_norm)
                opt.step()
                sums["l_complete"] += float(loss.data)
                nb += 1
            self._record(len(self.log), phase.name, sums, nb, on_epoch)

    def _record(self, epoch, phase, sums, nb, on_epoch):
        row = {"epoch": epoch, "phase": phase, "l_cls": sums["l_cls"] / nb,
               "l_boundary": sums["l_boundary"] / nb, "l_complete": sums["l_complete"] / nb,
               "n_pos": int(sums["n_pos"])}
        self.log.append(row)
        log.info("epoch %d %s cls=%.4f bnd=%.4f comp=%.4f npos=%d", epoch, phase, row["l_cls"],
                 row["l_boundary"], row["l_complete"], row["n_pos"])
        if on_epoch is not None:
            on_epoch(row)

    def run(self, phases=None, on_epoch=None) -> list[dict]:
        for ph in schedule(self.cfg):
            if phases is None or ph.name in phases:
                self.run_phase(ph, on_epoch)
        self.model.set_trainable(False)
        return self.log


def train(videos: list[Video], cfg: TrainConfig, model: ProposalModel | None = None,
          tem_trained: bool = False, on_epoch=None):
    """Full pipeline: TEM (unless already trained) then the three phases.

    Returns (model, loss log rows, tem loss history).
    """
    windows = training_windows(videos, cfg)
    if not windows:
        raise ConfigParseError("dataset yields no training windows")
    c_in = windows[0].features.shape[1]
    model = model or ProposalModel(cfg, c_in)
    tem_hist = [] if tem_trained else train_tem(model, windows, cfg)
    trainer = Trainer(model, windows, cfg)
    rows = trainer.run(on_epoch=on_epoch)
    return model, rows, tem_hist


def write_loss_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["epoch"], r["phase"], repr(r["l_cls"]), repr(r["l_boundary"]),
                        repr(r["l_complete"]), r["n_pos"]])
