"""Shared setup for finite-difference checks through the full proposal model."""
import numpy as np

from tadprop.config import TrainConfig
from tadprop.losses import (batch_losses, completeness_targets, loss_boundary, loss_cls,
                            loss_complete)
from tadprop.model import ProposalModel
from tadprop.numerics import grad_check

D_MODEL, T, N_Q, C_IN, BATCH = 8, 12, 4, 4, 2
OBJECTIVES = ("l_cls", "l_boundary", "l_complete", "phase1_total")


def tiny_model(seed: int):
    """A d_model=8, N_q=4 model with every parameter (biases too) drawn at random."""
    cfg = TrainConfig(d_model=D_MODEL, heads=2, d_ffn=16, layers=2, n_queries=N_Q, tem_hidden=8,
                      d_pos=8, seed=seed)
    model = ProposalModel(cfg, C_IN, seed)
    rng = np.random.default_rng(10_000 + seed)
    for _, p in model.named_parameters():
        p.data[...] = rng.normal(0.0, 0.5, size=p.shape)
    feats = rng.normal(size=(BATCH, T, C_IN))
    gts = []
    for _ in range(BATCH):
        g = np.sort(rng.uniform(0.05, 0.95, size=(int(rng.integers(1, 3)), 2)), axis=1)
        gts.append(g)
    return model, feats, gts


def objectives(model, feats, gts):
    """Closures for each loss with assignments and completeness targets frozen
    at the probe point, so perturbations do not flip discrete choices."""
    cfg = model.cfg
    w = cfg.cost_weights
    scaled = model.scaled_scores(feats)
    out = model(feats, scaled)
    frozen = batch_losses(out, gts, w, "strict").assignments
    segs = np.stack([out["t_start"].data, out["t_end"].data], axis=-1)
    targets = np.stack([completeness_targets(segs[b], gts[b]) for b in range(len(gts))])
    positive = np.zeros(out["p_bc"].shape, dtype=bool)
    pairs = []
    for b, a in enumerate(frozen):
        for n, g in a.loc_pairs().items():
            positive[b, n] = True
            pairs.append((b * N_Q + n, tuple(gts[b][g])))

    def fwd():
        return model(feats, scaled)

    return {
        "l_cls": lambda: loss_cls(fwd()["p_bc"].reshape(-1), positive.reshape(-1), w.gamma),
        "l_boundary": lambda: _boundary(fwd(), pairs, w),
        "l_complete": lambda: loss_complete(fwd()["p_c"], targets),
        "phase1_total": lambda: batch_losses(fwd(), gts, w, "strict", assignments=frozen).total,
    }


def _boundary(out, pairs, w):
    return loss_boundary(out["t_start"].reshape(-1), out["t_end"].reshape(-1), pairs, w.alpha, w.beta)[0]


def probe_params(model):
    """Every parameter on the differentiable path (TEM scores enter as constants)."""
    return [p for n, p in model.named_parameters() if not n.startswith("tem.")]


def max_error(seed: int, name: str, max_per_param: int | None = 6) -> float:
    model, feats, gts = tiny_model(seed)
    fn = objectives(model, feats, gts)[name]
    return grad_check(fn, probe_params(model), max_per_param=max_per_param,
                      rng=np.random.default_rng(seed))
