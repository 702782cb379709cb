"""Command-line entry point: synth, train-tem, train, infer, eval, fp-profile.

Every command writes ``manifest.json`` into its output directory with the
resolved config, seed, arguments and per-stage wall-clock timings.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigParseError, TrainConfig, load_config, parse_json_config
from .data import FeatureFormatError, FusionError, load_dataset
from .inference import (group_by_video, infer, read_proposals, write_attention_csvs,
                        write_proposals)
from .metrics import (FP_BUCKETS, ar_at_an, auc, fp_profile_curve, map_metric, soft_nms,
                      tiou_thresholds)
from .model import ProposalModel
from .numerics import CheckpointFormatError, assign_params, load_params, save_params
from .synth import GenerationError, SyntheticConfig, synth_generate, write_dataset
from .train import Trainer, train_tem, training_windows, write_loss_log

log = logging.getLogger("tadprop")

MODEL_FILE = "model.rtdw"
TEM_FILE = "tem.rtdw"
CONFIG_FILE = "config.json"


class CliError(Exception):
    """Reported on stderr with exit status 1."""


def _thread_limit():
    n = os.environ.get("RTD_THREADS")
    if not n:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=int(n))


class Stopwatch:
    def __init__(self):
        self.ms: dict[str, float] = {}

    @contextlib.contextmanager
    def stage(self, name: str):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.ms[name] = self.ms.get(name, 0.0) + 1e3 * (time.perf_counter() - t)


def _write_manifest(out_dir: Path, command: str, args, config: dict | None, seed, timings: dict,
                    extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "seed": seed,
        "config": config,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                 if k != "func"},
        "timings_ms": {k: round(v, 3) for k, v in timings.items()},
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(2, "No such file or directory", str(p))
    return p


def _train_config(args) -> TrainConfig:
    overrides = {"seed": getattr(args, "seed", None), "mode": getattr(args, "mode", None)}
    path = _require(args.config) if getattr(args, "config", None) else None
    return load_config(path, overrides)


def _model_config(args) -> TrainConfig:
    """Config for a trained model: the checkpoint's own config, then --config, then flags."""
    base = {}
    ck_cfg = Path(args.checkpoint).parent / CONFIG_FILE
    if ck_cfg.exists():
        base = parse_json_config(ck_cfg.read_text())
    if args.config:
        base.update(load_config(_require(args.config)).to_dict())
    for key in ("seed", "mode"):
        if getattr(args, key, None) is not None:
            base[key] = getattr(args, key)
    return TrainConfig.from_dict(base)


def _load_videos(args, split=None):
    cfg_streams = getattr(args, "streams", None)
    streams = tuple(cfg_streams.split(",")) if cfg_streams else ("features",)
    root = _require(args.data)
    return load_dataset(root, split, streams)


def _gts_by_video(videos) -> dict:
    return {v.features.video_id: [(g.start_sec, g.end_sec) for g in v.annotation.instances]
            for v in videos}


def _thresholds(args):
    if args.thresholds:
        try:
            return np.array([float(x) for x in args.thresholds.split(",") if x.strip()])
        except ValueError:
            raise CliError(f"--thresholds must be a comma-separated list of numbers, "
                           f"got {args.thresholds!r}") from None
    return tiou_thresholds(0.5, 1.0, 0.05)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> None:
    sw = Stopwatch()
    obj = {}
    if args.config:
        obj = parse_json_config(_require(args.config).read_text())
    try:
        cfg = SyntheticConfig.from_dict(obj)
    except (TypeError, ValueError) as e:
        raise ConfigParseError(str(e)) from None
    with sw.stage("generate"):
        splits = synth_generate(cfg, args.seed)
    out = Path(args.out_dir)
    with sw.stage("write"):
        write_dataset(out, splits, cfg)
    _write_manifest(out, "synth", args, asdict(cfg), args.seed, sw.ms,
                    {"videos": {k: len(v) for k, v in splits.items()}})


def _build_model(cfg: TrainConfig, videos) -> ProposalModel:
    if not videos:
        raise ConfigParseError("dataset split is empty")
    return ProposalModel(cfg, videos[0].features.C)


def cmd_train_tem(args) -> None:
    sw = Stopwatch()
    cfg = _train_config(args)
    videos = _load_videos(args, args.split)
    model = _build_model(cfg, videos)
    windows = training_windows(videos, cfg)
    with sw.stage("train_tem"):
        hist = train_tem(model, windows, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_params(out / TEM_FILE, model.tem.named_parameters())
    (out / CONFIG_FILE).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    with open(out / "tem_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        w.writerows([[i, repr(v)] for i, v in enumerate(hist)])
    _write_manifest(out, "train-tem", args, cfg.to_dict(), cfg.seed, sw.ms)


def cmd_train(args) -> None:
    sw = Stopwatch()
    cfg = _train_config(args)
    videos = _load_videos(args, args.split)
    model = _build_model(cfg, videos)
    windows = training_windows(videos, cfg)
    if args.tem:
        assign_params(model.tem, load_params(_require(args.tem)))
    else:
        with sw.stage("train_tem"):
            train_tem(model, windows, cfg)
    trainer = Trainer(model, windows, cfg)
    rows = []
    for phase in ("strict", "relaxed_finetune", "completeness"):
        with sw.stage(phase):
            rows = trainer.run(phases=(phase,))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_params(out / MODEL_FILE, model.named_parameters())
    (out / CONFIG_FILE).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    write_loss_log(out / "loss_log.csv", rows)
    _write_manifest(out, "train", args, cfg.to_dict(), cfg.seed, sw.ms)


def load_model(checkpoint, cfg: TrainConfig, c_in: int) -> ProposalModel:
    model = ProposalModel(cfg, c_in)
    assign_params(model, load_params(_require(checkpoint)))
    model.set_trainable(False)
    return model


def cmd_infer(args) -> None:
    sw = Stopwatch()
    cfg = _model_config(args)
    videos = _load_videos(args, args.split)
    if not videos:
        raise ConfigParseError("dataset split is empty")
    model = load_model(args.checkpoint, cfg, videos[0].features.C)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    props = []
    for v in videos:
        trace = [] if args.dump_attention else None
        props += infer(v.features, model, cfg, cfg.mode, timings, trace)
        if trace:
            (out / "attention").mkdir(exist_ok=True)
            write_attention_csvs(out / "attention", trace, 0, prefix=f"{v.features.video_id}_")
    write_proposals(out / "proposals.jsonl", props)
    sw.ms.update(timings)
    _write_manifest(out, "infer", args, cfg.to_dict(), cfg.seed, sw.ms,
                    {"videos": len(videos), "proposals": len(props)})


def _video_labels(path) -> dict:
    if not path:
        return {}
    return {str(k): str(v) for k, v in json.loads(_require(path).read_text()).items()}


def cmd_eval(args) -> None:
    sw = Stopwatch()
    videos = _load_videos(args, args.split)
    gts = _gts_by_video(videos)
    props = group_by_video(read_proposals(_require(args.proposals)))
    thr = _thresholds(args)
    an = np.arange(1, args.an_max + 1)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with sw.stage("ar_an"):
        table = ar_at_an(props, gts, thr, an)
    _write_ar_csv(out / "ar_an.csv", table)
    summary = {"auc": auc(table), "n_gt": table.n_gt, "n_videos": len(gts)}
    for k in (1, 10, 50, 100):
        if k <= args.an_max:
            summary[f"ar@{k}"] = table.at(k)
    if args.soft_nms:
        with sw.stage("soft_nms"):
            suppressed = {vid: soft_nms(ps, sigma=args.soft_nms_sigma) for vid, ps in props.items()}
            table_s = ar_at_an(suppressed, gts, thr, an)
        _write_ar_csv(out / "ar_an_soft_nms.csv", table_s)
        summary["auc_soft_nms"] = auc(table_s)
        summary["auc_delta"] = summary["auc_soft_nms"] - summary["auc"]
    labels = _video_labels(args.video_labels)
    has_labels = labels or any(p.label is not None for ps in props.values() for p in ps)
    if has_labels:
        dets = [(p.video_id, p.start_sec, p.end_sec, p.score,
                 p.label if p.label is not None else labels.get(p.video_id))
                for ps in props.values() for p in ps]
        dets = [d for d in dets if d[4] is not None]
        gt_rows = [(v.features.video_id, g.start_sec, g.end_sec, g.label)
                   for v in videos for g in v.annotation.instances]
        with sw.stage("map"):
            res = map_metric(dets, gt_rows)
        with open(out / "map.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tiou", "map"])
            for t, m in res["map"].items():
                w.writerow([repr(t), repr(m)])
        summary["map_mean"] = res["mean"]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in summary.items():
            w.writerow([k, repr(v)])
    _write_manifest(out, "eval", args, None, None, sw.ms, {"summary": summary})


def _write_ar_csv(path, table) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["an", "ar"] + [f"recall@{t:g}" for t in table.thresholds])
        for i, a in enumerate(table.an):
            w.writerow([int(a), repr(float(table.ar[i]))] + [repr(float(x)) for x in table.recall[i]])


def cmd_fp_profile(args) -> None:
    sw = Stopwatch()
    videos = _load_videos(args, args.split)
    props = group_by_video(read_proposals(_require(args.proposals)))
    with sw.stage("fp_profile"):
        rows = fp_profile_curve(props, _gts_by_video(videos), args.max_multiplier)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "fp_profile.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["multiplier", "total", *FP_BUCKETS])
        for r in rows:
            w.writerow([r["multiplier"], r["total"]] + [repr(r[b]) for b in FP_BUCKETS])
    _write_manifest(out, "fp-profile", args, None, None, sw.ms)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tadprop", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--config", help="JSON synthetic config")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    for name, func, help_ in (("train-tem", cmd_train_tem, "train the boundary predictor"),
                              ("train", cmd_train, "train the full model")):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--data", required=True, help="dataset root")
        t.add_argument("--split", default="train")
        t.add_argument("--streams", help="comma list of feature sub-directories to fuse")
        t.add_argument("--config", help="JSON train config")
        t.add_argument("--seed", type=int, required=True)
        t.add_argument("--mode", choices=("window", "whole"))
        t.add_argument("--out-dir", required=True)
        if name == "train":
            t.add_argument("--tem", help="pretrained boundary-predictor checkpoint")
        t.set_defaults(func=func)

    i = sub.add_parser("infer", help="write proposals for a split")
    i.add_argument("--data", required=True)
    i.add_argument("--split", default="val")
    i.add_argument("--streams")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--config", help="override the config stored with the checkpoint")
    i.add_argument("--seed", type=int)
    i.add_argument("--mode", choices=("window", "whole"))
    i.add_argument("--dump-attention", action="store_true",
                   help="write per-layer attention matrices as CSV")
    i.add_argument("--out-dir", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="AR@AN, AUC and optional mAP / Soft-NMS comparison")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--streams")
    e.add_argument("--proposals", required=True)
    e.add_argument("--an-max", type=int, default=100)
    e.add_argument("--thresholds", help="comma list of tIoU thresholds")
    e.add_argument("--soft-nms", action="store_true", help="also evaluate after Soft-NMS")
    e.add_argument("--soft-nms-sigma", type=float, default=0.5)
    e.add_argument("--video-labels", help="JSON {video_id: label} used for mAP")
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fp-profile", help="false-positive bucket fractions at 1G..kG")
    f.add_argument("--data", required=True)
    f.add_argument("--split", default="val")
    f.add_argument("--streams")
    f.add_argument("--proposals", required=True)
    f.add_argument("--max-multiplier", type=int, default=10)
    f.add_argument("--out-dir", required=True)
    f.set_defaults(func=cmd_fp_profile)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "an_max", 1) < 1:
        parser.error("--an-max must be >= 1")
    try:
        with _thread_limit():
            args.func(args)
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename}", file=sys.stderr)
        return 1
    except ConfigParseError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 1
    except (CliError, CheckpointFormatError, FeatureFormatError, FusionError,
            GenerationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
