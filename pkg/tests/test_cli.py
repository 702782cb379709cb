import csv
import hashlib
import json

import pytest

from tadprop.cli import main
from tadprop.config import TrainConfig, load_config

TINY = {"d_model": 16, "heads": 2, "d_ffn": 32, "layers": 1, "n_queries": 4, "tem_hidden": 8,
        "d_pos": 8, "batch_size": 16, "tem_epochs": 1, "epochs_strict": 2, "epochs_relaxed": 1,
        "epochs_complete": 1, "max_grad_norm": 0.1}
SYNTH = {"n_train": 6, "n_val": 3}


def tree_hash(root):
    """Digest of every artifact under ``root`` except the manifest (it holds timings)."""
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "synth.json").write_text(json.dumps(SYNTH))
    (d / "train.json").write_text(json.dumps(TINY, indent=1))
    assert main(["synth", "--seed", "7", "--config", str(d / "synth.json"),
                 "--out-dir", str(d / "data")]) == 0
    assert main(["train", "--data", str(d / "data"), "--config", str(d / "train.json"),
                 "--seed", "1", "--out-dir", str(d / "run")]) == 0
    return d


def test_synth_reproducible(work):
    out = work / "again"
    assert main(["synth", "--seed", "7", "--config", str(work / "synth.json"),
                 "--out-dir", str(out)]) == 0
    assert tree_hash(out) == tree_hash(work / "data")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["config"]["n_train"] == 6


def test_train_artifacts_and_manifest(work):
    run = work / "run"
    assert {p.name for p in run.iterdir()} >= {"model.rtdw", "config.json", "loss_log.csv",
                                               "manifest.json"}
    manifest = json.loads((run / "manifest.json").read_text())
    # the manifest carries the full resolved config, defaults included
    assert set(manifest["config"]) == set(TrainConfig().to_dict())
    assert manifest["config"]["seed"] == 1 and manifest["config"]["layers"] == 1
    assert {"strict", "relaxed_finetune", "completeness"} <= set(manifest["timings_ms"])
    rows = list(csv.DictReader(open(run / "loss_log.csv")))
    assert [r["phase"] for r in rows] == ["strict", "strict", "relaxed_finetune", "completeness"]


def test_train_and_infer_reproducible(work):
    again = work / "run2"
    assert main(["train", "--data", str(work / "data"), "--config", str(work / "train.json"),
                 "--seed", "1", "--out-dir", str(again)]) == 0
    assert tree_hash(again) == tree_hash(work / "run")
    for name in ("inf_a", "inf_b"):
        assert main(["infer", "--data", str(work / "data"), "--checkpoint",
                     str(work / "run" / "model.rtdw"), "--out-dir", str(work / name)]) == 0
    assert tree_hash(work / "inf_a") == tree_hash(work / "inf_b")
    rows = (work / "inf_a" / "proposals.jsonl").read_text().splitlines()
    assert len(rows) == 3 * 4  # 3 videos, one window each, N_q = 4
    timings = json.loads((work / "inf_a" / "manifest.json").read_text())["timings_ms"]
    assert {"boundary_ms", "encoder_ms", "decoder_ms", "heads_ms"} <= set(timings)


def test_train_tem_then_train(work):
    assert main(["train-tem", "--data", str(work / "data"), "--config", str(work / "train.json"),
                 "--seed", "1", "--out-dir", str(work / "tem")]) == 0
    assert (work / "tem" / "tem.rtdw").exists()
    assert main(["train", "--data", str(work / "data"), "--config", str(work / "train.json"),
                 "--seed", "1", "--tem", str(work / "tem" / "tem.rtdw"),
                 "--out-dir", str(work / "run_tem")]) == 0


def test_infer_whole_mode_hundred_rows(work):
    cfg = dict(TINY, n_queries_whole=100, mode="whole")
    (work / "whole.json").write_text(json.dumps(cfg))
    assert main(["train", "--data", str(work / "data"), "--config", str(work / "whole.json"),
                 "--seed", "2", "--out-dir", str(work / "run_whole")]) == 0
    assert main(["infer", "--data", str(work / "data"), "--checkpoint",
                 str(work / "run_whole" / "model.rtdw"), "--out-dir", str(work / "inf_whole")]) == 0
    rows = [json.loads(x) for x in (work / "inf_whole" / "proposals.jsonl").read_text().splitlines()]
    per_video = {}
    for r in rows:
        per_video[r["video_id"]] = per_video.get(r["video_id"], 0) + 1
    assert per_video and set(per_video.values()) == {100}


def test_dump_attention(work):
    assert main(["infer", "--data", str(work / "data"), "--checkpoint",
                 str(work / "run" / "model.rtdw"), "--dump-attention",
                 "--out-dir", str(work / "inf_attn")]) == 0
    files = sorted(p.name for p in (work / "inf_attn" / "attention").iterdir())
    assert "val_0000_attn_cross_layer0.csv" in files and "val_0000_attn_self_layer0.csv" in files


def test_eval_exact_match_gives_full_recall(work):
    props = []
    for ann in sorted((work / "data" / "annotations").glob("val_*.json")):
        a = json.loads(ann.read_text())
        for g in a["instances"]:
            props.append({"video_id": a["video_id"], "start_sec": g["start_sec"],
                          "end_sec": g["end_sec"], "score": 1.0})
    (work / "exact.jsonl").write_text("".join(json.dumps(p) + "\n" for p in props))
    assert main(["eval", "--data", str(work / "data"), "--proposals", str(work / "exact.jsonl"),
                 "--soft-nms", "--out-dir", str(work / "ev")]) == 0
    rows = list(csv.DictReader(open(work / "ev" / "ar_an.csv")))
    # with k GTs per video, AN=k keeps all of them
    assert float(rows[-1]["ar"]) == 1.0
    summary = dict(csv.reader(open(work / "ev" / "summary.csv")))
    assert float(summary["ar@100"]) == 1.0 and "auc_delta" in summary


def test_eval_single_gt_ar_at_one(tmp_path):
    root = tmp_path / "d"
    (root / "annotations").mkdir(parents=True)
    (root / "features").mkdir()
    from tadprop.data import FeatureSequence, write_features
    write_features(root / "features" / "v.rtdf", FeatureSequence("v", [[0.0]] * 10))
    (root / "annotations" / "v.json").write_text(json.dumps(
        {"video_id": "v", "duration_sec": 10, "instances": [{"start_sec": 2, "end_sec": 5}]}))
    (root / "splits.json").write_text(json.dumps({"val": ["v"]}))
    (tmp_path / "p.jsonl").write_text(json.dumps(
        {"video_id": "v", "start_sec": 2, "end_sec": 5, "score": 0.9, "label": "action"}) + "\n")
    assert main(["eval", "--data", str(root), "--proposals", str(tmp_path / "p.jsonl"),
                 "--an-max", "5", "--thresholds", "0.5,0.7,0.9", "--out-dir", str(tmp_path / "e")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "e" / "ar_an.csv")))
    assert rows[0]["an"] == "1" and float(rows[0]["ar"]) == 1.0
    assert (tmp_path / "e" / "map.csv").exists()
    assert main(["fp-profile", "--data", str(root), "--proposals", str(tmp_path / "p.jsonl"),
                 "--max-multiplier", "2", "--out-dir", str(tmp_path / "f")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "f" / "fp_profile.csv")))
    assert float(rows[0]["tp"]) == 1.0


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["synth", "--seed", "1", "--out-dir", "x", "--nope"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["train", "--data", "x", "--out-dir", "y"])  # seed is mandatory
    assert e.value.code == 2


def test_missing_file_exit_1(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["train", "--data", str(missing), "--seed", "1", "--out-dir", str(tmp_path)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_config_error_reports_line(work, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n "lr": 0.001,\n "layers": 2,\n}\n')
    assert main(["train", "--data", str(work / "data"), "--config", str(bad), "--seed", "1",
                 "--out-dir", str(tmp_path / "o")]) == 1
    assert "line 4" in capsys.readouterr().err
    bad.write_text('{\n "lr": 0.001,\n "not_a_key": 2\n}\n')
    assert main(["train", "--data", str(work / "data"), "--config", str(bad), "--seed", "1",
                 "--out-dir", str(tmp_path / "o")]) == 1
    assert "line 3" in capsys.readouterr().err


def test_flags_override_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "mode": "window"}))
    cfg = load_config(p, {"seed": 9, "mode": None})
    assert cfg.seed == 9 and cfg.mode == "window"


def test_thread_cap_env(work, monkeypatch):
    monkeypatch.setenv("RTD_THREADS", "1")
    assert main(["synth", "--seed", "1", "--config", str(work / "synth.json"),
                 "--out-dir", str(work / "thr")]) == 0
