import csv
import json

import numpy as np
import pytest

from mnm import cli, trainer
from mnm.matchloss import LossBreakdown
from mnm.metrics import load_detections, load_report

TINY_MODEL = {"num_proposals": 3, "dim": 8, "heads": 2, "roi_size": 3, "dynamic_dim": 4, "ffn_dim": 16,
              "backbone_channels": [4, 4], "dropout": 0.0}
TINY_DATA = {"counts": {"malignant": 10, "benign": 4, "negative": 26}, "seed": 11}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "data.json").write_text(json.dumps(TINY_DATA))
    (root / "model.json").write_text(json.dumps(TINY_MODEL))
    (root / "train.json").write_text(json.dumps({"iterations": 4, "batch_breasts": 2, "base_lr": 1e-3}))
    assert run("generate", "--config", root / "data.json", "--out", root / "data") == 0
    return root


def train_args(root, out, *extra):
    return ["train", "--data", root / "data", "--out", out, "--model-config", root / "model.json",
            "--train-config", root / "train.json", *extra]


def test_generate_is_reproducible(workdir, tmp_path):
    assert run("generate", "--config", workdir / "data.json", "--out", tmp_path / "again") == 0
    a, b = workdir / "data", tmp_path / "again"
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    for f in sorted((a / "images").iterdir()):
        assert f.read_bytes() == (b / "images" / f.name).read_bytes()
    manifest = json.loads((a / cli.RUN_MANIFEST).read_text())
    assert manifest["command"] == "generate" and manifest["seed"] == 11


def test_generate_default_split_ratio(tmp_path):
    assert run("generate", "--out", tmp_path / "d", "--seed", 2) == 0
    splits = [b["split"] for b in json.loads((tmp_path / "d/manifest.json").read_text())["breasts"]]
    assert len(splits) == 1000
    assert splits.count("train") == 800 and splits.count("val") == 100 and splits.count("test") == 100


def test_usage_and_input_errors(workdir, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("generate")
    assert exc.value.code == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert run("generate", "--config", tmp_path / "bad.json", "--out", tmp_path / "x") == 2
    (tmp_path / "unknown.json").write_text(json.dumps({"colour": 3}))
    assert run("generate", "--config", tmp_path / "unknown.json", "--out", tmp_path / "y") == 2
    assert run("generate", "--config", tmp_path / "missing.json", "--out", tmp_path / "z") == 3
    # run directories are append-only
    assert run("generate", "--config", workdir / "data.json", "--out", workdir / "data") == 3
    assert run(*train_args(workdir, tmp_path / "t", "--set", "nonsense")) == 2
    assert run(*train_args(workdir, tmp_path / "t", "--set", "iterations=0")) == 2
    assert "mnm" in capsys.readouterr().err


def test_train_smoke_and_overrides(workdir, tmp_path):
    out = tmp_path / "run"
    assert run(*train_args(workdir, out, "--set", "mil=false", "--set", "model.num_proposals=4")) == 0
    manifest = json.loads((out / cli.RUN_MANIFEST).read_text())
    assert manifest["config"]["train"]["mil"] is False
    assert manifest["config"]["model"]["num_proposals"] == 4
    assert "--set" in manifest["argv"]
    with open(out / "loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 5 and np.isfinite(float(rows[-1][-1]))
    assert (out / "checkpoint/params.bin").exists()
    assert run(*train_args(workdir, out)) == 3
    assert run(*train_args(workdir, out, "--force")) == 0


def test_train_resume_matches_uninterrupted(workdir, tmp_path):
    assert run(*train_args(workdir, tmp_path / "full")) == 0
    assert run(*train_args(workdir, tmp_path / "half", "--stop-after", 2)) == 0
    assert run(*train_args(workdir, tmp_path / "rest", "--from", tmp_path / "half/checkpoint")) == 0
    assert ((tmp_path / "full/checkpoint/params.bin").read_bytes()
            == (tmp_path / "rest/checkpoint/params.bin").read_bytes())
    # resuming under a different config is a mismatch
    assert run(*train_args(workdir, tmp_path / "bad", "--from", tmp_path / "half/checkpoint",
                           "--set", "base_lr=0.01")) == 5


def test_train_divergence_exit_code(workdir, tmp_path, monkeypatch):
    def broken(model, breasts, loss_cfg, rng=None):
        return LossBreakdown(total=float("inf")), {k: np.zeros_like(p.data) for k, p in model.named_parameters()}

    monkeypatch.setattr(trainer, "loss_and_gradients", broken)
    assert run(*train_args(workdir, tmp_path / "div", "--set", "iterations=20")) == 4


@pytest.fixture(scope="module")
def trained(workdir):
    out = workdir / "trained"
    assert run(*train_args(workdir, out)) == 0
    return out / "checkpoint"


def test_eval_outputs_and_negatives_flag(workdir, trained, tmp_path):
    assert run("eval", "--data", workdir / "data", "--checkpoint", trained, "--out", tmp_path / "with") == 0
    assert run("eval", "--data", workdir / "data", "--checkpoint", trained, "--out", tmp_path / "without",
               "--include-negatives", "false") == 0
    with_neg = load_report(tmp_path / "with/report.json")
    without = load_report(tmp_path / "without/report.json")
    assert with_neg.include_negatives and not without.include_negatives
    assert with_neg.delta == pytest.approx(with_neg.ap_all - with_neg.ap_mb)
    assert with_neg.ap_mb == without.ap_mb and with_neg.ap_all == without.ap_all
    dets = load_detections(tmp_path / "with/detections.json")
    assert dets and all(0.0 <= d.score <= 1.0 for d in dets)
    raw = json.loads((tmp_path / "with/detections.json").read_text())
    assert set(raw[0]) == {"image_id", "x1", "y1", "x2", "y2", "score"}
    assert (tmp_path / "with/froc.csv").read_text().startswith("fp_per_image,recall")


def test_eval_errors(workdir, trained, tmp_path):
    import shutil
    assert run("eval", "--data", workdir / "data", "--checkpoint", trained, "--out", tmp_path / "e",
               "--split", "nowhere") == 2
    broken = tmp_path / "ckpt"
    shutil.copytree(trained, broken)
    cfg = json.loads((broken / "model_config.json").read_text())
    cfg["dim"] = 16
    cfg["heads"] = 2
    (broken / "model_config.json").write_text(json.dumps(cfg))
    assert run("eval", "--data", workdir / "data", "--checkpoint", broken, "--out", tmp_path / "m") == 5


def test_ablate_and_plot(workdir, tmp_path):
    out = tmp_path / "abl"
    assert run("ablate", "--data", workdir / "data", "--out", out, "--model-config", workdir / "model.json",
               "--train-config", workdir / "train.json") == 0
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["config"] for r in rows] == ["baseline", "dual", "dual+mv", "dual+mil", "full"]
    for col in ("ap_mb", "ap", "delta", "r_at_0.1", "breast_auc"):
        assert col in rows[0]
    for r in rows:
        assert r["status"] == "ok"
        assert (r["breast_auc"] == "") == (r["mil"] == "False")
    reports = [out / r["config"] / "froc.csv" for r in rows]
    svg = tmp_path / "froc.svg"
    assert run("plot", "--report", *reports, "--out", svg, "--labels", *[r["config"] for r in rows]) == 0
    text = svg.read_text()
    assert text.lstrip().startswith("<?xml") and "<svg" in text
    for r in rows:
        assert r["config"] in text
    one = tmp_path / "one.svg"
    assert run("plot", "--report", reports[0], "--out", one) == 0
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\n1,2\n")
    assert run("plot", "--report", bad, "--out", tmp_path / "bad.svg") == 2
