"""Acceptance suite: one PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py -v`` (or ``python tests/test_acceptance.py``).
Criteria 6 and 7 train 20 small detectors and take about 80 minutes on one core;
set MNM_ACCEPT_FAST=1 to skip them.
"""

import itertools
import os
import time
from dataclasses import replace

import numpy as np
import pytest
from conftest import MICRO
from test_metrics import oracle_ap, oracle_froc, random_instance

from mnm.evaluation import evaluate_model
from mnm.matchloss import BreastTargets, ImageTargets, hungarian, total_loss
from mnm.metrics import IOU_THRESHOLDS, average_precision, froc, roc_auc
from mnm.model import DualClassifier, MnMDetector, ModelConfig, mil_pool
from mnm.numerics import Tensor, no_grad
from mnm.numerics.gradcheck import numerical_gradient, relative_error
from mnm.synthdata import DatasetConfig, generate_dataset
from mnm.trainer import TrainConfig, train

SEEDS = (0, 1, 2, 3, 4)
# reduced detector and schedule used for the training-based criteria
PROTOCOL_MODEL = replace(ModelConfig(dropout=0.0), num_proposals=10, dim=32, heads=4, ffn_dim=64,
                         backbone_channels=(8, 16), roi_size=5)
PROTOCOL_ITERATIONS = 1600
PROTOCOL_LR = 3e-4

slow = pytest.mark.skipif(os.environ.get("MNM_ACCEPT_FAST") == "1", reason="MNM_ACCEPT_FAST=1")


def report(n, ok, detail, capsys=None):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    if capsys is None:
        print(line)
    else:
        with capsys.disabled():
            print("\n" + line)
    return ok


# -- 1 gradients ----------------------------------------------------------------


def _criterion_1():
    t0 = time.time()
    model = MnMDetector(MICRO, 0, strict=False)
    model.eval()
    rng = np.random.default_rng(1)
    cc, mlo = rng.normal(size=(1, 32, 32)), rng.normal(size=(1, 32, 32))
    targets = [BreastTargets(ImageTargets([[4, 5, 14, 16], [18, 20, 27, 29]], [True, False]),
                             ImageTargets([[6, 3, 15, 12], [20, 18, 30, 26]], [True, False]), 1, True)]
    anchors = model(cc, mlo).anchor_values

    def loss():
        return total_loss(model.forward(cc, mlo, None, replay_anchors=anchors), targets)[0]

    model.zero_grad()
    loss().backward()
    worst, worst_name = 0.0, None
    for name, p in model.named_parameters():
        err = relative_error(p.grad.copy(), numerical_gradient(loss, p))
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.time() - t0
    ok = worst <= 1e-4 and elapsed < 120
    return ok, f"worst relative error {worst:.2e} ({worst_name}), {elapsed:.0f}s"


# -- 2 matching -----------------------------------------------------------------


def _criterion_2():
    t0 = time.time()
    rng = np.random.default_rng(2)
    bad = 0
    for k in range(500):
        n = int(rng.integers(1, 8))
        g = int(rng.integers(0, n + 1))
        cost = rng.normal(size=(g, n))
        if k % 3 == 0:
            cost = np.round(cost)
        brute = min((sum(cost[r, p[r]] for r in range(g)) for p in itertools.permutations(range(n), g)),
                    default=0.0)
        m = hungarian(cost)
        got = sum(cost[r, c] for r, c in enumerate(m.assignment)) if g else 0.0
        bad += got != brute
    elapsed = time.time() - t0
    return bad == 0 and elapsed < 30, f"{bad}/500 mismatches, {elapsed:.1f}s"


# -- 3 metric oracles -----------------------------------------------------------


def _criterion_3():
    t0 = time.time()
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(200):
        dets, gts, images = random_instance(rng)
        got = average_precision(dets, gts, images)
        if got is not None:
            want = float(np.mean([oracle_ap(dets, gts, images, t) for t in IOU_THRESHOLDS]))
            bad += abs(got - want) > 1e-12
        for flag in (True, False):
            a, b = froc(dets, gts, images, flag), oracle_froc(dets, gts, images, flag)
            bad += len(a) != len(b) or not np.allclose(a, b, rtol=0, atol=1e-12)
    for n in (2, 10, 100, 1000):
        scores = np.round(rng.uniform(size=n), 2)
        labels = np.arange(n) % 2 == 0
        pos, neg = scores[labels], scores[~labels]
        brute = (np.sum(pos[:, None] > neg[None, :]) + 0.5 * np.sum(pos[:, None] == neg[None, :])) / (len(pos) * len(neg))
        bad += roc_auc(scores, labels) != brute
    elapsed = time.time() - t0
    return bad == 0 and elapsed < 60, f"{bad} mismatches, {elapsed:.1f}s"


# -- 4 dual-head coupling -------------------------------------------------------


def _criterion_4():
    violations = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        head = DualClassifier(32, rng)
        with no_grad():
            o, m = head(Tensor(rng.normal(size=(1000, 32))))
        o, m = o.data, m.data
        violations += int(np.sum(m >= o))
        violations += int(np.sum(1 / (1 + np.exp(-m)) >= 1 / (1 + np.exp(-o))))
    return violations == 0, f"{violations} violations over 1e5 inputs"


# -- 5 noisy-OR -----------------------------------------------------------------


def _criterion_5():
    ok = mil_pool(np.zeros(7)) == 0.0 and mil_pool([0.2, 1.0, 0.4]) == 1.0
    ok &= abs(mil_pool([0.5, 0.5]) - 0.75) <= 1e-12
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(10_000):
        p = rng.uniform(size=int(rng.integers(1, 20)))
        no, mx, mn = mil_pool(p, "noisy_or"), mil_pool(p, "max"), mil_pool(p, "mean")
        bad += not (no >= mx - 1e-15 and mx >= mn)
    return ok and bad == 0, f"identities {'hold' if ok else 'broken'}, {bad}/10000 ordering violations"


# -- 6 and 7 directional runs ---------------------------------------------------


def run_protocol(seed, dual, multi_view, mil, ambiguity=0.3):
    ds = generate_dataset(DatasetConfig(seed=seed, ambiguity_fraction=ambiguity))
    cfg = TrainConfig(iterations=PROTOCOL_ITERATIONS, base_lr=PROTOCOL_LR, seed=seed, flip=True,
                      dual_heads=dual, multi_view=multi_view, mil=mil)
    res = train(PROTOCOL_MODEL, cfg, ds.split("train"), strict=False)
    rep, _ = evaluate_model(res.state.model, ds.split("test"), with_auc=mil)
    return rep


def _criterion_6():
    t0 = time.time()
    full = [run_protocol(s, True, True, True) for s in SEEDS]
    dual = [run_protocol(s, True, False, False) for s in SEEDS]
    r_full = np.mean([r.recall_at[0.1] for r in full])
    r_dual = np.mean([r.recall_at[0.1] for r in dual])
    d_full = np.mean([abs(r.delta) for r in full])
    d_dual = np.mean([abs(r.delta) for r in dual])
    auc = np.mean([r.breast_auc for r in full])
    a, b, c = r_full > r_dual, d_full < d_dual, auc >= 0.85
    minutes = (time.time() - t0) / 60
    detail = (f"(a) R@0.1 {r_full:.3f} vs {r_dual:.3f} {'ok' if a else 'no'}; "
              f"(b) |delta| {d_full:.4f} vs {d_dual:.4f} {'ok' if b else 'no'}; "
              f"(c) breast AUC {auc:.3f} {'ok' if c else 'no'}; {minutes:.0f} min")
    return a and b and c, detail


def _criterion_7():
    wins, rows = 0, []
    for s in SEEDS:
        mv = run_protocol(s, True, True, True, ambiguity=0.5).recall_at[0.25]
        flat = run_protocol(s, True, False, True, ambiguity=0.5).recall_at[0.25]
        wins += mv > flat
        rows.append(f"{mv:.3f}/{flat:.3f}")
    return wins >= 4, f"multi-view R@0.25 wins on {wins}/5 seeds ({', '.join(rows)})"


# -- 8 determinism and resume ---------------------------------------------------


def _criterion_8(tmp):
    ds = list(generate_dataset(DatasetConfig(counts={"malignant": 6, "benign": 4, "negative": 6}, seed=3)))
    model = replace(MICRO, image_size=(128, 128))
    cfg = TrainConfig(iterations=8, base_lr=1e-3, batch_breasts=2, seed=0, flip=True, lr_drop_fractions=(0.5, 0.75))
    files = ("params.bin", "params.json", "moments.bin", "state.json")
    for name in ("a", "b"):
        train(model, cfg, ds, out_dir=tmp / name, strict=False)
    same = all((tmp / "a/checkpoint" / f).read_bytes() == (tmp / "b/checkpoint" / f).read_bytes() for f in files)
    train(model, cfg, ds, out_dir=tmp / "r", stop_after=3, strict=False)
    train(model, cfg, ds, out_dir=tmp / "r", resume=tmp / "r/checkpoint", strict=False)
    resumed = all((tmp / "a/checkpoint" / f).read_bytes() == (tmp / "r/checkpoint" / f).read_bytes() for f in files)
    resumed &= (tmp / "a/loss.csv").read_bytes() == (tmp / "r/loss.csv").read_bytes()
    return same and resumed, f"bitwise identical {same}, resume equivalent {resumed}"


# -- 9 overfit ------------------------------------------------------------------


def _criterion_9():
    ds = generate_dataset(DatasetConfig(counts={"malignant": 8, "benign": 0, "negative": 0},
                                        annotated_fraction={"malignant": 1.0, "benign": 1.0, "negative": 0.0}, seed=0))
    cfg = TrainConfig(iterations=300, base_lr=5e-4, batch_breasts=8, mil=False, seed=0, lr_drop_fractions=(0.9, 0.95))
    totals = []
    train(PROTOCOL_MODEL, cfg, list(ds)[:8], strict=False, callback=lambda i, b: totals.append(b.total))
    ratio = min(totals) / totals[0]
    return ratio < 0.10, f"best total loss {ratio:.3f} of initial after {len(totals)} iterations"


# -- pytest entry points --------------------------------------------------------


def _check(n, result, capsys):
    ok, detail = result
    report(n, ok, detail, capsys)
    assert ok, detail


def test_criterion_1_gradients(capsys):
    _check(1, _criterion_1(), capsys)


def test_criterion_2_matching(capsys):
    _check(2, _criterion_2(), capsys)


def test_criterion_3_metric_oracles(capsys):
    _check(3, _criterion_3(), capsys)


def test_criterion_4_dual_head_coupling(capsys):
    _check(4, _criterion_4(), capsys)


def test_criterion_5_noisy_or(capsys):
    _check(5, _criterion_5(), capsys)


@slow
def test_criterion_6_directional_ablation(capsys):
    _check(6, _criterion_6(), capsys)


@slow
def test_criterion_7_multi_view(capsys):
    _check(7, _criterion_7(), capsys)


def test_criterion_8_determinism_and_resume(capsys, tmp_path):
    _check(8, _criterion_8(tmp_path), capsys)


def test_criterion_9_overfit(capsys):
    _check(9, _criterion_9(), capsys)


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    fast = os.environ.get("MNM_ACCEPT_FAST") == "1"
    with tempfile.TemporaryDirectory() as tmp:
        checks = [(1, _criterion_1), (2, _criterion_2), (3, _criterion_3), (4, _criterion_4), (5, _criterion_5),
                  (6, None if fast else _criterion_6), (7, None if fast else _criterion_7),
                  (8, lambda: _criterion_8(Path(tmp))), (9, _criterion_9)]
        for n, fn in checks:
            if fn is None:
                print(f"SKIP criterion {n}")
            else:
                report(n, *fn())
