import json

import numpy as np
import pytest

from mnm.geometry import BBox
from mnm.metrics import (
    IOU_THRESHOLDS, Detection, EvalReport, GroundTruth, MetricsError, average_precision, evaluate, froc,
    load_detections, load_froc_csv, load_report, recall_at_fp, roc_auc, save_detections, save_froc_csv,
    save_report,
)
from mnm.geometry import center_hit, iou


# -- oracles ------------------------------------------------------------------


def oracle_ap(dets, gts, images, thr):
    """Sweep each distinct score as a threshold, rematching from scratch each time."""
    images = set(images)
    dets = [d for d in dets if d.image_id in images]
    n_gt = sum(1 for k in images for g in gts.get(k, []) if g.label == "malignant")
    points = []
    for s in sorted({d.score for d in dets}, reverse=True):
        kept = sorted([(i, d) for i, d in enumerate(dets) if d.score >= s], key=lambda t: (-t[1].score, t[0]))
        taken = set()
        tp = 0
        for _, d in kept:
            best, best_j = -1.0, None
            for j, g in enumerate(gts.get(d.image_id, [])):
                if g.label != "malignant" or (d.image_id, j) in taken:
                    continue
                v = iou(d.box, g.box)
                if v > best:
                    best, best_j = v, j
            if best_j is not None and best >= thr:
                taken.add((d.image_id, best_j))
                tp += 1
        points.append((tp / n_gt, tp / len(kept)))
    ap, prev_r = 0.0, 0.0
    for k, (r, _) in enumerate(points):
        p_interp = max(p for _, p in points[k:])
        ap += (r - prev_r) * p_interp
        prev_r = r
    return ap


def oracle_froc(dets, gts, images, benign_fp=True):
    images = list(dict.fromkeys(images))
    dets = [d for d in dets if d.image_id in set(images)]
    n_gt = sum(1 for k in images for g in gts.get(k, []) if g.label == "malignant")
    curve = [(0.0, 0.0)]
    for s in sorted({d.score for d in dets}, reverse=True):
        kept = [d for d in dets if d.score >= s]
        hit, fp = set(), 0
        for d in kept:
            mal = [j for j, g in enumerate(gts.get(d.image_id, [])) if g.label == "malignant" and center_hit(d.box, g.box)]
            ben = [j for j, g in enumerate(gts.get(d.image_id, [])) if g.label == "benign" and center_hit(d.box, g.box)]
            if mal:
                hit.update((d.image_id, j) for j in mal)
            elif benign_fp or not ben:
                fp += 1
        curve.append((fp / len(images), len(hit) / n_gt if n_gt else 0.0))
    return curve


def random_box(rng, size=20.0):
    x, y = rng.uniform(0, size, 2)
    w, h = rng.uniform(1, 8, 2)
    return BBox(x, y, x + w, y + h)


def random_instance(rng):
    n_img = int(rng.integers(1, 6))
    images = [f"i{k}" for k in range(n_img)]
    gts = {}
    for k in images:
        gts[k] = [GroundTruth(random_box(rng), "malignant" if rng.uniform() < 0.7 else "benign")
                  for _ in range(rng.integers(0, 3))]
    dets = []
    for _ in range(rng.integers(0, 7)):
        k = images[rng.integers(n_img)]
        own = gts[k]
        if own and rng.uniform() < 0.6:
            b = own[rng.integers(len(own))].box
            j = rng.normal(scale=1.0, size=4)
            box = BBox(b.x1 + j[0], b.y1 + j[1], max(b.x2 + j[2], b.x1 + j[0] + 0.5), max(b.y2 + j[3], b.y1 + j[1] + 0.5))
        else:
            box = random_box(rng)
        dets.append(Detection(k, box, float(np.round(rng.uniform(), 1))))  # coarse scores force ties
    return dets, gts, images


# -- AP -----------------------------------------------------------------------


def test_ap_matches_enumeration_oracle(rng):
    checked = 0
    for _ in range(200):
        dets, gts, images = random_instance(rng)
        got = average_precision(dets, gts, images)
        if got is None:
            assert not any(g.label == "malignant" for k in images for g in gts[k])
            continue
        want = np.mean([oracle_ap(dets, gts, images, t) for t in IOU_THRESHOLDS])
        assert got == pytest.approx(want, abs=1e-12)
        checked += 1
    assert checked > 50


def test_ap_examples():
    box = BBox(0, 0, 10, 10)
    gts = {"a": [GroundTruth(box, "malignant")]}
    assert average_precision([Detection("a", box, 0.9)], gts, ["a"]) == 1.0
    assert average_precision([], gts, ["a"]) == 0.0
    assert average_precision([Detection("a", box, 0.9)], {"a": [GroundTruth(box, "benign")]}, ["a"]) is None
    # one false positive ranked above the hit halves precision at full recall
    far = BBox(50, 50, 60, 60)
    ap = average_precision([Detection("a", far, 0.9), Detection("a", box, 0.5)], gts, ["a"])
    assert ap == pytest.approx(0.5)
    # a duplicate on the same finding is a false positive
    ap = average_precision([Detection("a", box, 0.9), Detection("a", box, 0.5)], gts, ["a"])
    assert ap == pytest.approx(1.0)


def test_adding_negative_images_with_detections_lowers_ap():
    box = BBox(0, 0, 10, 10)
    gts = {"a": [GroundTruth(box, "malignant")], "n": []}
    dets = [Detection("a", box, 0.5), Detection("n", box, 0.9)]
    assert average_precision(dets, gts, ["a"]) == 1.0
    assert average_precision(dets, gts, ["a", "n"]) == pytest.approx(0.5)
    # empty images change nothing
    assert average_precision(dets[:1], gts, ["a", "n"]) == 1.0


def test_ap_invariant_to_monotone_score_transform(rng):
    for _ in range(30):
        dets, gts, images = random_instance(rng)
        moved = [Detection(d.image_id, d.box, float(np.tanh(3 * d.score - 1))) for d in dets]
        assert average_precision(dets, gts, images) == average_precision(moved, gts, images)
        assert [r for _, r in froc(dets, gts, images)] == [r for _, r in froc(moved, gts, images)]


# -- FROC ---------------------------------------------------------------------


@pytest.mark.parametrize("benign_fp", [True, False])
def test_froc_matches_enumeration_oracle(rng, benign_fp):
    for _ in range(200):
        dets, gts, images = random_instance(rng)
        got = froc(dets, gts, images, benign_fp)
        want = oracle_froc(dets, gts, images, benign_fp)
        assert len(got) == len(want)
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_froc_properties(rng):
    for _ in range(50):
        dets, gts, images = random_instance(rng)
        curve = np.array(froc(dets, gts, images))
        assert tuple(curve[0]) == (0.0, 0.0)
        assert np.all(np.diff(curve[:, 0]) >= 0) and np.all(np.diff(curve[:, 1]) >= 0)
        assert np.all(curve[:, 1] <= 1.0)


def test_froc_center_hit_and_empty_images():
    gt = {"a": [GroundTruth(BBox(0, 0, 10, 10), "malignant")], "b": []}
    # centre (22, 22) outside the finding: a false positive
    assert froc([Detection("a", BBox(4, 4, 40, 40), 0.8)], gt, ["a"])[-1] == (1.0, 0.0)
    # IoU 0.04 but centre inside: a hit
    big = [Detection("a", BBox(-20, -20, 30, 30), 0.8)]
    assert froc(big, gt, ["a"])[-1] == (0.0, 1.0)
    assert froc(big, gt, ["a", "b"])[-1] == (0.0, 1.0)
    fp = [Detection("b", BBox(0, 0, 5, 5), 0.9)] + big
    assert froc(fp, gt, ["a", "b"]) == [(0.0, 0.0), (0.5, 0.0), (0.5, 1.0)]


def test_recall_at_fp_examples():
    curve = [(0.0, 0.0), (0.05, 0.6), (0.3, 0.9)]
    assert recall_at_fp(curve, 0.1) == 0.6
    assert recall_at_fp(curve, 0.3) == 0.9
    assert recall_at_fp(curve, 0.0) == 0.0
    assert recall_at_fp([(0.05, 0.6), (0.3, 0.9)], 0.1) == 0.6
    with pytest.raises(MetricsError):
        recall_at_fp(curve, -0.1)


# -- AUC ----------------------------------------------------------------------


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_auc_matches_pairwise_brute_force(rng):
    for n in (2, 5, 50, 1000):
        scores = np.round(rng.uniform(size=n), 2)
        labels = rng.uniform(size=n) < 0.4
        labels[0], labels[1] = True, False
        assert roc_auc(scores, labels) == brute_auc(scores.tolist(), labels.tolist())


def test_auc_examples_and_errors():
    assert roc_auc([0.1, 0.9], [0, 1]) == 1.0
    assert roc_auc([0.9, 0.1], [0, 1]) == 0.0
    assert roc_auc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(MetricsError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(MetricsError):
        roc_auc([0.1], [1, 0])


# -- reports and files --------------------------------------------------------


def test_evaluate_report_consistency(rng):
    dets, gts, images = random_instance(rng)
    while average_precision(dets, gts, images) is None:
        dets, gts, images = random_instance(rng)
    mb = [k for k in images if gts[k]]
    rep = evaluate(dets, gts, mb, images)
    if rep.ap_mb is not None:
        assert rep.delta == pytest.approx(rep.ap_all - rep.ap_mb)
    r = [rep.recall_at[t] for t in (0.1, 0.25, 0.5)]
    assert r == sorted(r)


def test_evaluate_aucs():
    box = BBox(0, 0, 10, 10)
    gts = {"x_cc": [GroundTruth(box, "malignant")], "y_cc": []}
    rep = evaluate([Detection("x_cc", box, 0.9)], gts, ["x_cc"], ["x_cc", "y_cc"],
                   breast_scores={"x": 0.8, "y": 0.2, "z": 0.1}, breast_labels={"x": True, "y": False, "z": False},
                   exams={"e1": ["x", "y"], "e2": ["z"]})
    assert rep.breast_auc == 1.0 and rep.exam_auc == 1.0
    assert rep.recall_at[0.1] == 1.0 and rep.delta == 0.0


def test_round_trips(tmp_path, rng):
    dets, gts, images = random_instance(rng)
    save_detections(dets, tmp_path / "d.json")
    assert load_detections(tmp_path / "d.json") == dets
    rep = EvalReport(0.5, 0.4, -0.1, {0.1: 0.2, 0.25: 0.3, 0.5: 0.4}, [(0.0, 0.0), (0.5, 0.4)], 0.9, 0.8)
    save_report(rep, tmp_path / "r.json")
    assert load_report(tmp_path / "r.json") == rep
    save_froc_csv(rep.froc, tmp_path / "f.csv")
    assert load_froc_csv(tmp_path / "f.csv") == rep.froc


def test_malformed_files(tmp_path):
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(MetricsError):
        load_froc_csv(tmp_path / "bad.csv")
    (tmp_path / "bad2.csv").write_text("fp_per_image,recall\n1,x\n")
    with pytest.raises(MetricsError):
        load_froc_csv(tmp_path / "bad2.csv")
    (tmp_path / "d.json").write_text(json.dumps([{"image_id": "a"}]))
    with pytest.raises(MetricsError):
        load_detections(tmp_path / "d.json")
    with pytest.raises(MetricsError):
        Detection("a", BBox(0, 0, 1, 1), float("nan"))
