"""Detection and classification metrics.

Only malignant findings are detection targets. AP averages all-points
interpolated precision over IoU thresholds 0.25..0.75; FROC and R@t use the
center-hit criterion; AUC is the Mann-Whitney statistic.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .geometry import BBox, center_hit_matrix, iou_matrix

IOU_THRESHOLDS = tuple(round(0.25 + 0.05 * i, 2) for i in range(11))
RECALL_FP = (0.1, 0.25, 0.5)


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: BBox
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise MetricsError(f"non-finite score on {self.image_id}")

    def to_dict(self) -> dict:
        b = self.box
        return {"image_id": self.image_id, "x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2, "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        try:
            box = BBox(float(d["x1"]), float(d["y1"]), float(d["x2"]), float(d["y2"]))
            return cls(str(d["image_id"]), box, float(d["score"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise MetricsError(f"malformed detection {d!r}: {exc}") from exc


@dataclass(frozen=True)
class GroundTruth:
    box: BBox
    label: str  # "malignant" or "benign"


def _boxes(gts, image_id, label="malignant") -> np.ndarray:
    rows = [g.box.to_array() for g in gts.get(image_id, ()) if label is None or g.label == label]
    return np.array(rows, dtype=float).reshape(-1, 4)


def _score_order(dets: list) -> np.ndarray:
    """Descending score, ties by detection index."""
    scores = np.array([d.score for d in dets], dtype=float)
    return np.lexsort((np.arange(len(dets)), -scores))


def _interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-points interpolation over PR points ordered by decreasing threshold."""
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * p[:-1]))


def _greedy_tp(dets: list, order: np.ndarray, gt_boxes: dict, threshold: float) -> np.ndarray:
    """TP flag per detection (in ``order``) from greedy highest-IoU matching."""
    taken = {k: np.zeros(len(v), dtype=bool) for k, v in gt_boxes.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        g = gt_boxes.get(d.image_id)
        if g is None or len(g) == 0:
            continue
        ious = iou_matrix(d.box.to_array()[None], g)[0]
        ious[taken[d.image_id]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= threshold:
            taken[d.image_id][j] = True
            tp[rank] = True
    return tp


def average_precision(dets, gts: dict, images, iou_thresholds=IOU_THRESHOLDS) -> float | None:
    """Mean over IoU thresholds of AP on malignant findings; None without targets.

    ``gts`` maps image id to a list of :class:`GroundTruth`; ``images`` is the
    evaluated image set (detections elsewhere are ignored).
    """
    images = set(images)
    gt_boxes = {k: _boxes(gts, k) for k in images}
    n_gt = sum(len(v) for v in gt_boxes.values())
    if n_gt == 0:
        return None
    dets = [d for d in dets if d.image_id in images]
    if not dets:
        return 0.0
    order = _score_order(dets)
    scores = np.array([dets[i].score for i in order])
    # a PR point only where the score changes: tied detections enter together
    last_of_group = np.append(scores[1:] != scores[:-1], True)
    aps = []
    for thr in iou_thresholds:
        tp = _greedy_tp(dets, order, gt_boxes, thr)
        ctp = np.cumsum(tp)[last_of_group]
        count = (np.arange(len(order)) + 1)[last_of_group]
        aps.append(_interpolated_ap(ctp / n_gt, ctp / count))
    return float(np.mean(aps))


def froc(dets, gts: dict, images, benign_hits_are_fp: bool = True) -> list[tuple[float, float]]:
    """FROC staircase [(fp_per_image, recall)] swept over every distinct score.

    Starts at (0, 0). A malignant finding is detected once any kept detection's
    center lies in its box. Detections hitting no malignant finding are false
    positives, except, with ``benign_hits_are_fp=False``, those hitting a
    benign finding.
    """
    images = list(dict.fromkeys(images))
    image_set = set(images)
    n_images = len(images)
    dets = [d for d in dets if d.image_id in image_set]
    mal = {k: _boxes(gts, k) for k in images}
    benign = {k: _boxes(gts, k, "benign") for k in images}
    offsets, n_gt = {}, 0
    for k in images:
        offsets[k] = n_gt
        n_gt += len(mal[k])
    curve = [(0.0, 0.0)]
    if not dets or n_images == 0:
        return curve
    order = _score_order(dets)
    hit = np.zeros(n_gt, dtype=bool)
    fp = 0
    tp = 0
    for pos, i in enumerate(order):
        d = dets[i]
        hits = center_hit_matrix(d.box.to_array()[None], mal[d.image_id])[0]
        if hits.any():
            idx = offsets[d.image_id] + np.nonzero(hits)[0]
            tp += int((~hit[idx]).sum())
            hit[idx] = True
        elif benign_hits_are_fp or not center_hit_matrix(d.box.to_array()[None], benign[d.image_id]).any():
            fp += 1
        nxt = order[pos + 1] if pos + 1 < len(order) else None
        if nxt is None or dets[nxt].score != d.score:
            curve.append((fp / n_images, tp / n_gt if n_gt else 0.0))
    return curve


def recall_at_fp(curve, t: float) -> float:
    """Largest recall among curve points with at most ``t`` false positives per image."""
    if t < 0:
        raise MetricsError(f"FP/image threshold must be >= 0, got {t}")
    ok = [r for f, r in curve if f <= t]
    return float(max(ok)) if ok else 0.0


def roc_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(equal), from tie-averaged ranks."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise MetricsError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("AUC needs both positive and negative samples")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# -- reports ------------------------------------------------------------------


@dataclass
class EvalReport:
    ap_mb: float | None
    ap_all: float | None
    delta: float | None
    recall_at: dict
    froc: list = field(default_factory=list)
    breast_auc: float | None = None
    exam_auc: float | None = None
    include_negatives: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recall_at"] = {str(k): v for k, v in self.recall_at.items()}
        d["froc"] = [list(p) for p in self.froc]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["recall_at"] = {float(k): v for k, v in d["recall_at"].items()}
        d["froc"] = [tuple(p) for p in d.get("froc", [])]
        return cls(**d)


def _safe_auc(scores, labels) -> float | None:
    try:
        return roc_auc(scores, labels)
    except MetricsError:
        return None


def evaluate(dets, gts: dict, mb_images, all_images, breast_scores: dict | None = None,
             breast_labels: dict | None = None, exams: dict | None = None,
             include_negatives: bool = True, benign_hits_are_fp: bool = True) -> EvalReport:
    """Assemble an :class:`EvalReport`.

    ``mb_images`` are the images of breasts with findings, ``all_images`` adds
    the negatives. FROC and recalls use ``all_images`` when
    ``include_negatives`` is set, ``mb_images`` otherwise. ``exams`` maps exam
    id to its breast ids.
    """
    ap_mb = average_precision(dets, gts, mb_images)
    ap_all = average_precision(dets, gts, all_images)
    delta = None if ap_mb is None or ap_all is None else ap_all - ap_mb
    curve = froc(dets, gts, all_images if include_negatives else mb_images, benign_hits_are_fp)
    recalls = {t: recall_at_fp(curve, t) for t in RECALL_FP}
    breast_auc = exam_auc = None
    if breast_scores and breast_labels:
        ids = sorted(breast_scores)
        breast_auc = _safe_auc([breast_scores[i] for i in ids], [breast_labels[i] for i in ids])
        if exams:
            eids = sorted(exams)
            e_scores = [max(breast_scores[b] for b in exams[e]) for e in eids]
            e_labels = [any(breast_labels[b] for b in exams[e]) for e in eids]
            exam_auc = _safe_auc(e_scores, e_labels)
    return EvalReport(ap_mb, ap_all, delta, recalls, curve, breast_auc, exam_auc, include_negatives)


# -- files --------------------------------------------------------------------


def save_detections(dets, path) -> None:
    Path(path).write_text(json.dumps([d.to_dict() for d in dets]))


def load_detections(path) -> list[Detection]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise MetricsError("detections file must hold a JSON list")
    return [Detection.from_dict(d) for d in data]


def save_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1))


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def save_froc_csv(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fp_per_image", "recall"])
        w.writerows([[repr(float(f)), repr(float(r))] for f, r in curve])


def load_froc_csv(path) -> list[tuple[float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["fp_per_image", "recall"]:
        raise MetricsError(f"{path}: expected header fp_per_image,recall")
    try:
        curve = [(float(a), float(b)) for a, b in rows[1:]]
    except ValueError as exc:
        raise MetricsError(f"{path}: {exc}") from exc
    if not all(math.isfinite(f) and math.isfinite(r) for f, r in curve):
        raise MetricsError(f"{path}: non-finite values")
    return curve
