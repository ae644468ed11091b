"""Run a trained detector over breasts and score it with :mod:`mnm.metrics`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BBox
from .metrics import Detection, EvalReport, GroundTruth, evaluate
from .numerics import no_grad
from .numerics.tensor import _sigmoid


def image_id(breast_id: str, view: str) -> str:
    return f"{breast_id}_{view}"


@dataclass
class Predictions:
    detections: list
    image_scores: dict   # image id -> score
    breast_scores: dict  # breast id -> score


def predict(model, breasts, batch_breasts: int = 8) -> Predictions:
    """Every final-stage proposal becomes a detection scored by sigmoid(malignancy)."""
    model.eval()
    dets, image_scores, breast_scores = [], {}, {}
    breasts = list(breasts)
    with no_grad():
        for start in range(0, len(breasts), batch_breasts):
            chunk = breasts[start:start + batch_breasts]
            cc = np.stack([b.image_cc for b in chunk]).astype(np.float64)
            mlo = np.stack([b.image_mlo for b in chunk]).astype(np.float64)
            out = model(cc, mlo)
            final = out.final
            probs = _sigmoid(final.malignancy.data)
            scores = out.image_scores
            b = len(chunk)
            for i, breast in enumerate(chunk):
                for v, view in enumerate(("cc", "mlo")):
                    row = v * b + i
                    iid = image_id(breast.breast_id, view)
                    image_scores[iid] = float(scores[row])
                    for box, p in zip(final.boxes_clipped[row], probs[row]):
                        dets.append(Detection(iid, BBox.from_array(box), float(p)))
                breast_scores[breast.breast_id] = float(out.breast_scores[i])
    return Predictions(dets, image_scores, breast_scores)


def ground_truth(breasts) -> tuple[dict, list, list]:
    """(gts by image id, images of breasts with findings, all images)."""
    gts, mb, every = {}, [], []
    for breast in breasts:
        for view in ("cc", "mlo"):
            iid = image_id(breast.breast_id, view)
            gts[iid] = [GroundTruth(f.box(view), f.label) for f in breast.findings]
            every.append(iid)
            if breast.category != "negative":
                mb.append(iid)
    return gts, mb, every


def evaluate_predictions(pred: Predictions, breasts, include_negatives: bool = True,
                         benign_hits_are_fp: bool = True, with_auc: bool = True) -> EvalReport:
    breasts = list(breasts)
    gts, mb, every = ground_truth(breasts)
    labels = {b.breast_id: b.is_malignant for b in breasts}
    exams = {}
    for b in breasts:
        exams.setdefault(b.exam_id, []).append(b.breast_id)
    return evaluate(
        pred.detections, gts, mb, every,
        breast_scores=pred.breast_scores if with_auc else None,
        breast_labels=labels, exams=exams,
        include_negatives=include_negatives, benign_hits_are_fp=benign_hits_are_fp,
    )


def evaluate_model(model, breasts, include_negatives: bool = True, with_auc: bool = True,
                   benign_hits_are_fp: bool = True) -> tuple[EvalReport, Predictions]:
    breasts = list(breasts)
    pred = predict(model, breasts)
    return evaluate_predictions(pred, breasts, include_negatives, benign_hits_are_fp, with_auc), pred
