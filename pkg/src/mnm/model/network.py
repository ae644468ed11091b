"""The two-view cascade detector with MIL pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import Linear, Module, Parameter, Tensor, stack
from .backbone import Backbone
from .config import ModelConfig
from .heads import CascadeStage, HeadOutput
from . import mil


@dataclass
class CascadeOutput:
    """Batched forward of B breasts: rows 0..B-1 are CC images, B..2B-1 MLO.

    ``stages`` holds one :class:`HeadOutput` per cascade stage.
    ``image_log_complement`` is log(1 - image score) per image, the
    numerically safe form the MIL losses consume.
    """

    stages: list
    image_log_complement: Tensor
    n_breasts: int
    image_size: tuple = (128, 128)
    anchor_values: list | None = None

    @property
    def final(self) -> HeadOutput:
        return self.stages[-1]

    @property
    def image_scores(self) -> np.ndarray:
        return -np.expm1(self.image_log_complement.data)

    @property
    def breast_scores(self) -> np.ndarray:
        s = self.image_scores
        b = self.n_breasts
        return breast_score(s[:b], s[b:])

    def view_rows(self, view: str) -> slice:
        b = self.n_breasts
        return slice(0, b) if view == "cc" else slice(b, 2 * b)

    def for_breast(self, i: int) -> "BreastForward":
        b = self.n_breasts
        rows = {"cc": i, "mlo": b + i}
        per_view = {}
        for view, r in rows.items():
            per_view[view] = [
                HeadOutput(
                    boxes=st.boxes[r],
                    boxes_clipped=st.boxes_clipped[r],
                    objectness=st.objectness[r],
                    malignancy=st.malignancy[r],
                    features=st.features[r],
                )
                for st in self.stages
            ]
        s = self.image_scores
        return BreastForward(per_view["cc"], per_view["mlo"], float(s[i]), float(s[b + i]))


@dataclass
class BreastForward:
    stages_cc: list
    stages_mlo: list
    image_score_cc: float
    image_score_mlo: float

    @property
    def breast_score(self) -> float:
        return float(breast_score(self.image_score_cc, self.image_score_mlo))


def breast_score(cc, mlo):
    """Breast-level malignancy: the mean of its two image scores."""
    return 0.5 * (np.asarray(cc) + np.asarray(mlo))


def exam_score(left, right):
    """Exam-level malignancy: the larger of the two breast scores."""
    return np.maximum(np.asarray(left), np.asarray(right))


def breast_and_exam_scores(image_scores: dict, exams: dict) -> tuple[dict, dict]:
    """Aggregate image scores to breasts and exams.

    ``image_scores`` maps breast id -> {"cc": s, "mlo": s}; ``exams`` maps
    exam id -> list of breast ids. Returns (breast scores, exam scores).
    """
    breasts = {}
    for bid, views in image_scores.items():
        if "cc" not in views or "mlo" not in views:
            raise ValueError(f"breast {bid} is missing a view")
        breasts[bid] = float(breast_score(views["cc"], views["mlo"]))
    exam_scores = {eid: float(max(breasts[b] for b in bids)) for eid, bids in exams.items()}
    return breasts, exam_scores


class MnMDetector(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0, strict: bool = True):
        cfg.validate(strict=strict)
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng)
        n = cfg.num_proposals
        # normalized (cx, cy, w, h); whole-image boxes at start
        self.init_boxes = Parameter(np.tile([0.5, 0.5, 1.0, 1.0], (n, 1)))
        self.init_features = Parameter(rng.normal(0.0, 1.0, size=(n, cfg.dim)))
        self.stages = [CascadeStage(cfg, rng) for _ in range(cfg.stages)]
        self.gap_head = Linear(cfg.dim, 1, rng) if cfg.mil_scheme == "gap" else None

    def initial_boxes(self, height: int, width: int) -> Tensor:
        """Learnable proposals as absolute (N, 4) x1y1x2y2 boxes."""
        b = self.init_boxes
        scale = np.array([width, height, width, height], dtype=float)
        cx, cy, w, h = (b[:, i] for i in range(4))
        xyxy = stack([cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5], axis=-1)
        return xyxy * Tensor(np.tile(scale, (b.shape[0], 1)))

    def __call__(self, images_cc, images_mlo, rng: np.random.Generator | None = None) -> CascadeOutput:
        return self.forward(images_cc, images_mlo, rng)

    def forward(self, images_cc, images_mlo, rng: np.random.Generator | None = None,
                replay_anchors: list | None = None) -> CascadeOutput:
        """Run the cascade on B breasts; ``images_*`` are (B, H, W) arrays.

        Boxes are detached between stages, so the loss is not a smooth
        function of the parameters through them. ``replay_anchors`` (the
        ``anchor_values`` of an earlier output) pins those detached values,
        which is what a finite-difference check of the gradient must hold fixed.
        """
        cc = np.asarray(images_cc, dtype=np.float64)
        mlo = np.asarray(images_mlo, dtype=np.float64)
        if cc.ndim == 2:
            cc, mlo = cc[None], mlo[None]
        if cc.shape != mlo.shape:
            raise ValueError(f"view shapes differ: {cc.shape} vs {mlo.shape}")
        nb, height, width = cc.shape
        features = self.backbone(np.concatenate([cc, mlo], axis=0))
        stride = height / features.shape[1]
        rows = 2 * nb
        h = stack([self.init_features] * rows, axis=0)
        anchors = stack([self.initial_boxes(height, width)] * rows, axis=0)
        outputs, seen = [], []
        for i, stage in enumerate(self.stages):
            crop = None
            if replay_anchors is not None:
                crop = replay_anchors[i]
                if i > 0:
                    anchors = Tensor(crop)
            seen.append(anchors.data.copy())
            out = stage(h, anchors, features, stride, nb, rng, crop_boxes=crop)
            outputs.append(out)
            h = out.features
            anchors = Tensor(out.boxes_clipped)
        lq = mil.image_log_complement(
            outputs[-1].malignancy, outputs[-1].features, self.cfg.mil_scheme, self.gap_head
        )
        return CascadeOutput(outputs, lq, nb, (height, width), seen)

    def cascade_forward(self, image_cc, image_mlo, rng=None) -> BreastForward:
        """Single-breast convenience wrapper around :meth:`forward`."""
        return self.forward(image_cc, image_mlo, rng).for_breast(0)

    def stage_log_complements(self, out: CascadeOutput) -> list:
        """Image log-complements from every stage (deep MIL supervision)."""
        return [
            mil.image_log_complement(st.malignancy, st.features, self.cfg.mil_scheme, self.gap_head)
            for st in out.stages
        ]
