"""Set-prediction objective: bipartite matching, focal and box losses, MIL terms.

Matching is solved per image on the final cascade stage (or per stage with
``rematch_per_stage``). Lesion terms are summed over stages, normalized per
image by ``max(G, 1)`` and only applied to annotated views. Image and breast
cross-entropies are applied to every breast when MIL is enabled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .model.heads import HeadOutput
from .model.mil import bce_from_log_complement, breast_log_complement
from .numerics import Tensor
from .numerics.tensor import _sigmoid

ALPHA = 0.25
GAMMA = 2.0


# -- focal loss ---------------------------------------------------------------


def _softplus(x):
    return np.logaddexp(0.0, x)


def _focal(x: np.ndarray, t: np.ndarray, alpha: float, gamma: float):
    """Elementwise focal loss and its derivative w.r.t. the logit.

    Written with softplus so that neither (1 - p)^gamma nor log p is formed
    from a rounded probability.
    """
    p = _sigmoid(x)
    sp_pos = _softplus(x)    # -log(1 - p)
    sp_neg = _softplus(-x)   # -log p
    pos_w = np.exp(-gamma * sp_pos)  # (1 - p)^gamma
    neg_w = np.exp(-gamma * sp_neg)  # p^gamma
    loss_pos = alpha * pos_w * sp_neg
    loss_neg = (1.0 - alpha) * neg_w * sp_pos
    d_pos = -alpha * pos_w * (gamma * p * sp_neg + (1.0 - p))
    d_neg = (1.0 - alpha) * neg_w * (gamma * (1.0 - p) * sp_pos + p)
    pos = t > 0.5
    return np.where(pos, loss_pos, loss_neg), np.where(pos, d_pos, d_neg)


def focal_loss(logit: float, target: int, alpha: float = ALPHA, gamma: float = GAMMA) -> float:
    """-alpha_t (1 - p_t)^gamma log p_t for a single logit."""
    if not np.isfinite(logit):
        raise ValueError(f"non-finite logit {logit}")
    loss, _ = _focal(np.asarray(float(logit)), np.asarray(float(target)), alpha, gamma)
    return float(loss)


def focal_loss_tensor(logits: Tensor, targets, alpha: float = ALPHA, gamma: float = GAMMA) -> Tensor:
    """Elementwise focal loss as one differentiable op."""
    t = np.asarray(targets, dtype=float)
    if t.shape != logits.shape:
        raise ValueError(f"target shape {t.shape} != logit shape {logits.shape}")
    loss, d = _focal(logits.data, t, alpha, gamma)
    return Tensor.from_op(loss, (logits,), lambda g: (g * d,))


def focal_cost(logits: np.ndarray, alpha: float = ALPHA, gamma: float = GAMMA) -> np.ndarray:
    """Matching cost of calling each logit positive: positive minus negative focal loss."""
    x = np.asarray(logits, dtype=float)
    pos, _ = _focal(x, np.ones_like(x), alpha, gamma)
    neg, _ = _focal(x, np.zeros_like(x), alpha, gamma)
    return pos - neg


# -- assignment ---------------------------------------------------------------


@dataclass(frozen=True)
class MatchResult:
    """``assignment[g]`` is the proposal matched to ground truth ``g``."""

    assignment: np.ndarray
    num_proposals: int
    cost: float = 0.0

    @property
    def proposal_to_gt(self) -> np.ndarray:
        """Ground-truth index per proposal, -1 for background."""
        out = np.full(self.num_proposals, -1, dtype=int)
        out[self.assignment] = np.arange(len(self.assignment))
        return out

    def __len__(self) -> int:
        return len(self.assignment)


def hungarian(cost) -> MatchResult:
    """Minimum-cost injective assignment of the G rows to the N columns (G <= N).

    Shortest augmenting paths with row/column potentials, O(G^2 N).
    """
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {c.shape}")
    g, n = c.shape
    if g > n:
        raise ValueError(f"more ground truths ({g}) than proposals ({n})")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    if g == 0:
        return MatchResult(np.zeros(0, dtype=int), n, 0.0)

    # 1-based with a virtual column 0, following the classic formulation
    u = np.zeros(g + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=int)  # row assigned to each column, 0 = free
    way = np.zeros(n + 1, dtype=int)
    for row in range(1, g + 1):
        owner[0] = row
        col = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[col] = True
            r = owner[col]
            free = ~used
            free[0] = False
            idx = np.nonzero(free)[0]
            reduced = c[r - 1, idx - 1] - u[r] - v[idx]
            better = reduced < minv[idx]
            minv[idx[better]] = reduced[better]
            way[idx[better]] = col
            j = idx[np.argmin(minv[idx])]
            delta = minv[j]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            col = j
            if owner[col] == 0:
                break
        while col:
            prev = way[col]
            owner[col] = owner[prev]
            col = prev
    assignment = np.zeros(g, dtype=int)
    for j in range(1, n + 1):
        if owner[j]:
            assignment[owner[j] - 1] = j - 1
    total = 0.0
    for r in range(g):
        total += c[r, assignment[r]]
    return MatchResult(assignment, n, total)


# -- costs and losses ---------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    alpha: float = ALPHA
    gamma: float = GAMMA
    class_weight: float = 1.0
    giou_weight: float = 2.0
    l1_weight: float = 5.0
    image_weight: float = 0.5
    breast_weight: float = 0.5
    dual_heads: bool = True
    mil: bool = True
    rematch_per_stage: bool = False
    malignancy_matched_only: bool = False
    mil_deep_supervision: bool = False


@dataclass
class ImageTargets:
    """Ground truth of one view: boxes (G, 4) and a malignant flag per box."""

    boxes: np.ndarray
    malignant: np.ndarray
    annotated: bool = True

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 4)
        self.malignant = np.asarray(self.malignant, dtype=bool).reshape(-1)
        if len(self.boxes) != len(self.malignant):
            raise ValueError("one malignant flag per box is required")

    def for_detector(self, dual_heads: bool) -> "ImageTargets":
        """Without dual heads the detector is single-class: benign boxes are dropped."""
        if dual_heads:
            return self
        keep = self.malignant
        return ImageTargets(self.boxes[keep], self.malignant[keep], self.annotated)

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class BreastTargets:
    cc: ImageTargets
    mlo: ImageTargets
    label: int
    annotated: bool

    @classmethod
    def from_sample(cls, breast) -> "BreastTargets":
        views = {}
        for view in ("cc", "mlo"):
            mal = np.array([f.label == "malignant" for f in breast.findings], dtype=bool)
            views[view] = ImageTargets(breast.boxes(view), mal, breast.annotated)
        return cls(views["cc"], views["mlo"], int(breast.is_malignant), bool(breast.annotated))

    def view(self, name: str) -> ImageTargets:
        return self.cc if name == "cc" else self.mlo


def match_cost(stage: HeadOutput, targets: ImageTargets, image_size, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """(G, N) matching cost for one image's stage output (tensors of leading size N)."""
    boxes = stage.boxes.data
    n = boxes.shape[0]
    if len(targets) == 0:
        return np.zeros((0, n))
    height, width = image_size
    obj = focal_cost(stage.objectness.data, cfg.alpha, cfg.gamma)
    cost = np.repeat(cfg.class_weight * obj[None, :], len(targets), axis=0)
    if cfg.dual_heads:
        mal = focal_cost(stage.malignancy.data, cfg.alpha, cfg.gamma)
        cost = cost + cfg.class_weight * np.where(targets.malignant[:, None], mal[None, :], 0.0)
    cost = cost + cfg.l1_weight * geometry.l1_matrix(targets.boxes, boxes, width, height)
    cost = cost + cfg.giou_weight * (1.0 - geometry.giou_matrix(targets.boxes, boxes))
    return cost


def _row(stage: HeadOutput, r: int) -> HeadOutput:
    # values only: matching never needs gradients
    return HeadOutput(Tensor(stage.boxes.data[r]), stage.boxes_clipped[r], Tensor(stage.objectness.data[r]),
                      Tensor(stage.malignancy.data[r]), Tensor(stage.features.data[r]))


def _stage_terms(stage: HeadOutput, matches: list, targets: list, weights: np.ndarray,
                 image_size, cfg: LossConfig) -> tuple:
    """Weighted lesion terms of one stage over R images.

    ``matches[r]``/``targets[r]`` are None for rows that carry no lesion loss;
    ``weights[r]`` already holds the 1/max(G, 1) normalization.
    """
    rows, n = stage.objectness.shape
    height, width = image_size
    obj_t = np.zeros((rows, n))
    mal_t = np.zeros((rows, n))
    mal_mask = np.zeros((rows, n)) if cfg.malignancy_matched_only else np.ones((rows, n))
    pair_rows, pair_cols, pair_boxes, pair_w = [], [], [], []
    for r in range(rows):
        m = matches[r]
        if m is None or len(m) == 0:
            continue
        cols = m.assignment
        obj_t[r, cols] = 1.0
        mal_t[r, cols] = targets[r].malignant.astype(float)
        mal_mask[r, cols] = 1.0
        pair_rows.extend([r] * len(cols))
        pair_cols.extend(cols.tolist())
        pair_boxes.append(targets[r].boxes)
        pair_w.extend([weights[r]] * len(cols))
    w = np.repeat(weights[:, None], n, axis=1)
    objectness = (focal_loss_tensor(stage.objectness, obj_t, cfg.alpha, cfg.gamma) * Tensor(w)).sum()
    if cfg.dual_heads:
        mal = focal_loss_tensor(stage.malignancy, mal_t, cfg.alpha, cfg.gamma)
        malignant = (mal * Tensor(w * mal_mask)).sum()
    else:
        malignant = Tensor(np.array(0.0))
    if pair_rows:
        pred = stage.boxes[(np.array(pair_rows), np.array(pair_cols))]
        gt = np.concatenate(pair_boxes, axis=0)
        pw = Tensor(np.array(pair_w))
        giou = ((1.0 - geometry.giou_tensor(pred, gt)) * pw).sum()
        l1 = (geometry.l1_tensor(pred, gt, width, height) * pw).sum()
    else:
        giou = Tensor(np.array(0.0))
        l1 = Tensor(np.array(0.0))
    return malignant, objectness, giou, l1


def _match_rows(stage: HeadOutput, targets: list, image_size, cfg: LossConfig) -> list:
    out = []
    for r, tg in enumerate(targets):
        if tg is None:
            out.append(None)
            continue
        cost = match_cost(_row(stage, r), tg, image_size, cfg)
        out.append(hungarian(cost))
    return out


def _batched_lesion_terms(stages: list, targets: list, image_size, cfg: LossConfig) -> tuple:
    """Lesion terms summed over stages; rows with ``targets[r] is None`` are skipped."""
    weights = np.array([0.0 if t is None else 1.0 / max(len(t), 1) for t in targets])
    final_matches = _match_rows(stages[-1], targets, image_size, cfg)
    totals = None
    for stage in stages:
        matches = _match_rows(stage, targets, image_size, cfg) if cfg.rematch_per_stage else final_matches
        terms = _stage_terms(stage, matches, targets, weights, image_size, cfg)
        totals = terms if totals is None else tuple(a + b for a, b in zip(totals, terms))
    return totals


def lesion_loss(stages: list, targets: ImageTargets, image_size,
                cfg: LossConfig = LossConfig(), match: MatchResult | None = None) -> tuple:
    """(malignant, objectness, giou, l1) for one image over all its stages.

    ``stages`` hold tensors of leading size N (one image). The final-stage
    match is computed unless ``match`` is given.
    """
    targets = targets.for_detector(cfg.dual_heads)
    batched = [
        HeadOutput(s.boxes.reshape((1, *s.boxes.shape)), s.boxes_clipped[None],
                   s.objectness.reshape((1, -1)), s.malignancy.reshape((1, -1)),
                   s.features.reshape((1, *s.features.shape)))
        for s in stages
    ]
    if match is None:
        return _batched_lesion_terms(batched, [targets], image_size, cfg)
    weights = np.array([1.0 / max(len(targets), 1)])
    totals = None
    for stage in batched:
        terms = _stage_terms(stage, [match], [targets], weights, image_size, cfg)
        totals = terms if totals is None else tuple(a + b for a, b in zip(totals, terms))
    return totals


@dataclass
class LossBreakdown:
    malignant: float = 0.0
    objectness: float = 0.0
    giou: float = 0.0
    l1: float = 0.0
    image: float = 0.0
    breast: float = 0.0
    total: float = 0.0

    FIELDS = ("malignant", "objectness", "giou", "l1", "image", "breast", "total")

    def as_row(self) -> list:
        return [getattr(self, k) for k in self.FIELDS]

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in self.as_row())


def total_loss(out, targets: list, cfg: LossConfig = LossConfig(), stage_log_complements=None):
    """Batch loss of a :class:`~mnm.model.CascadeOutput` over its B breasts.

    Returns ``(loss tensor, LossBreakdown)``. Every component is a mean over
    breasts; lesion terms are summed over the two views of annotated breasts.
    ``stage_log_complements`` (one per stage) enables deep MIL supervision.
    """
    b = out.n_breasts
    if len(targets) != b:
        raise ValueError(f"{len(targets)} targets for {b} breasts")
    rows = [t.cc if t.annotated else None for t in targets] + [t.mlo if t.annotated else None for t in targets]
    rows = [None if r is None else r.for_detector(cfg.dual_heads) for r in rows]
    zero = Tensor(np.array(0.0))
    if any(r is not None for r in rows):
        malignant, objectness, giou, l1 = _batched_lesion_terms(out.stages, rows, out.image_size, cfg)
    else:
        malignant = objectness = giou = l1 = zero
    image = breast = zero
    if cfg.mil:
        labels = np.array([t.label for t in targets], dtype=float)
        lqs = stage_log_complements if cfg.mil_deep_supervision else [out.image_log_complement]
        if lqs is None:
            raise ValueError("deep MIL supervision needs per-stage log-complements")
        for lq in lqs:
            image = image + bce_from_log_complement(lq, np.concatenate([labels, labels])).sum() * 0.5
            lq_breast = breast_log_complement(lq[:b], lq[b:])
            breast = breast + bce_from_log_complement(lq_breast, labels).sum()
    inv_b = 1.0 / b
    parts = {
        "malignant": malignant * inv_b,
        "objectness": objectness * inv_b,
        "giou": giou * inv_b,
        "l1": l1 * inv_b,
        "image": image * inv_b,
        "breast": breast * inv_b,
    }
    total = (
        parts["malignant"] + parts["objectness"]
        + parts["giou"] * cfg.giou_weight + parts["l1"] * cfg.l1_weight
        + parts["image"] * cfg.image_weight + parts["breast"] * cfg.breast_weight
    )
    breakdown = LossBreakdown(**{k: float(v.data) for k, v in parts.items()}, total=float(total.data))
    return total, breakdown


__all__ = [
    "ALPHA",
    "GAMMA",
    "BreastTargets",
    "ImageTargets",
    "LossBreakdown",
    "LossConfig",
    "MatchResult",
    "focal_cost",
    "focal_loss",
    "focal_loss_tensor",
    "hungarian",
    "lesion_loss",
    "match_cost",
    "total_loss",
]
