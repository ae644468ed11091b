"""Synthetic two-view "breasts" with sparse malignant findings.

Each breast has a CC and an MLO image. Findings sit at a shared normalized
radial distance from a simulated nipple point in both views, with angular
jitter between views. Malignant findings carry a lobed (spiculated) texture;
benign ones are smooth. On a configurable fraction of malignant findings one
view is rendered with benign-like texture, so only the pair of views
identifies them reliably.

Generation is deterministic: every breast draws from its own seed substream,
derived from ``(seed, breast index)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import BBox

CATEGORIES = ("malignant", "benign", "negative")
VIEWS = ("cc", "mlo")
FORMAT_TAG = "mnm-synth/1"
SPIKES = 5
BOX_SIGMAS = 2.5


class DatasetError(ValueError):
    """Malformed dataset directory or configuration."""


@dataclass
class DatasetConfig:
    counts: dict = field(default_factory=lambda: {"malignant": 150, "benign": 60, "negative": 790})
    annotated_fraction: dict = field(
        default_factory=lambda: {"malignant": 0.88, "benign": 0.28, "negative": 0.0}
    )
    image_size: tuple = (128, 128)
    lesion_sigma: tuple = (2.5, 4.5)
    contrast: tuple = (0.25, 0.4)
    malignant_texture: tuple = (0.75, 1.0)
    benign_texture: tuple = (0.0, 0.15)
    ambiguity_fraction: float = 0.3
    radial_jitter: float = 0.04
    angular_jitter: float = 0.3
    distractor_probability: float = 0.3
    tissue_amplitude: float = 0.05
    noise_level: float = 0.03
    split_fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def validate(self) -> None:
        if set(self.counts) - set(CATEGORIES):
            raise DatasetError(f"unknown categories {sorted(set(self.counts) - set(CATEGORIES))}")
        if any(int(self.counts.get(c, 0)) < 0 for c in CATEGORIES):
            raise DatasetError("counts must be non-negative")
        if self.total() == 0:
            raise DatasetError("dataset would be empty: all counts are zero")
        for c, f in self.annotated_fraction.items():
            if not 0.0 <= f <= 1.0:
                raise DatasetError(f"annotated fraction for {c} outside [0, 1]: {f}")
        h, w = self.image_size
        if h < 32 or w < 32:
            raise DatasetError(f"image size {self.image_size} too small")
        if not 0.0 <= self.ambiguity_fraction <= 1.0:
            raise DatasetError("ambiguity_fraction outside [0, 1]")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise DatasetError("split fractions must sum to 1")

    def total(self) -> int:
        return sum(int(self.counts.get(c, 0)) for c in CATEGORIES)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("image_size", "lesion_sigma", "contrast", "malignant_texture",
                    "benign_texture", "split_fractions"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"unknown config keys {sorted(unknown)}")
        kw = dict(d)
        for key in ("image_size", "lesion_sigma", "contrast", "malignant_texture",
                    "benign_texture", "split_fractions"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass
class Finding:
    box_cc: BBox
    box_mlo: BBox
    label: str
    contrast: float
    texture_cc: float
    texture_mlo: float
    # view rendered with benign-like texture, or None
    masked_view: str | None = None
    radial_cc: float = 0.0
    radial_mlo: float = 0.0

    def box(self, view: str) -> BBox:
        return self.box_cc if view == "cc" else self.box_mlo

    def texture(self, view: str) -> float:
        return self.texture_cc if view == "cc" else self.texture_mlo

    def to_dict(self) -> dict:
        d = asdict(self)
        d["box_cc"] = list(self.box_cc.to_array())
        d["box_mlo"] = list(self.box_mlo.to_array())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Finding":
        d = dict(d)
        d["box_cc"] = BBox.from_array(d["box_cc"])
        d["box_mlo"] = BBox.from_array(d["box_mlo"])
        return cls(**d)


@dataclass(eq=False)
class BreastSample:
    breast_id: str
    exam_id: str
    side: str
    category: str
    annotated: bool
    findings: list
    image_cc: np.ndarray
    image_mlo: np.ndarray
    split: str = "train"

    def image(self, view: str) -> np.ndarray:
        return self.image_cc if view == "cc" else self.image_mlo

    def boxes(self, view: str, label: str | None = None) -> np.ndarray:
        rows = [f.box(view).to_array() for f in self.findings if label is None or f.label == label]
        return np.array(rows, dtype=float).reshape(-1, 4)

    def labels(self) -> list[str]:
        return [f.label for f in self.findings]

    @property
    def is_malignant(self) -> bool:
        return self.category == "malignant"

    def __eq__(self, other) -> bool:
        if not isinstance(other, BreastSample):
            return NotImplemented
        return (
            (self.breast_id, self.exam_id, self.side, self.category, self.annotated, self.split)
            == (other.breast_id, other.exam_id, other.side, other.category, other.annotated, other.split)
            and self.findings == other.findings
            and self.image_cc.dtype == other.image_cc.dtype
            and np.array_equal(self.image_cc, other.image_cc)
            and np.array_equal(self.image_mlo, other.image_mlo)
        )


@dataclass(eq=False)
class Dataset:
    config: DatasetConfig
    breasts: list

    def __len__(self) -> int:
        return len(self.breasts)

    def __iter__(self) -> Iterator[BreastSample]:
        return iter(self.breasts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.config == other.config and self.breasts == other.breasts

    def split(self, name: str) -> "Dataset":
        return Dataset(self.config, [b for b in self.breasts if b.split == name])

    def subset(self, breasts: Iterable[BreastSample]) -> "Dataset":
        return Dataset(self.config, list(breasts))

    def category_counts(self) -> dict:
        out = {c: 0 for c in CATEGORIES}
        for b in self.breasts:
            out[b.category] += 1
        return out


# -- geometry of the simulated breast ----------------------------------------


def _nipple(width: int, height: int) -> tuple[float, float]:
    return width - 6.0, height / 2.0


def _breast_mask(width: int, height: int) -> np.ndarray:
    nx, ny = _nipple(width, height)
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    return (xx / nx) ** 2 + ((yy - ny) / (height / 2.0 - 1.0)) ** 2 <= 1.0


def _inside_breast(x: float, y: float, width: int, height: int, margin: float) -> bool:
    nx, ny = _nipple(width, height)
    a = nx - margin
    b = height / 2.0 - 1.0 - margin
    return x > margin and (x / a) ** 2 + ((y - ny) / b) ** 2 <= 1.0


def _position(rho: float, theta: float, width: int, height: int) -> tuple[float, float]:
    nx, ny = _nipple(width, height)
    reach = nx - 4.0
    return nx - rho * reach * math.cos(theta), ny + rho * reach * math.sin(theta)


def _lesion_box(cx: float, cy: float, sx: float, sy: float, angle: float) -> BBox:
    ex = BOX_SIGMAS * math.sqrt((sx * math.cos(angle)) ** 2 + (sy * math.sin(angle)) ** 2)
    ey = BOX_SIGMAS * math.sqrt((sx * math.sin(angle)) ** 2 + (sy * math.cos(angle)) ** 2)
    return BBox(cx - ex, cy - ey, cx + ex, cy + ey)


@dataclass
class _Shape:
    cx: float
    cy: float
    sx: float
    sy: float
    angle: float
    phase: float


def _sample_shape(rng, cfg: DatasetConfig, rho: float, theta: float) -> _Shape:
    h, w = cfg.image_size
    cx, cy = _position(rho, theta, w, h)
    lo, hi = cfg.lesion_sigma
    return _Shape(cx, cy, rng.uniform(lo, hi), rng.uniform(lo, hi),
                  rng.uniform(0, math.pi), rng.uniform(0, 2 * math.pi))


def _shape_ok(s: _Shape, cfg: DatasetConfig, others: list[_Shape]) -> bool:
    h, w = cfg.image_size
    box = _lesion_box(s.cx, s.cy, s.sx, s.sy, s.angle)
    if not (box.x1 >= 1 and box.y1 >= 1 and box.x2 <= w - 1 and box.y2 <= h - 1):
        return False
    if not _inside_breast(s.cx, s.cy, w, h, margin=4.0):
        return False
    for o in others:
        if math.hypot(s.cx - o.cx, s.cy - o.cy) < BOX_SIGMAS * (max(s.sx, s.sy) + max(o.sx, o.sy)):
            return False
    return True


def _place_finding(rng, cfg: DatasetConfig, taken_cc: list, taken_mlo: list):
    for _ in range(500):
        rho = rng.uniform(0.2, 0.85)
        theta = rng.uniform(-0.75, 0.75)
        s_cc = _sample_shape(rng, cfg, rho, theta)
        if not _shape_ok(s_cc, cfg, taken_cc):
            continue
        for _ in range(50):
            rho_m = float(np.clip(rho + rng.uniform(-cfg.radial_jitter, cfg.radial_jitter), 0.1, 0.95))
            theta_m = theta + rng.uniform(-cfg.angular_jitter, cfg.angular_jitter)
            s_mlo = _sample_shape(rng, cfg, rho_m, theta_m)
            if _shape_ok(s_mlo, cfg, taken_mlo):
                return s_cc, s_mlo, rho, rho_m
    raise DatasetError("could not place a finding; image size too small for lesion sizes")


# -- rendering -------------------------------------------------------------


def _lesion_layer(s: _Shape, contrast: float, texture: float, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    dx = xx - s.cx
    dy = yy - s.cy
    c, sn = math.cos(s.angle), math.sin(s.angle)
    u = c * dx + sn * dy
    v = -sn * dx + c * dy
    envelope = np.exp(-0.5 * ((u / s.sx) ** 2 + (v / s.sy) ** 2))
    lobes = 1.0 + texture * np.cos(SPIKES * np.arctan2(v, u) + s.phase)
    return contrast * envelope * lobes


def render_background(cfg: DatasetConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Breast outline, density gradient, smooth tissue texture and pixel noise for both views."""
    h, w = cfg.image_size
    mask = _breast_mask(w, h).astype(float)
    nx, ny = _nipple(w, h)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    density = 0.3 + 0.15 * np.clip(1.0 - xx / nx, 0.0, 1.0)
    views = []
    for view in VIEWS:
        tissue = gaussian_filter(rng.standard_normal((h, w)), sigma=3.0)
        tissue *= cfg.tissue_amplitude / max(tissue.std(), 1e-12)
        img = mask * (density + tissue)
        if view == "mlo":
            # pectoral muscle wedge in the upper chest-wall corner
            pect = (xx / (0.35 * w) + yy / (0.45 * h)) <= 1.0
            img = img + 0.2 * (pect & (mask > 0))
        views.append(img)
    out = []
    for img in views:
        out.append(img + cfg.noise_level * rng.standard_normal((h, w)))
    return out[0], out[1]


def render_views(findings_with_shapes, cfg: DatasetConfig, rng: np.random.Generator):
    """Background and noise from ``rng`` plus one additive layer per finding.

    ``findings_with_shapes`` is a list of ``(Finding, shape_cc, shape_mlo)``.
    Returns float32 images ``(cc, mlo)``.
    """
    h, w = cfg.image_size
    cc, mlo = render_background(cfg, rng)
    for f, s_cc, s_mlo in findings_with_shapes:
        cc = cc + _lesion_layer(s_cc, f.contrast, f.texture_cc, h, w)
        mlo = mlo + _lesion_layer(s_mlo, f.contrast, f.texture_mlo, h, w)
    return cc.astype(np.float32), mlo.astype(np.float32)


# -- generation --------------------------------------------------------------


def breast_streams(seed: int, index: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (layout, pixels) generators for one breast."""
    layout, pixels = np.random.SeedSequence([int(seed), int(index)]).spawn(2)
    return np.random.default_rng(layout), np.random.default_rng(pixels)


def _make_findings(rng, cfg: DatasetConfig, category: str):
    labels: list[str] = []
    if category == "malignant":
        labels.append("malignant")
        if rng.random() < cfg.distractor_probability:
            labels.append("benign")
    elif category == "benign":
        labels.extend(["benign"] * int(rng.integers(1, 3)))
    out = []
    taken_cc: list[_Shape] = []
    taken_mlo: list[_Shape] = []
    for label in labels:
        s_cc, s_mlo, rho, rho_m = _place_finding(rng, cfg, taken_cc, taken_mlo)
        taken_cc.append(s_cc)
        taken_mlo.append(s_mlo)
        contrast = rng.uniform(*cfg.contrast)
        masked = None
        if label == "malignant":
            tex = rng.uniform(*cfg.malignant_texture)
            tex_cc = tex_mlo = tex
            if rng.random() < cfg.ambiguity_fraction:
                masked = VIEWS[int(rng.integers(0, 2))]
                benign_like = rng.uniform(*cfg.benign_texture)
                if masked == "cc":
                    tex_cc = benign_like
                else:
                    tex_mlo = benign_like
        else:
            tex_cc = rng.uniform(*cfg.benign_texture)
            tex_mlo = rng.uniform(*cfg.benign_texture)
        finding = Finding(
            box_cc=_lesion_box(s_cc.cx, s_cc.cy, s_cc.sx, s_cc.sy, s_cc.angle),
            box_mlo=_lesion_box(s_mlo.cx, s_mlo.cy, s_mlo.sx, s_mlo.sy, s_mlo.angle),
            label=label,
            contrast=float(contrast),
            texture_cc=float(tex_cc),
            texture_mlo=float(tex_mlo),
            masked_view=masked,
            radial_cc=float(rho),
            radial_mlo=float(rho_m),
        )
        out.append((finding, s_cc, s_mlo))
    return out


def _assignments(cfg: DatasetConfig):
    """Exact category list, annotation flags and splits from the master seed."""
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x5EED]))
    cats = [c for c in CATEGORIES for _ in range(int(cfg.counts.get(c, 0)))]
    cats = [cats[i] for i in rng.permutation(len(cats))]
    annotated = [False] * len(cats)
    for c in CATEGORIES:
        idx = [i for i, cat in enumerate(cats) if cat == c]
        k = int(round(cfg.annotated_fraction.get(c, 0.0) * len(idx)))
        for i in rng.permutation(len(idx))[:k]:
            annotated[idx[i]] = True
    n_exams = (len(cats) + 1) // 2
    order = rng.permutation(n_exams)
    n_train = int(round(cfg.split_fractions[0] * n_exams))
    n_val = int(round(cfg.split_fractions[1] * n_exams))
    exam_split = {}
    for rank, e in enumerate(order):
        exam_split[int(e)] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return cats, annotated, exam_split


def generate_breast(cfg: DatasetConfig, index: int, category: str, annotated: bool, split: str) -> BreastSample:
    layout_rng, pixel_rng = breast_streams(cfg.seed, index)
    placed = _make_findings(layout_rng, cfg, category)
    cc, mlo = render_views(placed, cfg, pixel_rng)
    return BreastSample(
        breast_id=f"b{index:05d}",
        exam_id=f"e{index // 2:05d}",
        side="L" if index % 2 == 0 else "R",
        category=category,
        annotated=annotated,
        findings=[f for f, _, _ in placed],
        image_cc=cc,
        image_mlo=mlo,
        split=split,
    )


def generate_dataset(cfg: DatasetConfig | None = None) -> Dataset:
    cfg = cfg or DatasetConfig()
    cfg.validate()
    cats, annotated, exam_split = _assignments(cfg)
    breasts = [
        generate_breast(cfg, i, cat, annotated[i], exam_split[i // 2])
        for i, cat in enumerate(cats)
    ]
    return Dataset(cfg, breasts)


# -- latent-attribute oracles ---------------------------------------------------


def _best_threshold_accuracy(values: np.ndarray, labels: np.ndarray) -> float:
    """Best accuracy of any rule ``value > t`` or ``value <= t`` over all thresholds."""
    best = 0.0
    cuts = np.concatenate([[-np.inf], np.unique(values)])
    for t in cuts:
        pred = values > t
        acc = float(np.mean(pred == labels))
        best = max(best, acc, 1.0 - acc)
    return best


def attribute_oracle_accuracy(dataset: Dataset, views: tuple = VIEWS) -> float:
    """Accuracy of the best threshold rule on the max texture over ``views``."""
    findings = [f for b in dataset for f in b.findings]
    if not findings:
        raise DatasetError("no findings to classify")
    labels = np.array([f.label == "malignant" for f in findings])
    values = np.array([max(f.texture(v) for v in views) for f in findings])
    return _best_threshold_accuracy(values, labels)


def single_view_oracle_accuracy(dataset: Dataset, view: str) -> float:
    """Best threshold accuracy over every single-view latent attribute."""
    findings = [f for b in dataset for f in b.findings]
    labels = np.array([f.label == "malignant" for f in findings])
    candidates = [
        np.array([f.texture(view) for f in findings]),
        np.array([f.contrast for f in findings]),
        np.array([f.box(view).area for f in findings]),
    ]
    return max(_best_threshold_accuracy(v, labels) for v in candidates)


# -- persistence -------------------------------------------------------------


def save(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for b in dataset.breasts:
        views = {}
        for view in VIEWS:
            rel = f"images/{b.breast_id}_{view}.f32"
            img = np.ascontiguousarray(b.image(view), dtype="<f4")
            (directory / rel).write_bytes(img.tobytes())
            views[view] = {"path": rel, "shape": list(img.shape)}
        entries.append({
            "breast_id": b.breast_id,
            "exam_id": b.exam_id,
            "side": b.side,
            "split": b.split,
            "category": b.category,
            "annotated": b.annotated,
            "views": views,
            "findings": [f.to_dict() for f in b.findings],
        })
    manifest = {"format": FORMAT_TAG, "config": dataset.config.to_dict(), "breasts": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def _read_image(directory: Path, entry: dict) -> np.ndarray:
    path = directory / entry["path"]
    shape = tuple(int(s) for s in entry["shape"])
    if not path.is_file():
        raise DatasetError(f"missing image file {entry['path']}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise DatasetError(f"image file {entry['path']} has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def load(directory) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"no manifest.json in {directory}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != FORMAT_TAG:
        raise DatasetError(f"unsupported dataset format {manifest.get('format')!r}")
    try:
        cfg = DatasetConfig.from_dict(manifest["config"])
        breasts = []
        for e in manifest["breasts"]:
            if e["category"] not in CATEGORIES:
                raise DatasetError(f"breast {e['breast_id']}: unknown category {e['category']!r}")
            breasts.append(BreastSample(
                breast_id=e["breast_id"],
                exam_id=e["exam_id"],
                side=e["side"],
                category=e["category"],
                annotated=bool(e["annotated"]),
                findings=[Finding.from_dict(f) for f in e["findings"]],
                image_cc=_read_image(directory, e["views"]["cc"]),
                image_mlo=_read_image(directory, e["views"]["mlo"]),
                split=e.get("split", "train"),
            ))
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"malformed manifest {manifest_path}: missing or bad field {exc}") from exc
    return Dataset(cfg, breasts)
