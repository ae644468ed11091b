"""Deterministic training loop with breast-paired batches and exact resume."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .matchloss import BreastTargets, LossBreakdown, LossConfig, total_loss
from .model import MnMDetector, ModelConfig
from .model.checkpoint import MODEL_CONFIG, PARAMS_BLOB, PARAMS_INDEX, CheckpointError
from .numerics.serialize import BlobError, load_arrays, save_arrays
from .geometry import BBox
from .synthdata import BreastSample

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
LOSS_COLUMNS = ("iteration",) + LossBreakdown.FIELDS
MOMENTS_BLOB = "moments.bin"
MOMENTS_INDEX = "moments.json"
STATE_FILE = "state.json"


class TrainError(RuntimeError):
    pass


class NonFiniteError(TrainError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1500
    base_lr: float = 5e-5
    weight_decay: float = 1e-4
    batch_breasts: int = 4
    lr_drop_fractions: tuple = (0.75, 8250 / 9000)
    seed: int = 0
    dual_heads: bool = True
    multi_view: bool = True
    mil: bool = True
    clip_norm: float = 1.0
    flip: bool = False
    max_skips: int = 10
    rematch_per_stage: bool = False
    malignancy_matched_only: bool = False
    mil_deep_supervision: bool = False

    def validate(self) -> "TrainConfig":
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_breasts < 1 or (self.mil and self.batch_breasts % 2):
            raise ValueError("batch_breasts must be positive, and even when MIL pairs the pools")
        f = tuple(self.lr_drop_fractions)
        if not all(0.0 < x < 1.0 for x in f) or list(f) != sorted(set(f)):
            raise ValueError(f"lr_drop_fractions must be increasing in (0, 1), got {f}")
        if self.base_lr <= 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise ValueError("base_lr and clip_norm must be positive, weight_decay non-negative")
        return self

    def loss_config(self) -> LossConfig:
        return LossConfig(
            dual_heads=self.dual_heads,
            mil=self.mil,
            rematch_per_stage=self.rematch_per_stage,
            malignancy_matched_only=self.malignancy_matched_only,
            mil_deep_supervision=self.mil_deep_supervision,
        )

    def model_config(self, base: ModelConfig) -> ModelConfig:
        """The component flags here decide the architecture."""
        return replace(base, dual_heads=self.dual_heads, multi_view=self.multi_view)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drop_fractions"] = list(self.lr_drop_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        kw = dict(d)
        if "lr_drop_fractions" in kw:
            kw["lr_drop_fractions"] = tuple(kw["lr_drop_fractions"])
        return cls(**kw)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Step schedule: x0.1 at each drop fraction of the run."""
    lr = cfg.base_lr
    for f in cfg.lr_drop_fractions:
        if iteration >= f * cfg.iterations:
            lr *= 0.1
    return lr


# -- sampling -----------------------------------------------------------------


def _draw(pool: list, k: int, rng: np.random.Generator) -> list:
    idx = rng.choice(len(pool), size=k, replace=k > len(pool))
    return [pool[i] for i in idx]


def sample_batch(dataset, rng: np.random.Generator, batch_breasts: int = 4, mil: bool = True) -> list:
    """Half annotated, half unannotated breasts; annotated only without MIL."""
    breasts = list(dataset)
    annotated = [b for b in breasts if b.annotated]
    unannotated = [b for b in breasts if not b.annotated]
    if not mil:
        if not annotated:
            raise TrainError("no annotated breasts to train on with MIL disabled")
        return _draw(annotated, batch_breasts, rng)
    if not annotated or not unannotated:
        pool = annotated or unannotated
        if not pool:
            raise TrainError("empty dataset")
        return _draw(pool, batch_breasts, rng)
    half = batch_breasts // 2
    return _draw(annotated, batch_breasts - half, rng) + _draw(unannotated, half, rng)


# -- optimizer ----------------------------------------------------------------


@dataclass
class Moments:
    first: dict
    second: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, named: dict) -> "Moments":
        return cls({k: np.zeros_like(v) for k, v in named.items()},
                   {k: np.zeros_like(v) for k, v in named.items()}, 0)


def optimizer_step(params: dict, grads: dict, moments: Moments, lr: float, weight_decay: float) -> bool:
    """One decoupled-weight-decay Adam update, in place.

    Returns False, leaving everything untouched, when a gradient is not finite.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient for %s; step skipped", name)
            return False
    moments.step += 1
    t = moments.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in params.items():
        g = grads[name]
        m = moments.first[name]
        v = moments.second[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + EPS)
    return True


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if np.isfinite(norm) and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# -- batches ------------------------------------------------------------------


def flip_breast(breast, width: int):
    """Horizontal flip of both views together with their boxes."""
    def flip_box(b):
        return BBox(width - b.x2, b.y1, width - b.x1, b.y2)

    findings = [replace(f, box_cc=flip_box(f.box_cc), box_mlo=flip_box(f.box_mlo)) for f in breast.findings]
    return BreastSample(breast.breast_id, breast.exam_id, breast.side, breast.category, breast.annotated,
                        findings, breast.image_cc[:, ::-1].copy(), breast.image_mlo[:, ::-1].copy(), breast.split)


def batch_arrays(breasts: list) -> tuple[np.ndarray, np.ndarray, list]:
    cc = np.stack([b.image_cc for b in breasts]).astype(np.float64)
    mlo = np.stack([b.image_mlo for b in breasts]).astype(np.float64)
    return cc, mlo, [BreastTargets.from_sample(b) for b in breasts]


def loss_and_gradients(model: MnMDetector, breasts: list, loss_cfg: LossConfig,
                       rng: np.random.Generator | None = None):
    """Forward, loss and backward on one batch; returns (breakdown, grads by name)."""
    cc, mlo, targets = batch_arrays(breasts)
    out = model(cc, mlo, rng)
    lqs = model.stage_log_complements(out) if loss_cfg.mil_deep_supervision else None
    loss, breakdown = total_loss(out, targets, loss_cfg, lqs)
    model.zero_grad()
    loss.backward()
    return breakdown, {name: p.grad for name, p in model.named_parameters()}


# -- checkpoints --------------------------------------------------------------


@dataclass
class TrainState:
    model: MnMDetector
    moments: Moments
    iteration: int
    sampler: np.random.Generator
    noise: np.random.Generator
    skips: int = 0


def _streams(seed: int):
    init, sampler, noise = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(sampler), np.random.default_rng(noise)


def init_state(model_cfg: ModelConfig, cfg: TrainConfig, strict: bool = True) -> TrainState:
    init, sampler, noise = _streams(cfg.seed)
    model = MnMDetector(cfg.model_config(model_cfg), init, strict=strict)
    named = dict(model.state_dict())
    return TrainState(model, Moments.zeros_like(named), 0, sampler, noise)


def save_checkpoint(state: TrainState, cfg: TrainConfig, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_arrays(state.model.state_dict(), directory / PARAMS_BLOB, directory / PARAMS_INDEX)
    (directory / MODEL_CONFIG).write_text(json.dumps(state.model.cfg.to_dict(), indent=1))
    moments = {f"first/{k}": v for k, v in state.moments.first.items()}
    moments.update({f"second/{k}": v for k, v in state.moments.second.items()})
    save_arrays(moments, directory / MOMENTS_BLOB, directory / MOMENTS_INDEX)
    meta = {
        "iteration": state.iteration,
        "adam_step": state.moments.step,
        "skips": state.skips,
        "sampler_rng": state.sampler.bit_generator.state,
        "noise_rng": state.noise.bit_generator.state,
        "train_config": cfg.to_dict(),
    }
    (directory / STATE_FILE).write_text(json.dumps(meta, indent=1, sort_keys=True))
    return directory


def _generator(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def load_checkpoint(directory, model_cfg: ModelConfig | None = None, strict: bool = True) -> tuple[TrainState, TrainConfig]:
    """Restore model, moments, RNG streams and the train config of a checkpoint."""
    directory = Path(directory)
    try:
        meta = json.loads((directory / STATE_FILE).read_text())
        saved_model_cfg = ModelConfig.from_dict(json.loads((directory / MODEL_CONFIG).read_text()))
        cfg = TrainConfig.from_dict(meta["train_config"])
    except (OSError, json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {directory}: {exc}") from exc
    if model_cfg is not None and cfg.model_config(model_cfg) != saved_model_cfg:
        raise CheckpointError(f"checkpoint model config {saved_model_cfg} does not match {model_cfg}")
    model = MnMDetector(saved_model_cfg, 0, strict=strict)
    try:
        model.load_state_dict(load_arrays(directory / PARAMS_BLOB, directory / PARAMS_INDEX))
        raw = load_arrays(directory / MOMENTS_BLOB, directory / MOMENTS_INDEX)
    except (BlobError, KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"checkpoint {directory} does not fit the model: {exc}") from exc
    names = [k for k, _ in model.named_parameters()]
    try:
        moments = Moments({k: raw[f"first/{k}"] for k in names}, {k: raw[f"second/{k}"] for k in names},
                          int(meta["adam_step"]))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint {directory} lacks optimizer moments for {exc}") from exc
    state = TrainState(model, moments, int(meta["iteration"]), _generator(meta["sampler_rng"]),
                       _generator(meta["noise_rng"]), int(meta.get("skips", 0)))
    return state, cfg


# -- loop ---------------------------------------------------------------------


@dataclass
class TrainResult:
    state: TrainState
    history: list  # (iteration, LossBreakdown) per iteration run
    checkpoint: Path | None = None


def check_compatible(model_cfg: ModelConfig, cfg: TrainConfig, dataset) -> None:
    """Surface dataset/config mismatches before any iteration runs."""
    cfg.validate()
    model_cfg.validate(strict=False)
    breasts = list(dataset)
    if not breasts:
        raise TrainError("training set is empty")
    shape = breasts[0].image_cc.shape
    if tuple(shape) != tuple(model_cfg.image_size):
        raise TrainError(f"images are {shape} but the model expects {tuple(model_cfg.image_size)}")
    n_annotated = sum(b.annotated for b in breasts)
    if not cfg.mil and not n_annotated:
        raise TrainError("MIL disabled but no annotated breasts to train on")
    if cfg.mil and n_annotated in (0, len(breasts)):
        log.warning("only %s breasts available; batches are drawn from them alone",
                    "annotated" if n_annotated else "unannotated")


def write_loss_log(history: list, path, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOSS_COLUMNS)
        for it, b in history:
            w.writerow([it] + [repr(v) for v in b.as_row()])


def train(model_cfg: ModelConfig, cfg: TrainConfig, dataset, out_dir=None, resume=None,
          stop_after: int | None = None, strict: bool = True, callback=None) -> TrainResult:
    """Train on ``dataset`` (its breasts are used as given).

    ``resume`` is a checkpoint directory or a :class:`TrainState`. The LR
    schedule always refers to ``cfg.iterations``; ``stop_after`` halts early
    so that a later resume continues the same trajectory.
    """
    cfg.validate()
    if isinstance(resume, TrainState):
        state = resume
    elif resume is not None:
        state, saved = load_checkpoint(resume, model_cfg, strict=strict)
        if saved.to_dict() != cfg.to_dict():
            raise CheckpointError("train config differs from the checkpoint's")
    else:
        state = init_state(model_cfg, cfg, strict=strict)
    check_compatible(state.model.cfg, cfg, dataset)
    loss_cfg = cfg.loss_config()
    width = state.model.cfg.image_size[1]
    model = state.model
    model.train()
    params = {k: p.data for k, p in model.named_parameters()}
    end = cfg.iterations if stop_after is None else min(cfg.iterations, stop_after)
    history = []
    while state.iteration < end:
        it = state.iteration
        batch = sample_batch(dataset, state.sampler, cfg.batch_breasts, cfg.mil)
        if cfg.flip:
            flips = state.sampler.random(len(batch)) < 0.5
            batch = [flip_breast(b, width) if f else b for b, f in zip(batch, flips)]
        breakdown, grads = loss_and_gradients(model, batch, loss_cfg, state.noise)
        finite = breakdown.is_finite()
        if finite:
            clip_gradients(grads, cfg.clip_norm)
            finite = optimizer_step(params, grads, state.moments, lr_at(it, cfg), cfg.weight_decay)
        if finite:
            state.skips = 0
        else:
            state.skips += 1
            log.warning("iteration %d: non-finite loss or gradient, step skipped", it)
            if state.skips >= cfg.max_skips:
                raise NonFiniteError(f"{state.skips} consecutive non-finite iterations at {it}")
        history.append((it, breakdown))
        state.iteration += 1
        if callback is not None:
            callback(it, breakdown)
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(state, cfg, Path(out_dir) / "checkpoint")
        write_loss_log(history, Path(out_dir) / "loss.csv", append=resume is not None)
    model.eval()
    return TrainResult(state, history, ckpt)


__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainState",
    "Moments",
    "NonFiniteError",
    "TrainError",
    "lr_at",
    "sample_batch",
    "optimizer_step",
    "clip_gradients",
    "init_state",
    "save_checkpoint",
    "load_checkpoint",
    "loss_and_gradients",
    "train",
    "write_loss_log",
]
