import csv
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from conftest import MICRO

from mnm import trainer
from mnm.matchloss import LossBreakdown
from mnm.synthdata import BreastSample
from mnm.trainer import (
    Moments, NonFiniteError, TrainConfig, TrainError, clip_gradients, flip_breast, load_checkpoint, lr_at,
    optimizer_step, sample_batch, train,
)

MODEL = replace(MICRO, image_size=(128, 128))


def quick(**kw):
    base = dict(iterations=6, base_lr=1e-3, batch_breasts=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# -- config and schedule ------------------------------------------------------


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 5e-5
    assert lr_at(int(0.8 * cfg.iterations), cfg) == pytest.approx(5e-6, rel=1e-12)
    assert lr_at(int(0.95 * cfg.iterations), cfg) == pytest.approx(5e-7, rel=1e-12)
    assert lr_at(1124, cfg) == 5e-5 and lr_at(1125, cfg) == pytest.approx(5e-6)


def test_config_validation_and_round_trip():
    cfg = TrainConfig(seed=3, flip=True)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    for bad in (dict(lr_drop_fractions=(0.9, 0.5)), dict(lr_drop_fractions=(0.0, 0.5)), dict(iterations=0),
                dict(batch_breasts=3), dict(base_lr=0.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"iterations": 3, "epochs": 2})


# -- sampling -----------------------------------------------------------------


def test_sample_batch_ratio_is_exact(tiny_dataset):
    rng = np.random.default_rng(0)
    drawn = [b for _ in range(2500) for b in sample_batch(tiny_dataset, rng, 4)]
    assert len(drawn) == 10000
    assert sum(b.annotated for b in drawn) == 5000
    batch = sample_batch(tiny_dataset, np.random.default_rng(1), 4)
    assert [b.annotated for b in batch] == [True, True, False, False]


def test_sample_batch_is_seeded(tiny_dataset):
    a = [b.breast_id for b in sample_batch(tiny_dataset, np.random.default_rng(5), 4)]
    b = [b.breast_id for b in sample_batch(tiny_dataset, np.random.default_rng(5), 4)]
    assert a == b


def test_sample_batch_fallbacks(tiny_dataset):
    rng = np.random.default_rng(0)
    annotated = [b for b in tiny_dataset if b.annotated]
    assert all(b.annotated for b in sample_batch(annotated, rng, 4))
    assert all(b.annotated for b in sample_batch(tiny_dataset, rng, 4, mil=False))
    with pytest.raises(TrainError):
        sample_batch([], rng, 4)
    with pytest.raises(TrainError):
        sample_batch([b for b in tiny_dataset if not b.annotated], rng, 4, mil=False)


# -- optimizer ----------------------------------------------------------------


def test_adamw_hand_step():
    p = {"w": np.array([1.0])}
    mom = Moments.zeros_like(p)
    assert optimizer_step(p, {"w": np.array([0.5])}, mom, lr=0.1, weight_decay=0.0)
    m_hat = 0.1 * 0.5 / (1 - 0.9)
    v_hat = 0.001 * 0.25 / (1 - 0.999)
    assert p["w"][0] == pytest.approx(1.0 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8), abs=1e-14)
    assert p["w"][0] == pytest.approx(0.9, abs=1e-8)


def test_adamw_zero_gradient_and_decay():
    p = {"w": np.array([2.0, -3.0])}
    optimizer_step(p, {"w": np.zeros(2)}, Moments.zeros_like(p), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p["w"], [2.0, -3.0])
    optimizer_step(p, {"w": np.zeros(2)}, Moments.zeros_like(p), lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(p["w"], np.array([2.0, -3.0]) * (1 - 0.05), rtol=1e-15)


def test_adamw_skips_non_finite():
    p = {"w": np.array([1.0]), "v": np.array([2.0])}
    mom = Moments.zeros_like(p)
    assert not optimizer_step(p, {"w": np.array([1.0]), "v": np.array([np.nan])}, mom, 0.1, 0.0)
    assert p["w"][0] == 1.0 and mom.step == 0 and mom.first["w"][0] == 0.0


def test_clip_gradients():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_gradients(g, 1.0) == 5.0
    assert math.sqrt(g["a"][0] ** 2 + g["b"][0] ** 2) == pytest.approx(1.0)
    small = {"a": np.array([0.3])}
    clip_gradients(small, 1.0)
    assert small["a"][0] == 0.3


def test_flip_breast(tiny_dataset):
    b = next(x for x in tiny_dataset if x.findings)
    f = flip_breast(b, 128)
    np.testing.assert_array_equal(f.image_cc, b.image_cc[:, ::-1])
    box, fbox = b.findings[0].box("mlo"), f.findings[0].box("mlo")
    assert (fbox.x1, fbox.x2, fbox.y1) == (128 - box.x2, 128 - box.x1, box.y1)
    assert flip_breast(f, 128) == b


# -- training loop ------------------------------------------------------------


def test_same_seed_gives_bitwise_identical_checkpoints(tmp_path, tiny_dataset):
    for name in ("a", "b"):
        train(MODEL, quick(), tiny_dataset, out_dir=tmp_path / name, strict=False)
    for f in ("params.bin", "params.json", "moments.bin", "state.json", "model_config.json"):
        assert (tmp_path / "a/checkpoint" / f).read_bytes() == (tmp_path / "b/checkpoint" / f).read_bytes()
    assert (tmp_path / "a/loss.csv").read_bytes() == (tmp_path / "b/loss.csv").read_bytes()
    other = train(MODEL, quick(seed=1), tiny_dataset, strict=False)
    same = train(MODEL, quick(), tiny_dataset, strict=False)
    assert not np.array_equal(other.state.model.state_dict()["init_features"],
                              same.state.model.state_dict()["init_features"])


def test_resume_equivalence(tmp_path, tiny_dataset):
    cfg = quick(iterations=8, lr_drop_fractions=(0.5, 0.75), flip=True)
    full = train(MODEL, cfg, tiny_dataset, out_dir=tmp_path / "full", strict=False)
    train(MODEL, cfg, tiny_dataset, out_dir=tmp_path / "part", stop_after=3, strict=False)
    resumed = train(MODEL, cfg, tiny_dataset, out_dir=tmp_path / "part", resume=tmp_path / "part/checkpoint",
                    strict=False)
    for (name, a), (_, b) in zip(full.state.model.named_parameters(), resumed.state.model.named_parameters()):
        assert np.array_equal(a.data, b.data), name
    assert (tmp_path / "full/checkpoint/params.bin").read_bytes() == (tmp_path / "part/checkpoint/params.bin").read_bytes()
    with open(tmp_path / "part/loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(trainer.LOSS_COLUMNS)
    assert [int(r[0]) for r in rows[1:]] == list(range(8))
    assert (tmp_path / "full/loss.csv").read_text() == (tmp_path / "part/loss.csv").read_text()


def test_resume_rejects_changed_config(tmp_path, tiny_dataset):
    train(MODEL, quick(), tiny_dataset, out_dir=tmp_path, stop_after=2, strict=False)
    with pytest.raises(Exception):
        train(MODEL, quick(base_lr=5e-4), tiny_dataset, resume=tmp_path / "checkpoint", strict=False)
    state, cfg = load_checkpoint(tmp_path / "checkpoint", MODEL, strict=False)
    assert state.iteration == 2 and cfg == quick()


class _Locked(BreastSample):
    """An unannotated breast whose pixels must never be read."""

    def __getattribute__(self, name):
        if name in ("image_cc", "image_mlo"):
            raise AssertionError("unannotated breast was read")
        return super().__getattribute__(name)


def test_flags_off_never_read_unannotated(tiny_dataset):
    breasts = sorted(tiny_dataset, key=lambda b: not b.annotated)
    guarded = [b if b.annotated else _Locked(**{k: getattr(b, k) for k in b.__dataclass_fields__}) for b in breasts]
    seen = []
    cfg = quick(dual_heads=False, multi_view=False, mil=False)
    res = train(MODEL, cfg, guarded, strict=False, callback=lambda i, br: seen.append(br))
    assert all(br.malignant == 0.0 and br.image == 0.0 and br.breast == 0.0 for br in seen)
    assert res.state.model.stages[0].cross_attn is None


def test_unannotated_only_batches_carry_only_mil_terms(tiny_dataset):
    unannotated = [b for b in tiny_dataset if not b.annotated]
    seen = []
    train(MODEL, quick(iterations=3), unannotated, strict=False, callback=lambda i, br: seen.append(br))
    for br in seen:
        assert br.malignant == br.objectness == br.giou == br.l1 == 0.0
        assert br.image > 0 and br.breast > 0


def test_incompatible_dataset_is_rejected_before_training(tiny_dataset):
    with pytest.raises(TrainError):
        train(replace(MODEL, image_size=(64, 64)), quick(), tiny_dataset, strict=False)
    with pytest.raises(TrainError):
        train(MODEL, quick(mil=False), [b for b in tiny_dataset if not b.annotated], strict=False)
    with pytest.raises(TrainError):
        train(MODEL, quick(), [], strict=False)


def test_non_finite_losses_are_skipped_then_abort(monkeypatch, tiny_dataset):
    nan = LossBreakdown(total=float("nan"))
    calls = []

    def broken(model, breasts, loss_cfg, rng=None):
        calls.append(1)
        return nan, {k: np.zeros_like(p.data) for k, p in model.named_parameters()}

    monkeypatch.setattr(trainer, "loss_and_gradients", broken)
    with pytest.raises(NonFiniteError):
        train(MODEL, quick(iterations=50, max_skips=4), tiny_dataset, strict=False)
    assert len(calls) == 4


def test_losses_are_finite_and_logged(tmp_path, tiny_dataset):
    res = train(MODEL, quick(), tiny_dataset, out_dir=tmp_path, strict=False)
    assert len(res.history) == 6 and all(b.is_finite() for _, b in res.history)
    with open(tmp_path / "loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "malignant", "objectness", "giou", "l1", "image", "breast", "total"]
    assert float(rows[1][-1]) == res.history[0][1].total
