import dataclasses
import json

import numpy as np
import pytest

from dial.autodiff import Tape, Tensor
from dial.checkpoint import save_checkpoint
from dial.data import ShiftSpec, gen_blobs, normalize_dataset
from dial.errors import CompatibilityError, ConfigError, TrainingAborted
from dial.losses import CenterTable, LossWeights, center_loss_source, total_objective
from dial.models import ModelSpec, init_params
from dial.trainer import (
    DIGITS_SCHEDULE,
    OFFICE_SCHEDULE,
    Stage,
    TrainConfig,
    Variant,
    resume,
    stage_index,
    train,
    train_stage_weights,
)


@pytest.fixture(scope="module")
def tiny():
    return normalize_dataset(gen_blobs(3, 20, 4, ShiftSpec(rotation=0.6, translation=(1.5, 0)), seed=0))


def tiny_config(**kw):
    base = dict(max_epochs=3, batch_size=16, feature_dim=4, encoder_hidden=(8,), disc_hidden=(8,), seed=1)
    base.update(kw)
    return TrainConfig(**base)


# -- schedule -------------------------------------------------------------------------

@pytest.mark.parametrize("epoch, expected", [(0, (10, 0.001, 0)), (29, (10, 0.001, 0)), (30, (10, 0.002, 0.002)),
                                             (60, (10, 0.02, 0.02)), (500, (10, 0.02, 0.02))])
def test_digits_schedule(epoch, expected):
    w = train_stage_weights(TrainConfig(), epoch)
    assert (w.alpha, w.beta1, w.beta2) == expected
    assert w.threshold == 0.99


def test_office_schedule_boundaries():
    cfg = TrainConfig(schedule=OFFICE_SCHEDULE)
    assert stage_index(cfg, 49) == 0 and stage_index(cfg, 50) == 1 and stage_index(cfg, 100) == 2
    assert train_stage_weights(cfg, 100).beta2 == 0.01


@pytest.mark.parametrize("variant, beta1, beta2", [
    (Variant.SOURCE_ONLY, 0, 0), (Variant.SOURCE_CENTER, 0.02, 0), (Variant.GAN_ONLY, 0, 0),
    (Variant.GAN_CENTER, 0.02, 0), (Variant.FULL, 0.02, 0.02)])
def test_variant_masks(variant, beta1, beta2):
    w = train_stage_weights(TrainConfig(variant=variant), 70)
    assert (w.beta1, w.beta2) == (beta1, beta2)
    assert w.alpha == 10


def test_variant_labels():
    assert Variant.SOURCE_ONLY.label == "M_{L_s}"
    assert Variant.GAN_ONLY.label == "M_{L_s+L_GAN}"
    assert Variant.FULL.label == "M_{L_s+L_GAN+L_cs+L_ct}"
    assert not Variant.SOURCE_CENTER.adversarial and Variant.SOURCE_CENTER.center


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(schedule=(Stage(5, 10, 0, 0),))
    with pytest.raises(ConfigError):
        TrainConfig(schedule=((0, 10, 0, 0), (0, 10, 1, 1)))
    with pytest.raises(ConfigError):
        TrainConfig(schedule=((0, 10, -1, 0),))
    with pytest.raises(ConfigError):
        TrainConfig(threshold=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="adam")
    with pytest.raises(ConfigError):
        TrainConfig(adv_form="other")
    with pytest.raises(ConfigError):
        train_stage_weights(TrainConfig(), -1)


def test_config_accepts_plain_values():
    cfg = TrainConfig(schedule=[[0, 10, 0, 0]], variant="GanOnly", disc_hidden=[4])
    assert cfg.schedule == (Stage(0, 10, 0, 0),)
    assert cfg.variant is Variant.GAN_ONLY and cfg.disc_hidden == (4,)
    d = cfg.to_dict()
    assert json.loads(json.dumps(d))["variant"] == "GanOnly"
    assert d["schedule"] == [[0, 10, 0, 0]]


def test_zero_center_weight_gives_zero_center_gradient():
    f = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
    centers = CenterTable(np.ones((2, 3)), 0.5, True)
    y = [0, 1, 1, 0]
    with Tape() as tape:
        total, _ = total_objective(Tensor(0.0), Tensor(0.0), center_loss_source(f, y, centers), Tensor(0.0), None,
                                   LossWeights(10, 0, 0))
    tape.backward(total)
    assert f.grad is not None and not f.grad.any()


def test_lr_decays_every_60_epochs():
    opt = TrainConfig().new_optimizer()
    assert opt.lr_at(59) == 1e-3 and opt.lr_at(60) == 5e-4


# -- training loop --------------------------------------------------------------------------

def test_records_and_fields(tiny):
    sched = ((0, 10, 0.001, 0), (2, 10, 0.02, 0.02))
    _, centers, report = train(tiny, tiny_config(schedule=sched))
    assert [r.epoch for r in report.records] == [0, 1, 2]
    assert [r.stage for r in report.records] == [0, 0, 1]
    first, last = report.records[0], report.records[-1]
    assert first.loss_center_tgt is None and first.phi_kept_fraction is None
    assert last.loss_center_tgt is not None and 0 <= last.phi_kept_fraction <= 1
    assert first.loss_disc is not None and first.center_drift > 0
    assert centers.initialized and centers.centers.shape == (3, 4)
    for r in report.records:
        d = json.loads(r.to_json())
        assert "wall_time" not in d
        assert "wall_time" in json.loads(r.to_json(timing=True))


def test_source_only_has_no_adversary(tiny):
    params, _, report = train(tiny, tiny_config(variant=Variant.SOURCE_ONLY, max_epochs=2))
    assert params.discriminator is None
    assert all(r.loss_disc is None and r.loss_enc_adv is None for r in report.records)


def test_total_loss_is_weighted_sum(tiny):
    sched = ((0, 10, 0.5, 0.25),)
    _, _, report = train(tiny, tiny_config(schedule=sched, threshold=0.34, max_epochs=2))
    for r in report.records:
        expected = r.loss_enc_adv + 10 * r.loss_cls + 0.5 * r.loss_center_src + 0.25 * r.loss_center_tgt
        assert r.loss_total == pytest.approx(expected, rel=1e-9)


def test_training_is_bitwise_deterministic(tiny):
    a = train(tiny, tiny_config())[2].to_jsonl()
    b = train(tiny, tiny_config())[2].to_jsonl()
    c = train(tiny, tiny_config(seed=2))[2].to_jsonl()
    assert a == b
    assert a != c


def test_training_learns_the_source_task(tiny):
    _, _, report = train(tiny, tiny_config(max_epochs=30, variant=Variant.SOURCE_ONLY, batch_size=8))
    assert report.last().source_acc > 0.9


def test_early_stop_only_in_final_stage(tiny):
    sched = ((0, 10, 0, 0), (3, 10, 0, 0))
    _, _, report = train(tiny, tiny_config(schedule=sched, max_epochs=20, patience=1, min_delta=1e9))
    assert report.stopped_early
    assert [r.epoch for r in report.records] == [0, 1, 2, 3, 4]


def test_divergence_aborts(tiny):
    cfg = tiny_config(optimizer="sgd_momentum", lr=1e6, max_epochs=5)
    with pytest.raises(TrainingAborted, match="non-finite"):
        with np.errstate(all="ignore"):
            train(tiny, cfg)


def test_on_epoch_callback(tiny):
    seen = []
    train(tiny, tiny_config(max_epochs=2), on_epoch=seen.append)
    assert [r.epoch for r in seen] == [0, 1]


def test_resume_uses_schedule_at_start_epoch(tiny, tmp_path):
    cfg = tiny_config(max_epochs=62, schedule=DIGITS_SCHEDULE)
    params = init_params(cfg.model_spec(tiny.input_dim, 3), 0)
    save_checkpoint(params, None, tmp_path / "m.ckpt")
    _, _, report = resume(tiny, cfg, tmp_path / "m.ckpt", 60)
    assert [r.epoch for r in report.records] == [60, 61]
    first = report.records[0]
    assert (first.alpha, first.beta1, first.beta2) == (10, 0.02, 0.02)
    assert first.lr == 0.0005


def test_resume_is_deterministic(tiny, tmp_path):
    cfg = tiny_config(max_epochs=4)
    params, centers, _ = train(tiny, dataclasses.replace(cfg, max_epochs=2))
    save_checkpoint(params, centers, tmp_path / "m.ckpt")
    a = resume(tiny, cfg, tmp_path / "m.ckpt", 2)[2].to_jsonl()
    b = resume(tiny, cfg, tmp_path / "m.ckpt", 2)[2].to_jsonl()
    assert a == b


def test_resume_rejects_other_architecture(tiny, tmp_path):
    other = init_params(ModelSpec.build(tiny.input_dim, 3, 5, (8,), (8,)), 0)
    save_checkpoint(other, None, tmp_path / "m.ckpt")
    with pytest.raises(CompatibilityError):
        resume(tiny, tiny_config(), tmp_path / "m.ckpt", 1)


def test_resume_source_only_drops_discriminator(tiny, tmp_path):
    cfg = tiny_config(max_epochs=2)
    params, centers, _ = train(tiny, cfg)
    save_checkpoint(params, centers, tmp_path / "m.ckpt")
    out, _, _ = resume(tiny, dataclasses.replace(cfg, variant=Variant.SOURCE_ONLY), tmp_path / "m.ckpt", 1)
    assert out.discriminator is None


def test_adversarial_run_needs_discriminator(tiny):
    params = init_params(ModelSpec.build(tiny.input_dim, 3, 4, (8,), with_discriminator=False), 0)
    with pytest.raises(CompatibilityError):
        train(tiny, tiny_config(), params=params)
