"""Alternating min-max training with a staged loss-weight schedule."""

from __future__ import annotations

import enum
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .autodiff import OptimizerState, Tape, Tensor, optimizer_step, softmax
from .checkpoint import load_checkpoint
from .data import BatchIterator, DomainDataset
from .errors import CompatibilityError, ConfigError, TrainingAborted
from .losses import (
    ENCODER_FORMS,
    CenterTable,
    LossWeights,
    adversarial_losses,
    center_loss_source,
    conditional_loss_target,
    filter_target,
    init_centers,
    source_classification_loss,
    total_objective,
    update_centers,
)
from .models import ModelParams, ModelSpec, classify, discriminate, encode, init_params, predict

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Stage:
    epoch_start: int
    alpha: float
    beta1: float
    beta2: float


DIGITS_SCHEDULE = (
    Stage(0, 10.0, 0.001, 0.0),
    Stage(30, 10.0, 0.002, 0.002),
    Stage(60, 10.0, 0.02, 0.02),
)

OFFICE_SCHEDULE = (
    Stage(0, 10.0, 0.001, 0.0),
    Stage(50, 10.0, 0.002, 0.002),
    Stage(100, 10.0, 0.01, 0.01),
)


class Variant(enum.Enum):
    """Which loss terms a run uses: (adversarial, source center, target conditional)."""

    SOURCE_ONLY = "SourceOnly"
    SOURCE_CENTER = "SourceCenter"
    GAN_ONLY = "GanOnly"
    GAN_CENTER = "GanCenter"
    FULL = "Full"

    @property
    def adversarial(self) -> bool:
        return self in (Variant.GAN_ONLY, Variant.GAN_CENTER, Variant.FULL)

    @property
    def center(self) -> bool:
        return self in (Variant.SOURCE_CENTER, Variant.GAN_CENTER, Variant.FULL)

    @property
    def conditional(self) -> bool:
        return self is Variant.FULL

    @property
    def label(self) -> str:
        terms = ["L_s"]
        if self.adversarial:
            terms.append("L_GAN")
        if self.center:
            terms.append("L_cs")
        if self.conditional:
            terms.append("L_ct")
        return "M_{" + "+".join(terms) + "}"


@dataclass(frozen=True)
class TrainConfig:
    schedule: tuple[Stage, ...] = DIGITS_SCHEDULE
    threshold: float = 0.99
    gamma: float = 0.5
    optimizer: str = "rmsprop"
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_period: int = 60
    rho: float = 0.9
    eps: float = 1e-8
    momentum: float = 0.9
    batch_size: int = 64
    max_epochs: int = 90
    patience: int = 10
    min_delta: float = 1e-4
    d_steps: int = 1
    adv_form: str = "target_flip"
    feature_dim: int = 16
    encoder_hidden: tuple[int, ...] = (64,)
    disc_hidden: tuple[int, ...] = (64, 64)
    variant: Variant = Variant.FULL
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "schedule", tuple(
            s if isinstance(s, Stage) else Stage(*s) for s in self.schedule))
        object.__setattr__(self, "encoder_hidden", tuple(self.encoder_hidden))
        object.__setattr__(self, "disc_hidden", tuple(self.disc_hidden))
        if isinstance(self.variant, str):
            object.__setattr__(self, "variant", Variant(self.variant))
        starts = [s.epoch_start for s in self.schedule]
        if not starts or starts[0] != 0:
            raise ConfigError("the schedule must start at epoch 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError(f"schedule epochs must be strictly increasing, got {starts}")
        for s in self.schedule:
            LossWeights(s.alpha, s.beta1, s.beta2, self.threshold)
        if not 0 < self.gamma:
            raise ConfigError("gamma must be > 0")
        if self.optimizer not in ("rmsprop", "sgd_momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        for name in ("batch_size", "max_epochs", "patience", "d_steps", "lr_decay_period", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.adv_form not in ENCODER_FORMS:
            raise ConfigError(f"adv_form must be one of {ENCODER_FORMS}, got {self.adv_form!r}")

    def model_spec(self, input_dim: int, n_classes: int) -> ModelSpec:
        return ModelSpec.build(input_dim, n_classes, self.feature_dim, self.encoder_hidden,
                               self.disc_hidden, with_discriminator=self.variant.adversarial)

    def new_optimizer(self) -> OptimizerState:
        return OptimizerState(self.optimizer, self.lr, self.lr_decay, self.lr_decay_period,
                              rho=self.rho, eps=self.eps, momentum=self.momentum)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = [list(asdict(s).values()) for s in self.schedule]
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["disc_hidden"] = list(self.disc_hidden)
        d["variant"] = self.variant.value
        return d


def stage_index(config: TrainConfig, epoch: int) -> int:
    idx = 0
    for i, s in enumerate(config.schedule):
        if epoch >= s.epoch_start:
            idx = i
    return idx


def train_stage_weights(config: TrainConfig, epoch: int) -> LossWeights:
    """Weights of the schedule stage containing ``epoch``, masked by the variant."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    s = config.schedule[stage_index(config, epoch)]
    v = config.variant
    return LossWeights(s.alpha, s.beta1 if v.center else 0.0, s.beta2 if v.conditional else 0.0,
                       config.threshold)


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    alpha: float
    beta1: float
    beta2: float
    lr: float
    loss_disc: Optional[float]
    loss_enc_adv: Optional[float]
    loss_cls: float
    loss_center_src: float
    loss_center_tgt: Optional[float]
    loss_total: float
    phi_kept_fraction: Optional[float]
    source_acc: float
    target_acc: float
    center_drift: float
    wall_time: float = field(default=0.0, compare=False)

    def to_json(self, timing: bool = False) -> str:
        d = asdict(self)
        if not timing:
            d.pop("wall_time")
        return json.dumps(d, sort_keys=False)


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False

    def to_jsonl(self, timing: bool = False) -> str:
        return "".join(r.to_json(timing) + "\n" for r in self.records)

    def last(self) -> EpochRecord:
        return self.records[-1]


def _finite(value: float, term: str, epoch: int) -> float:
    if not math.isfinite(value):
        raise TrainingAborted(f"non-finite {term} ({value}) at epoch {epoch}")
    return value


def _accuracy(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    return float((predict(params, x) == y).mean()) if len(y) else float("nan")


def _zero() -> Tensor:
    return Tensor(0.0)


def train(dataset: DomainDataset, config: TrainConfig, params: Optional[ModelParams] = None,
          centers: Optional[CenterTable] = None, start_epoch: int = 0,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None,
          ) -> tuple[ModelParams, CenterTable, TrainReport]:
    """Run the alternating updates from ``start_epoch`` to ``config.max_epochs``.

    Per batch: one or more discriminator steps on detached features, then one
    encoder/classifier step on the weighted objective with the discriminator
    frozen, then a center update from the (detached) source features of that
    step.  Early stopping looks only at the training objective and only in
    the final schedule stage.
    """
    variant = config.variant
    k = dataset.n_classes
    if params is None:
        params = init_params(config.model_spec(dataset.input_dim, k), config.seed)
    if variant.adversarial and params.discriminator is None:
        raise CompatibilityError("adversarial variant needs a discriminator")
    d_opt = config.new_optimizer() if variant.adversarial else None
    ec_opt = config.new_optimizer()
    batches = BatchIterator(dataset, config.batch_size, config.seed + start_epoch)
    report = TrainReport()
    best = math.inf
    stale = 0
    ec_names = params.named("encoder", "classifier")
    d_names = params.named("discriminator") if variant.adversarial else {}

    for epoch in range(start_epoch, config.max_epochs):
        t0 = time.perf_counter()
        w = train_stage_weights(config, epoch)
        lr = ec_opt.lr_at(epoch)
        sums = dict(disc=0.0, enc_adv=0.0, cls=0.0, cs=0.0, ct=0.0, total=0.0)
        kept = seen = n_batches = 0
        drift = 0.0

        for batch in batches:
            n_batches += 1
            xs, ys, xt = Tensor(batch.source_x), batch.source_y, Tensor(batch.target_x)

            if variant.adversarial:
                for _ in range(config.d_steps):
                    fs_d, ft_d = encode(params, xs), encode(params, xt)  # off-tape: detached
                    with Tape() as tape:
                        disc_loss, _ = adversarial_losses(discriminate(params, fs_d), discriminate(params, ft_d))
                    sums["disc"] += _finite(disc_loss.item(), "discriminator loss", epoch) / config.d_steps
                    tape.backward(disc_loss)
                    optimizer_step(d_names, d_opt, epoch)

            with Tape() as tape:
                fs = encode(params, xs)
                ft = encode(params, xt)
                if centers is None or not centers.initialized:
                    centers = init_centers(fs.value, ys, k, config.gamma)
                cls_loss, _ = source_classification_loss(classify(params, fs), ys)
                if variant.adversarial:
                    _, enc_adv = adversarial_losses(discriminate(params, fs, frozen=True),
                                                    discriminate(params, ft, frozen=True), config.adv_form)
                else:
                    enc_adv = _zero()
                cs_loss = center_loss_source(fs, ys, centers)
                if w.beta2 > 0:
                    probs_t = softmax(classify(params, ft.detach()).value)
                    phi = filter_target(probs_t, w.threshold)
                    ct_loss = conditional_loss_target(ft, phi, centers)
                    kept += phi.rows.size
                    seen += xt.rows
                else:
                    ct_loss = _zero()
                total, _ = total_objective(enc_adv, cls_loss, cs_loss, ct_loss, None, w)

            for term, t in (("enc_adv", enc_adv), ("cls", cls_loss), ("cs", cs_loss),
                            ("ct", ct_loss), ("total", total)):
                sums[term] += _finite(t.item(), term, epoch)
            tape.backward(total)
            optimizer_step(ec_names, ec_opt, epoch)

            before = centers.centers
            centers = update_centers(centers, fs.value, ys)
            if not np.isfinite(centers.centers).all():
                raise TrainingAborted(f"non-finite class centers at epoch {epoch}")
            drift += float(np.linalg.norm(centers.centers - before))

        mean = {key: v / max(n_batches, 1) for key, v in sums.items()}
        record = EpochRecord(
            epoch=epoch,
            stage=stage_index(config, epoch),
            alpha=w.alpha, beta1=w.beta1, beta2=w.beta2, lr=lr,
            loss_disc=mean["disc"] if variant.adversarial else None,
            loss_enc_adv=mean["enc_adv"] if variant.adversarial else None,
            loss_cls=mean["cls"],
            loss_center_src=mean["cs"],
            loss_center_tgt=mean["ct"] if w.beta2 > 0 else None,
            loss_total=mean["total"],
            phi_kept_fraction=kept / seen if seen else None,
            source_acc=_accuracy(params, *dataset.source_test),
            target_acc=_accuracy(params, *dataset.target_test),
            center_drift=drift,
            wall_time=time.perf_counter() - t0,
        )
        report.records.append(record)
        log.debug("epoch %d: %s", epoch, record.to_json())
        if on_epoch is not None:
            on_epoch(record)

        if stage_index(config, epoch) == len(config.schedule) - 1:
            if record.loss_total < best - config.min_delta:
                best = record.loss_total
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    report.stopped_early = True
                    break

    return params, centers, report


def resume(dataset: DomainDataset, config: TrainConfig, checkpoint_path, start_epoch: int,
           on_epoch=None) -> tuple[ModelParams, CenterTable, TrainReport]:
    """Continue from a checkpoint at ``start_epoch``.

    Schedule and learning-rate decay are evaluated at the global epoch; the
    batch order is reseeded with ``seed + start_epoch`` and optimizer
    accumulators restart from zero, so a resumed run is deterministic but not
    identical to an uninterrupted one.
    """
    params, centers = load_checkpoint(checkpoint_path)
    want = config.model_spec(dataset.input_dim, dataset.n_classes)
    have = params.spec()
    if have.encoder != want.encoder or have.classifier != want.classifier or (
            want.discriminator is not None and have.discriminator != want.discriminator):
        raise CompatibilityError(f"checkpoint model {have} does not match config model {want}")
    if not want.discriminator:
        params = replace(params, discriminator=None)
    return train(dataset, config, params, centers, start_epoch, on_epoch)
