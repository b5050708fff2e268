"""Adversarial, classification, center and conditional alignment losses.

The center loss terms are sums over rows (not means); the adversarial and
classification terms are batch means.  Class centers live outside the
autodiff graph and move only through :func:`update_centers`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, bce_with_logits, scale, softmax_cross_entropy, squared_distance_sum
from .errors import BatchError, ConfigError, DimensionError, SpecError, StateError

log = logging.getLogger(__name__)


@dataclass
class CenterTable:
    centers: np.ndarray  # K x d
    gamma: float = 0.5
    initialized: bool = False

    @classmethod
    def empty(cls, n_classes: int, dim: int, gamma: float = 0.5) -> "CenterTable":
        return cls(np.zeros((n_classes, dim)), gamma, False)

    @property
    def n_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def copy(self) -> "CenterTable":
        return CenterTable(self.centers.copy(), self.gamma, self.initialized)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0
    beta1: float = 0.0
    beta2: float = 0.0
    threshold: float = 0.99

    def __post_init__(self):
        for name in ("alpha", "beta1", "beta2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        _check_threshold(self.threshold)


@dataclass
class FilteredBatch:
    rows: np.ndarray  # kept row indices
    pseudo_labels: np.ndarray
    max_probs: np.ndarray  # for every row of the batch, kept or not

    @property
    def kept_fraction(self) -> float:
        return self.rows.size / self.max_probs.size if self.max_probs.size else 0.0


def _check_threshold(t: float) -> None:
    if not (0.0 < t <= 1.0):
        raise ConfigError(f"threshold must lie in (0, 1], got {t}")


def _labels_for(labels, n: int, k: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got {y.shape}")
    if n and (y.min() < 0 or y.max() >= k):
        raise DimensionError(f"labels must lie in [0, {k})")
    return y


ENCODER_FORMS = ("target_flip", "symmetric_flip", "minimax")


def adversarial_losses(d_logits_src: Tensor, d_logits_tgt: Tensor,
                       encoder_form: str = "target_flip") -> tuple[Tensor, Tensor]:
    """Return ``(disc_loss, enc_loss)``.

    disc_loss averages the per-domain BCE with source -> 1 and target -> 0,
    so minimizing it maximizes the log-likelihood game objective.  enc_loss
    depends on ``encoder_form``:

    - ``target_flip`` (default): target logits scored against label 1, the
      non-saturating fooling term.
    - ``symmetric_flip``: both domains scored against the opposite label.
    - ``minimax``: the negated discriminator loss.
    """
    for t in (d_logits_src, d_logits_tgt):
        if t.cols != 1:
            raise DimensionError(f"domain logits must be n x 1, got {t.shape}")
    ones_s, zeros_s = np.ones(d_logits_src.rows), np.zeros(d_logits_src.rows)
    ones_t, zeros_t = np.ones(d_logits_tgt.rows), np.zeros(d_logits_tgt.rows)
    disc = scale(add(bce_with_logits(d_logits_src, ones_s), bce_with_logits(d_logits_tgt, zeros_t)), 0.5)
    if encoder_form == "target_flip":
        enc = bce_with_logits(d_logits_tgt, ones_t)
    elif encoder_form == "symmetric_flip":
        enc = scale(add(bce_with_logits(d_logits_src, zeros_s), bce_with_logits(d_logits_tgt, ones_t)), 0.5)
    elif encoder_form == "minimax":
        enc = scale(disc, -1.0)
    else:
        raise ConfigError(f"unknown encoder adversarial form {encoder_form!r}")
    return disc, enc


def source_classification_loss(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    return softmax_cross_entropy(logits, labels)


def center_loss_source(features: Tensor, labels, centers: CenterTable) -> Tensor:
    if not centers.initialized:
        raise StateError("class centers used before initialization")
    if features.cols != centers.dim:
        raise DimensionError(f"feature width {features.cols} != center width {centers.dim}")
    y = _labels_for(labels, features.rows, centers.n_classes)
    return squared_distance_sum(features, centers.centers[y])


def init_centers(features, labels, n_classes: int, gamma: float = 0.5) -> CenterTable:
    """Per-class mean of the first batch; classes missing from it start at zero."""
    if n_classes < 1:
        raise SpecError("need at least one class")
    f = np.asarray(getattr(features, "value", features), dtype=np.float64)
    y = _labels_for(labels, f.shape[0], n_classes)
    if f.shape[0] == 0:
        raise BatchError("cannot initialize centers from an empty batch")
    centers = np.zeros((n_classes, f.shape[1]))
    for k in range(n_classes):
        members = f[y == k]
        if len(members):
            centers[k] = members.mean(axis=0)
        else:
            log.warning("class %d absent from the first batch; center starts at zero", k)
    return CenterTable(centers, gamma, True)


def update_centers(centers: CenterTable, features, labels) -> CenterTable:
    """One damped pull of each center toward its members in this batch.

    delta_k = sum_{y_i = k}(c_k - f_i) / (1 + N_k);  c_k <- c_k - gamma * delta_k
    """
    if not centers.initialized:
        raise StateError("class centers used before initialization")
    f = np.asarray(getattr(features, "value", features), dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != centers.dim:
        raise DimensionError(f"feature shape {f.shape} does not match center width {centers.dim}")
    k = centers.n_classes
    y = _labels_for(labels, f.shape[0], k)
    counts = np.bincount(y, minlength=k).astype(np.float64)
    sums = np.zeros_like(centers.centers)
    np.add.at(sums, y, f)
    delta = (counts[:, None] * centers.centers - sums) / (1.0 + counts[:, None])
    return CenterTable(centers.centers - centers.gamma * delta, centers.gamma, True)


def filter_target(probabilities, threshold: float) -> FilteredBatch:
    """Keep rows whose top probability is >= threshold; pseudo-label is the argmax."""
    _check_threshold(threshold)
    p = np.asarray(probabilities, dtype=np.float64)
    top = p.max(axis=1)
    labels = p.argmax(axis=1)  # first maximum wins ties
    rows = np.flatnonzero(top >= threshold)
    return FilteredBatch(rows, labels[rows], top)


def conditional_loss_target(features: Tensor, filtered: FilteredBatch, centers: CenterTable) -> Tensor:
    if not centers.initialized:
        raise StateError("class centers used before initialization")
    if filtered.rows.size and filtered.rows.max() >= features.rows:
        raise IndexError(f"kept row {filtered.rows.max()} outside batch of {features.rows}")
    return squared_distance_sum(features, centers.centers[filtered.pseudo_labels], rows=filtered.rows)


def total_objective(enc_adv: Tensor, cls_loss: Tensor, center_src: Tensor, center_tgt: Tensor,
                    disc_adv: Tensor, weights: LossWeights) -> tuple[Tensor, Tensor]:
    """Split the min-max objective into the encoder/classifier loss and the discriminator loss."""
    enc_cls = add(enc_adv, scale(cls_loss, weights.alpha), scale(center_src, weights.beta1),
                  scale(center_tgt, weights.beta2))
    return enc_cls, disc_adv
