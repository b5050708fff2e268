"""Encoder, classifier and domain discriminator as plain MLP parameter sets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, add_bias, matmul, relu
from .errors import DimensionError, SpecError

Layer = tuple[Tensor, Tensor]


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths from input to output. Hidden layers use ReLU, output is linear."""

    widths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise SpecError(f"an MLP needs at least 2 widths, got {self.widths}")
        if any(w < 1 for w in self.widths):
            raise SpecError(f"all widths must be >= 1, got {self.widths}")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def parameter_count(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))


@dataclass(frozen=True)
class ModelSpec:
    encoder: MlpSpec
    classifier: MlpSpec
    discriminator: Optional[MlpSpec] = None

    @classmethod
    def build(cls, input_dim: int, n_classes: int, feature_dim: int = 16,
              encoder_hidden=(64,), disc_hidden=(64, 64), with_discriminator: bool = True):
        enc = MlpSpec((input_dim, *encoder_hidden, feature_dim))
        clf = MlpSpec((feature_dim, n_classes))
        disc = MlpSpec((feature_dim, *disc_hidden, 1)) if with_discriminator else None
        return cls(enc, clf, disc)

    def validate(self) -> None:
        d = self.encoder.n_out
        if len(self.classifier.widths) != 2:
            raise SpecError("the classifier is a single fully connected layer")
        if self.classifier.n_in != d:
            raise SpecError(f"classifier input {self.classifier.n_in} != feature width {d}")
        if self.discriminator is not None:
            if self.discriminator.n_in != d:
                raise SpecError(f"discriminator input {self.discriminator.n_in} != feature width {d}")
            if self.discriminator.n_out != 1:
                raise SpecError("discriminator must output a single logit")

    @property
    def feature_dim(self) -> int:
        return self.encoder.n_out

    @property
    def n_classes(self) -> int:
        return self.classifier.n_out


@dataclass
class ModelParams:
    encoder: list[Layer]
    classifier: Layer
    discriminator: Optional[list[Layer]] = None

    def groups(self) -> dict[str, list[Layer]]:
        out = {"encoder": self.encoder, "classifier": [self.classifier]}
        if self.discriminator is not None:
            out["discriminator"] = self.discriminator
        return out

    def named(self, *groups: str) -> dict[str, Tensor]:
        """Flat ``{"encoder.0.W": tensor, ...}`` view over the chosen groups (all by default)."""
        selected = groups or tuple(self.groups())
        out = {}
        for g in selected:
            layers = self.groups().get(g)
            if layers is None:
                continue
            for i, (w, b) in enumerate(layers):
                out[f"{g}.{i}.W"] = w
                out[f"{g}.{i}.b"] = b
        return out

    @property
    def feature_dim(self) -> int:
        return self.encoder[-1][0].cols

    @property
    def n_classes(self) -> int:
        return self.classifier[0].cols

    def spec(self) -> ModelSpec:
        def widths(layers):
            return MlpSpec((layers[0][0].rows, *(w.cols for w, _ in layers)))

        disc = widths(self.discriminator) if self.discriminator is not None else None
        return ModelSpec(widths(self.encoder), widths([self.classifier]), disc)

    def parameter_count(self) -> int:
        return sum(t.value.size for t in self.named().values())


def _init_layers(spec: MlpSpec, rng: np.random.Generator, prefix: str) -> list[Layer]:
    layers = []
    for i, (n_in, n_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
        layers.append((Tensor(w, requires_grad=True, name=f"{prefix}.{i}.W"),
                       Tensor(np.zeros((1, n_out)), requires_grad=True, name=f"{prefix}.{i}.b")))
    return layers


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases, deterministic in ``seed``."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    enc = _init_layers(spec.encoder, rng, "encoder")
    clf = _init_layers(spec.classifier, rng, "classifier")[0]
    disc = _init_layers(spec.discriminator, rng, "discriminator") if spec.discriminator else None
    return ModelParams(enc, clf, disc)


def mlp_forward(layers: list[Layer], x: Tensor) -> Tensor:
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        if h.cols != w.rows:
            raise DimensionError(f"input width {h.cols} does not match layer width {w.rows}")
        h = add_bias(matmul(h, w), b)
        if i < last:
            h = relu(h)
    return h


def encode(params: ModelParams, x: Tensor) -> Tensor:
    """Shared features for either domain; there is only one encoder."""
    return mlp_forward(params.encoder, x)


def classify(params: ModelParams, features: Tensor) -> Tensor:
    return mlp_forward([params.classifier], features)


def discriminate(params: ModelParams, features: Tensor, frozen: bool = False) -> Tensor:
    """Domain logit per row; sigmoid(logit) is the probability of "source".

    With ``frozen=True`` the discriminator weights enter the graph as
    constants, so gradients reach the features but never the discriminator.
    """
    if params.discriminator is None:
        raise SpecError("model was built without a discriminator")
    layers = params.discriminator
    if frozen:
        layers = [(w.detach(), b.detach()) for w, b in layers]
    return mlp_forward(layers, features)


def predict(params: ModelParams, x) -> np.ndarray:
    """Class predictions for raw inputs (no tape, ties to the lowest index)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    return classify(params, encode(params, x)).value.argmax(axis=1)
