"""Central finite-difference checks of every differentiable operation.

Relative error of a gradient is ``max|analytic - numeric| / max(max|analytic|,
max|numeric|, 1e-8)`` taken over the whole tensor.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import make_rng
from .losses import (
    ENCODER_FORMS,
    CenterTable,
    LossWeights,
    adversarial_losses,
    center_loss_source,
    conditional_loss_target,
    filter_target,
    source_classification_loss,
    total_objective,
)
from .models import ModelSpec, classify, discriminate, encode, init_params

H = 1e-5
KINK_MARGIN = 1e-3


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = H) -> np.ndarray:
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        up = f()
        arr[idx] = old - h
        down = f()
        arr[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-8)
    return float(np.abs(a - n).max() / scale)


def check(build: Callable[[], Tensor], leaves: list[Tensor]) -> float:
    """Max relative error over ``leaves`` of the scalar produced by ``build``."""
    for t in leaves:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = build()
    tape.backward(out)
    worst = 0.0
    for t in leaves:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.value)

        def f():
            return build().item()

        worst = max(worst, rel_error(analytic, numeric_grad(f, t.value)))
        t.grad = None
    return worst


def _away_from_kinks(rng, shape, low=-2.0, high=2.0):
    x = rng.uniform(low, high, size=shape)
    x[np.abs(x) < KINK_MARGIN] = KINK_MARGIN * 10
    return x


def _hidden_preacts(layers, x):
    """Pre-activations of every hidden layer, plus the final linear output."""
    pres, h = [], x
    for w, b in layers[:-1]:
        pre = h @ w.value + b.value
        pres.append(pre)
        h = np.maximum(pre, 0)
    w, b = layers[-1]
    return pres, h @ w.value + b.value


def _no_kinks(params, xs) -> bool:
    """True when no hidden pre-activation sits within KINK_MARGIN of zero."""
    for x in xs:
        pres, feats = _hidden_preacts(params.encoder, x)
        if params.discriminator:
            pres += _hidden_preacts(params.discriminator, feats)[0]
        if any(np.abs(p).min() < KINK_MARGIN for p in pres):
            return False
    return True


def op_cases(rng) -> dict[str, float]:
    """One randomized draw of every primitive operation."""
    out = {}
    a = Tensor(rng.uniform(-2, 2, (3, 4)))
    b = Tensor(rng.uniform(-2, 2, (4, 2)))
    out["matmul"] = check(lambda: ad.total_sum(ad.matmul(a, b)), [a, b])
    x = Tensor(rng.uniform(-2, 2, (3, 4)))
    bias = Tensor(rng.uniform(-2, 2, (1, 4)))
    wsum = rng.uniform(-2, 2, (3, 4))
    # weight the output so the check is not just a sum
    out["add_bias"] = check(lambda: ad.total_sum(ad.matmul(ad.add_bias(x, bias), Tensor(wsum.T))), [x, bias])
    r = Tensor(_away_from_kinks(rng, (3, 4)))
    out["relu"] = check(lambda: ad.total_sum(ad.matmul(ad.relu(r), Tensor(wsum.T))), [r])
    logits = Tensor(rng.uniform(-2, 2, (4, 5)))
    labels = rng.integers(0, 5, 4)
    out["softmax_cross_entropy"] = check(lambda: ad.softmax_cross_entropy(logits, labels)[0], [logits])
    z = Tensor(rng.uniform(-2, 2, (8, 1)))
    y = rng.integers(0, 2, 8)
    out["bce_with_logits"] = check(lambda: ad.bce_with_logits(z, y), [z])
    f = Tensor(rng.uniform(-2, 2, (5, 3)))
    targets = rng.uniform(-2, 2, (3, 3))
    rows = np.array([0, 2, 4])
    out["squared_distance_sum"] = check(lambda: ad.squared_distance_sum(f, targets, rows), [f])
    p = Tensor(rng.uniform(-2, 2, (1, 1)))
    q = Tensor(rng.uniform(-2, 2, (1, 1)))
    c = float(rng.uniform(-2, 2))
    out["add_scale"] = check(lambda: ad.add(ad.scale(p, c), ad.matmul(q, q)), [p, q])
    return out


def composite_cases(rng, seed: int, encoder_form: str = "target_flip") -> dict[str, float]:
    """Encoder/classifier objective and discriminator objective on a tiny model."""
    spec = ModelSpec.build(input_dim=4, n_classes=3, feature_dim=3, encoder_hidden=(5,), disc_hidden=(4,))
    for attempt in range(100):
        params = init_params(spec, seed * 1000 + attempt)
        xs = rng.uniform(-2, 2, (6, 4))
        xt = rng.uniform(-2, 2, (6, 4))
        if _no_kinks(params, [xs, xt]):
            break
    ys = np.array([0, 1, 2, 0, 1, 2])
    centers = CenterTable(rng.uniform(-1, 1, (3, 3)), 0.5, True)

    # a threshold in the widest gap of target confidences keeps the kept set stable under +-h
    probs = ad.softmax(classify(params, encode(params, Tensor(xt))).value)
    top = np.sort(probs.max(axis=1))
    edges = np.concatenate([[top[0] - 0.05], top])
    gaps = np.diff(edges)
    i = int(np.argmax(gaps))
    threshold = float(min(max((edges[i] + edges[i + 1]) / 2, 1e-3), 1.0))
    weights = LossWeights(alpha=float(rng.uniform(0.5, 10)), beta1=float(rng.uniform(0, 1)),
                          beta2=float(rng.uniform(0, 1)), threshold=threshold)
    xs_t, xt_t = Tensor(xs), Tensor(xt)

    def enc_objective():
        fs = encode(params, xs_t)
        ft = encode(params, xt_t)
        ls, _ = source_classification_loss(classify(params, fs), ys)
        _, enc_adv = adversarial_losses(discriminate(params, fs, frozen=True),
                                        discriminate(params, ft, frozen=True), encoder_form)
        lcs = center_loss_source(fs, ys, centers)
        phi = filter_target(ad.softmax(classify(params, ft.detach()).value), weights.threshold)
        lct = conditional_loss_target(ft, phi, centers)
        return total_objective(enc_adv, ls, lcs, lct, None, weights)[0]

    def disc_objective():
        fs = encode(params, xs_t)
        ft = encode(params, xt_t)
        return adversarial_losses(discriminate(params, fs), discriminate(params, ft))[0]

    ec = list(params.named("encoder", "classifier").values())
    dd = list(params.named("discriminator").values())
    out = {
        "encoder_classifier_objective": check(enc_objective, ec),
        "discriminator_objective": check(disc_objective, dd),
    }
    for t in params.named().values():
        t.requires_grad = True
    return out


def run_grad_check(draws: int = 20, seed: int = 0) -> dict[str, float]:
    """Worst relative error per operation over ``draws`` randomized draws."""
    worst: dict[str, float] = {}
    for d in range(draws):
        rng = make_rng(seed, 7, d)
        # cycle the encoder adversarial form so every variant of the objective is covered
        form = ENCODER_FORMS[d % len(ENCODER_FORMS)]
        for name, err in {**op_cases(rng), **composite_cases(rng, d, form)}.items():
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
