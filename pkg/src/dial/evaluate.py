"""Metrics, ablation and source-retention experiments, embedding export."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import OptimizerState, Tape, Tensor, bce_with_logits, optimizer_step, softmax
from .data import DatasetSpec, DomainDataset, make_rng
from .errors import DataError, DialError
from .losses import CenterTable
from .models import ModelParams, ModelSpec, classify, encode, init_params, mlp_forward
from .trainer import TrainConfig, TrainReport, Variant, train

log = logging.getLogger(__name__)

ABLATION_VARIANTS = (Variant.SOURCE_ONLY, Variant.GAN_ONLY, Variant.GAN_CENTER, Variant.FULL)
# (unadapted, adapted) pairs compared for source-domain retention
RETENTION_PAIRS = ((Variant.SOURCE_ONLY, Variant.GAN_ONLY), (Variant.SOURCE_CENTER, Variant.GAN_CENTER))

PROBE_STREAM = 3


@dataclass
class EvalSummary:
    source_test_acc: float
    target_test_acc: float
    per_class_acc: list[float]
    confusion: list[list[int]]
    domain_probe_acc: float
    phi_kept_fraction: float

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return m


def features_of(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return encode(params, Tensor(x)).value


def domain_probe(source_feats: np.ndarray, target_feats: np.ndarray, seed: int = 0,
                 hidden: int = 32, steps: int = 300, lr: float = 1e-2) -> float:
    """Held-out accuracy of a fresh discriminator fit on frozen features.

    Domains are balanced by subsampling, then split 80/20.  Around 0.5 means
    the features carry no usable domain information.
    """
    rng = make_rng(seed, PROBE_STREAM)
    n = min(len(source_feats), len(target_feats))
    if n < 5:
        raise DataError("domain probe needs at least 5 samples per domain")
    s = source_feats[rng.permutation(len(source_feats))[:n]]
    t = target_feats[rng.permutation(len(target_feats))[:n]]
    x = np.concatenate([s, t])
    y = np.concatenate([np.ones(n), np.zeros(n)])
    order = rng.permutation(2 * n)
    x, y = x[order], y[order]
    mu, sd = x.mean(axis=0), x.std(axis=0)
    sd[sd == 0] = 1.0
    x = (x - mu) / sd
    cut = int(round(0.8 * len(y)))
    spec = ModelSpec.build(x.shape[1], 2, feature_dim=x.shape[1], disc_hidden=(hidden,))
    probe = init_params(spec, int(rng.integers(2**31))).discriminator
    named = {f"{i}.{k}": t for i, (w, b) in enumerate(probe) for k, t in (("W", w), ("b", b))}
    opt = OptimizerState("rmsprop", lr, 1.0, 1)
    xtr = Tensor(x[:cut])
    for _ in range(steps):
        with Tape() as tape:
            loss = bce_with_logits(mlp_forward(probe, xtr), y[:cut])
        tape.backward(loss)
        optimizer_step(named, opt, 0)
    logits = mlp_forward(probe, Tensor(x[cut:])).value[:, 0]
    return float(((logits > 0) == (y[cut:] == 1)).mean())


def evaluate(params: ModelParams, centers: Optional[CenterTable], dataset: DomainDataset,
             threshold: float = 0.99, probe_seed: int = 0) -> EvalSummary:
    xs, ys = dataset.source_test
    xt, yt = dataset.target_test
    if len(ys) == 0 or len(yt) == 0:
        raise DataError("evaluation needs non-empty source and target test splits")
    fs, ft = features_of(params, xs), features_of(params, xt)
    pred_s = classify(params, Tensor(fs)).value.argmax(axis=1)
    probs_t = softmax(classify(params, Tensor(ft)).value)
    pred_t = probs_t.argmax(axis=1)
    k = dataset.n_classes
    conf = confusion_matrix(yt, pred_t, k)
    counts = conf.sum(axis=1)
    per_class = [float(conf[i, i] / counts[i]) if counts[i] else float("nan") for i in range(k)]
    return EvalSummary(
        source_test_acc=float((pred_s == ys).mean()),
        target_test_acc=float(np.trace(conf) / conf.sum()),
        per_class_acc=per_class,
        confusion=conf.tolist(),
        domain_probe_acc=domain_probe(fs, ft, probe_seed),
        phi_kept_fraction=float((probs_t.max(axis=1) >= threshold).mean()),
    )


@dataclass
class RunOutcome:
    variant: Variant
    seed: int
    summary: Optional[EvalSummary]
    params: Optional[ModelParams] = field(default=None, repr=False)
    centers: Optional[CenterTable] = field(default=None, repr=False)
    report: Optional[TrainReport] = field(default=None, repr=False)
    error: Optional[str] = None


def run_one(dataset: DomainDataset, config: TrainConfig, variant: Variant, seed: int) -> RunOutcome:
    cfg = replace(config, variant=variant, seed=seed)
    try:
        params, centers, report = train(dataset, cfg)
    except DialError as exc:
        log.error("%s seed %d failed: %s", variant.value, seed, exc)
        return RunOutcome(variant, seed, None, error=str(exc))
    summary = evaluate(params, centers, dataset, cfg.threshold, probe_seed=seed)
    return RunOutcome(variant, seed, summary, params, centers, report)


def run_variants(dataset: DomainDataset, config: TrainConfig, variants: Sequence[Variant],
                 seeds: Sequence[int], workers: int = 1) -> dict[Variant, list[RunOutcome]]:
    """Train every (variant, seed) pair; each run owns all of its state."""
    jobs = [(v, s) for v in variants for s in seeds]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outcomes = list(pool.map(lambda job: run_one(dataset, config, *job), jobs))
    else:
        outcomes = [run_one(dataset, config, v, s) for v, s in jobs]
    grouped: dict[Variant, list[RunOutcome]] = {v: [] for v in variants}
    for o in outcomes:
        grouped[o.variant].append(o)
    return grouped


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else float("nan")


@dataclass
class AblationResult:
    variant: Variant
    seeds: list[int]
    summaries: list[Optional[EvalSummary]]
    mean: float
    std: float
    failed: list[int] = field(default_factory=list)

    @property
    def accuracies(self) -> list[float]:
        return [s.target_test_acc for s in self.summaries if s is not None]


def _ablation_from(outcomes: dict[Variant, list[RunOutcome]]) -> list[AblationResult]:
    results = []
    for variant, runs in outcomes.items():
        accs = [r.summary.target_test_acc for r in runs if r.summary is not None]
        m, s = mean_std(accs)
        results.append(AblationResult(variant, [r.seed for r in runs], [r.summary for r in runs], m, s,
                                      [r.seed for r in runs if r.summary is None]))
    return results


def run_ablation(dataset_spec: DatasetSpec, config: TrainConfig, seeds: Sequence[int],
                 workers: int = 1) -> list[AblationResult]:
    """Target-test accuracy of SourceOnly, GanOnly, GanCenter and Full, in that order."""
    if len(seeds) < 2:
        raise DataError("ablation needs at least 2 seeds to report a spread")
    dataset = dataset_spec.build()
    return _ablation_from(run_variants(dataset, config, ABLATION_VARIANTS, seeds, workers))


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{100 * x:.2f}"


def ablation_tsv(results: Sequence[AblationResult]) -> str:
    seeds = results[0].seeds
    lines = ["\t".join(["variant", "model", *[f"seed{s}" for s in seeds], "mean", "std"])]
    for r in results:
        cells = [_fmt(s.target_test_acc) if s is not None else "failed" for s in r.summaries]
        lines.append("\t".join([r.variant.value, r.variant.label, *cells, _fmt(r.mean), _fmt(r.std)]))
    return "\n".join(lines) + "\n"


def ablation_json(results: Sequence[AblationResult], config: TrainConfig, dataset_spec: DatasetSpec) -> str:
    body = {
        "config": config.to_dict(),
        "dataset": dataset_spec.to_dict(),
        "variants": [
            {"variant": r.variant.value, "model": r.variant.label, "seeds": r.seeds,
             "target_test_acc": [s.target_test_acc if s else None for s in r.summaries],
             "summaries": [s.to_dict() if s else None for s in r.summaries],
             "mean": r.mean, "std": r.std, "failed": r.failed}
            for r in results
        ],
    }
    return json.dumps(body, indent=2, allow_nan=True) + "\n"


@dataclass
class RetentionReport:
    """Source-test accuracy before and after adaptation for the two model pairs."""

    seeds: list[int]
    source_acc: dict[str, list[Optional[float]]]  # column label -> per seed
    gaps: dict[str, list[Optional[float]]]  # "after - before" per pair, per seed
    mean_gap: dict[str, float]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_tsv(self) -> str:
        cols = list(self.source_acc)
        lines = ["\t".join(["seed", *cols])]
        for i, s in enumerate(self.seeds):
            lines.append("\t".join([str(s), *[_fmt(self.source_acc[c][i]) if self.source_acc[c][i] is not None
                                                else "failed" for c in cols]]))
        lines.append("\t".join(["mean", *[_fmt(mean_std([v for v in self.source_acc[c] if v is not None])[0])
                                          for c in cols]]))
        return "\n".join(lines) + "\n"


def _retention_from(outcomes: dict[Variant, list[RunOutcome]], seeds) -> RetentionReport:
    acc = {}
    for v in [v for pair in RETENTION_PAIRS for v in pair]:
        acc[v.label] = [r.summary.source_test_acc if r.summary else None for r in outcomes[v]]
    gaps, mean_gap = {}, {}
    for before, after in RETENTION_PAIRS:
        key = f"{after.label} - {before.label}"
        g = [None if (a is None or b is None) else a - b
             for a, b in zip(acc[after.label], acc[before.label])]
        gaps[key] = g
        mean_gap[key] = mean_std([x for x in g if x is not None])[0]
    return RetentionReport(list(seeds), acc, gaps, mean_gap)


def source_retention(dataset_spec: DatasetSpec, config: TrainConfig, seeds: Sequence[int],
                     workers: int = 1) -> RetentionReport:
    dataset = dataset_spec.build()
    variants = [v for pair in RETENTION_PAIRS for v in pair]
    return _retention_from(run_variants(dataset, config, variants, seeds, workers), seeds)


# -- embeddings -----------------------------------------------------------------

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
            "#7f7f7f", "#bcbd22", "#17becf")


def export_embeddings(params: ModelParams, dataset: DomainDataset, path) -> list[Path]:
    """Encoder features of every split as CSV; with 2-D features also an SVG scatter.

    Target train rows are written with label -1 (they are unlabeled at train time).
    """
    path = Path(path)
    d = params.feature_dim
    rows = []
    for split, (domain, x, y) in dataset.splits().items():
        f = features_of(params, x)
        labels = np.full(len(x), -1) if split == "target_train" else y
        for i in range(len(x)):
            rows.append((f[i], int(labels[i]), domain, split))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(d)] + ["label", "domain", "split"])
        for f, label, domain, split in rows:
            w.writerow([repr(float(v)) for v in f] + [label, domain, split])
    written = [path]
    if d == 2:
        svg = path.with_suffix(".svg")
        svg.write_text(_scatter_svg(rows))
        written.append(svg)
    return written


def _scatter_svg(rows, size: int = 600, pad: int = 20) -> str:
    pts = np.array([r[0] for r in rows])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    xy = pad + (pts - lo) / span * (size - 2 * pad)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">', '<rect width="100%" height="100%" fill="white"/>']
    for (px, py), (_, label, domain, _) in zip(xy, rows):
        color = _PALETTE[label % len(_PALETTE)] if label >= 0 else "#000000"
        py = size - py
        if domain == "S":
            out.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="2.5" fill="{color}" fill-opacity="0.6"/>')
        else:
            out.append(f'<rect x="{px - 2.5:.2f}" y="{py - 2.5:.2f}" width="5" height="5" fill="none" '
                       f'stroke="{color}" stroke-opacity="0.8"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of the CSV export: (features, labels, domains, splits)."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = sum(1 for h in header if h.startswith("f"))
        feats, labels, domains, splits = [], [], [], []
        for row in reader:
            feats.append([float(v) for v in row[:d]])
            labels.append(int(row[d]))
            domains.append(row[d + 1])
            splits.append(row[d + 2])
    return np.array(feats), np.array(labels), np.array(domains), np.array(splits)


def within_class_variance(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean over classes of the summed per-dimension variance of that class's features."""
    values = []
    for k in np.unique(labels[labels >= 0]):
        members = features[labels == k]
        if len(members) > 1:
            values.append(float(members.var(axis=0).sum()))
    return float(np.mean(values))


def embedding_within_class_variance(path, split: str = "target_test") -> float:
    f, y, _, s = read_embeddings(path)
    keep = s == split
    return within_class_variance(f[keep], y[keep])
