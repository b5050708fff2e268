"""Synthetic domain-shift datasets, IDX ingestion and seeded mini-batching.

All randomness comes from numpy's PCG64 bit generator seeded explicitly;
nothing here touches global random state.
"""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import DataError, FormatError, SpecError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CLUSTER_RADIUS = 3.0
CLUSTER_SIGMA = 0.5


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator; ``stream`` ids give independent sub-streams of one seed."""
    if stream:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class ShiftSpec:
    rotation: float = 0.0
    translation: tuple[float, ...] = ()
    scale: float = 1.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        if self.scale <= 0:
            raise SpecError(f"shift scale must be > 0, got {self.scale}")
        if self.noise_sigma < 0:
            raise SpecError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def is_identity(self) -> bool:
        return (self.rotation == 0 and not any(self.translation) and self.scale == 1
                and self.noise_sigma == 0)

    def translation_vector(self, dim: int) -> np.ndarray:
        if len(self.translation) > dim:
            raise SpecError(f"translation has {len(self.translation)} entries for dim {dim}")
        t = np.zeros(dim)
        t[: len(self.translation)] = self.translation
        return t

    def apply(self, x: np.ndarray, rng: np.random.Generator, origin=(0.0, 0.0)) -> np.ndarray:
        """Rotate the first two coordinates about ``origin``, scale, translate, add noise."""
        out = np.array(x, dtype=np.float64)
        o = np.zeros(out.shape[1])
        o[:2] = origin
        out -= o
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        x0, x1 = out[:, 0].copy(), out[:, 1].copy()
        out[:, 0] = c * x0 - s * x1
        out[:, 1] = s * x0 + c * x1
        out = out * self.scale + o + self.translation_vector(out.shape[1])
        if self.noise_sigma > 0:
            out += rng.normal(0.0, self.noise_sigma, size=out.shape)
        return out


@dataclass
class DomainDataset:
    """Labeled source splits plus target splits whose train labels are evaluation-only."""

    source_train: tuple[np.ndarray, np.ndarray]
    source_test: tuple[np.ndarray, np.ndarray]
    target_train_x: np.ndarray
    target_test: tuple[np.ndarray, np.ndarray]
    n_classes: int
    _target_train_labels: np.ndarray = field(repr=False, default=None)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        dim = self.input_dim
        arrays = [self.source_train, self.source_test, (self.target_train_x, self._target_train_labels),
                  self.target_test]
        for x, y in arrays:
            if x.ndim != 2 or x.shape[1] != dim:
                raise DataError(f"feature block of shape {x.shape} does not have width {dim}")
            if y is not None:
                if y.shape != (x.shape[0],):
                    raise DataError(f"{y.shape[0]} labels for {x.shape[0]} samples")
                if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                    raise DataError(f"labels must lie in [0, {self.n_classes})")

    @property
    def input_dim(self) -> int:
        return self.source_train[0].shape[1]

    def target_train_labels_for_evaluation(self) -> np.ndarray:
        """Ground truth of the unlabeled target split. Never call from training code."""
        if self._target_train_labels is None:
            raise DataError("target train labels were not stored")
        return self._target_train_labels

    def splits(self) -> dict[str, tuple[str, np.ndarray, Optional[np.ndarray]]]:
        """Every split as ``name -> (domain, x, y)``; target train carries labels for evaluation."""
        return {
            "source_train": ("S", *self.source_train),
            "source_test": ("S", *self.source_test),
            "target_train": ("T", self.target_train_x, self._target_train_labels),
            "target_test": ("T", *self.target_test),
        }

    def map_features(self, fn) -> "DomainDataset":
        return DomainDataset(
            (fn(self.source_train[0]), self.source_train[1]),
            (fn(self.source_test[0]), self.source_test[1]),
            fn(self.target_train_x),
            (fn(self.target_test[0]), self.target_test[1]),
            self.n_classes,
            self._target_train_labels,
            dict(self.meta),
        )


def _blob_draw(rng, n_classes, n_per_class, dim):
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    means = np.zeros((n_classes, dim))
    means[:, 0] = CLUSTER_RADIUS * np.cos(angles)
    means[:, 1] = CLUSTER_RADIUS * np.sin(angles)
    y = np.repeat(np.arange(n_classes), n_per_class)
    x = means[y] + rng.normal(0.0, CLUSTER_SIGMA, size=(y.size, dim))
    return x, y


def gen_blobs(n_classes: int, n_per_class: int, dim: int, shift: ShiftSpec, seed: int,
              n_test_per_class: Optional[int] = None) -> DomainDataset:
    """K isotropic Gaussian clusters (sigma 0.5) on a radius-3 circle in the first two coordinates.

    The target domain is a fresh draw from the same distribution pushed
    through ``shift``; with the identity shift the domains are identical in
    distribution.
    """
    if n_classes < 2 or dim < 2 or n_per_class < 1:
        raise SpecError(f"degenerate blobs spec: K={n_classes}, dim={dim}, n={n_per_class}")
    n_test = n_per_class if n_test_per_class is None else n_test_per_class
    rng = make_rng(seed)
    s_tr = _blob_draw(rng, n_classes, n_per_class, dim)
    s_te = _blob_draw(rng, n_classes, n_test, dim)
    t_tr = _blob_draw(rng, n_classes, n_per_class, dim)
    t_te = _blob_draw(rng, n_classes, n_test, dim)
    t_tr = (shift.apply(t_tr[0], rng), t_tr[1])
    t_te = (shift.apply(t_te[0], rng), t_te[1])
    return DomainDataset(s_tr, s_te, t_tr[0], t_te, n_classes, t_tr[1],
                         meta={"generator": "blobs", "seed": seed})


MOONS_CENTER = (0.5, 0.25)


def _moons_draw(rng, n, noise):
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, size=n0)
    t1 = rng.uniform(0.0, np.pi, size=n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    if noise > 0:
        x = x + rng.normal(0.0, noise, size=x.shape)
    return x, y


def gen_two_moons(n: int, shift: ShiftSpec, seed: int, n_test: Optional[int] = None) -> DomainDataset:
    """Two interleaved unit half-circles (K=2).

    ``shift.noise_sigma`` jitters points in both domains; the target is then
    rotated about the moons' center, scaled and translated.
    """
    if n < 20:
        raise SpecError(f"two moons needs n >= 20, got {n}")
    n_test = n if n_test is None else n_test
    rng = make_rng(seed)
    geometric = ShiftSpec(shift.rotation, shift.translation, shift.scale, 0.0)
    s_tr = _moons_draw(rng, n, shift.noise_sigma)
    s_te = _moons_draw(rng, n_test, shift.noise_sigma)
    t_tr = _moons_draw(rng, n, shift.noise_sigma)
    t_te = _moons_draw(rng, n_test, shift.noise_sigma)
    t_tr = (geometric.apply(t_tr[0], rng, MOONS_CENTER), t_tr[1])
    t_te = (geometric.apply(t_te[0], rng, MOONS_CENTER), t_te[1])
    return DomainDataset(s_tr, s_te, t_tr[0], t_te, 2, t_tr[1],
                         meta={"generator": "moons", "seed": seed})


# -- IDX ----------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def parse_idx_images(raw: bytes) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"IDX image file too short for a magic number ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"bad IDX image magic {raw[:4].hex(' ')} (expected 00 00 08 03)")
    if len(raw) < 16:
        raise FormatError(f"IDX image header truncated: {len(raw)} of 16 bytes")
    n, rows, cols = struct.unpack(">III", raw[4:16])
    expected = 16 + n * rows * cols
    if len(raw) != expected:
        raise FormatError(f"IDX image payload length {len(raw)} != expected {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def parse_idx_labels(raw: bytes) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"IDX label file too short for a magic number ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"bad IDX label magic {raw[:4].hex(' ')} (expected 00 00 08 01)")
    if len(raw) < 8:
        raise FormatError(f"IDX label header truncated: {len(raw)} of 8 bytes")
    (n,) = struct.unpack(">I", raw[4:8])
    if len(raw) != 8 + n:
        raise FormatError(f"IDX label payload length {len(raw)} != expected {8 + n}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def average_pool(images: np.ndarray, size: int) -> np.ndarray:
    n, rows, cols = images.shape
    if size < 1 or rows % size or cols % size:
        raise SpecError(f"cannot average-pool {rows}x{cols} down to {size}x{size}")
    fr, fc = rows // size, cols // size
    return images.reshape(n, size, fr, size, fc).mean(axis=(2, 4))


def load_idx(images_path, labels_path, downsample_to: Optional[int] = None) -> tuple[Tensor, np.ndarray]:
    """Read an IDX image/label pair; pixels scaled to [0, 1] and flattened."""
    images = parse_idx_images(_read_bytes(images_path)).astype(np.float64) / 255.0
    labels = parse_idx_labels(_read_bytes(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if downsample_to is not None:
        images = average_pool(images, downsample_to)
    return Tensor(images.reshape(images.shape[0], -1)), labels


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels))
                                  + np.asarray(labels, dtype=np.uint8).tobytes())


def idx_dataset(source: dict, target: dict, downsample_to: Optional[int] = None,
                limit_source: Optional[int] = None, limit_target: Optional[int] = None,
                seed: int = 0, n_classes: int = 10) -> DomainDataset:
    """Build a domain pair from IDX files.

    ``source`` and ``target`` map ``"train"``/``"test"`` to ``(images, labels)``
    path pairs.  ``limit_*`` keeps a seeded random subset of each train split
    (e.g. 2000 source / 1800 target images).
    """
    rng = make_rng(seed)

    def load(paths, limit):
        x, y = load_idx(*paths, downsample_to=downsample_to)
        x = x.value
        if limit is not None and limit < len(y):
            keep = np.sort(rng.permutation(len(y))[:limit])
            x, y = x[keep], y[keep]
        return x, y

    s_tr = load(source["train"], limit_source)
    s_te = load(source["test"], None)
    t_tr = load(target["train"], limit_target)
    t_te = load(target["test"], None)
    if s_tr[0].shape[1] != t_tr[0].shape[1]:
        raise DataError(f"source width {s_tr[0].shape[1]} != target width {t_tr[0].shape[1]}; "
                        "use downsample_to to match image sizes")
    return DomainDataset(s_tr, s_te, t_tr[0], t_te, n_classes, t_tr[1], meta={"generator": "idx"})


# -- normalization --------------------------------------------------------------


def normalize(features, stats_from) -> np.ndarray:
    """Standardize columns with mean/std taken from ``stats_from``.

    Columns with zero spread in ``stats_from`` are left untouched.
    """
    x = np.asarray(getattr(features, "value", features), dtype=np.float64)
    ref = np.asarray(getattr(stats_from, "value", stats_from), dtype=np.float64)
    if x.shape[1] != ref.shape[1]:
        raise DataError(f"width {x.shape[1]} does not match statistics width {ref.shape[1]}")
    mu = ref.mean(axis=0)
    sd = ref.std(axis=0)
    live = sd > 0
    out = x.copy()
    out[:, live] = (x[:, live] - mu[live]) / sd[live]
    return out


def normalize_dataset(ds: DomainDataset) -> DomainDataset:
    """Standardize every split by source-train statistics."""
    ref = ds.source_train[0]
    return ds.map_features(lambda x: normalize(x, ref))


# -- batching -----------------------------------------------------------------


@dataclass
class Batch:
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray


class BatchIterator:
    """Lockstep source/target mini-batches.

    An epoch is one pass over the source train split (last partial batch
    kept).  The target split is consumed as an independent stream with its
    own permutation, reshuffled whenever it runs out, and each target batch
    matches the size of its source batch.
    """

    STREAM = 1

    def __init__(self, dataset: DomainDataset, batch_size: int, seed: int):
        if batch_size < 1:
            raise SpecError("batch size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = make_rng(seed, self.STREAM)
        self.epoch = 0
        self._source_order: Optional[np.ndarray] = None
        self._source_pos = 0
        self._target_order = np.empty(0, dtype=np.int64)
        self._target_pos = 0

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.dataset.source_train[1]) / self.batch_size)

    def _take_target(self, n: int) -> np.ndarray:
        out = []
        n_t = self.dataset.target_train_x.shape[0]
        while n > 0:
            if self._target_pos >= self._target_order.size:
                self._target_order = self.rng.permutation(n_t)
                self._target_pos = 0
            chunk = self._target_order[self._target_pos:self._target_pos + n]
            self._target_pos += chunk.size
            n -= chunk.size
            out.append(chunk)
        return np.concatenate(out)

    def next_batch(self) -> Optional[Batch]:
        """Next batch of the current epoch, or ``None`` once the epoch is exhausted."""
        if self._source_order is None:
            self._source_order = self.rng.permutation(len(self.dataset.source_train[1]))
            self._source_pos = 0
        if self._source_pos >= self._source_order.size:
            return None
        idx = self._source_order[self._source_pos:self._source_pos + self.batch_size]
        self._source_pos += idx.size
        xs, ys = self.dataset.source_train
        t_idx = self._take_target(idx.size)
        return Batch(xs[idx], ys[idx], self.dataset.target_train_x[t_idx])

    def reset(self) -> None:
        """Start the next epoch with a fresh source permutation."""
        self._source_order = None
        self.epoch += 1

    def __iter__(self) -> Iterator[Batch]:
        """Yield one full epoch, then advance the epoch counter."""
        while (batch := self.next_batch()) is not None:
            yield batch
        self.reset()


def next_batch(iterator: BatchIterator, dataset: DomainDataset) -> Optional[Batch]:
    if iterator.dataset is not dataset:
        raise DataError("iterator is bound to a different dataset")
    return iterator.next_batch()


# -- CSV export -----------------------------------------------------------------


def write_dataset_csv(ds: DomainDataset, directory) -> list[Path]:
    """One CSV per split with header ``f0..f{d-1},label,domain``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (domain, x, y) in ds.splits().items():
        path = directory / f"{name}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"f{j}" for j in range(x.shape[1])] + ["label", "domain"])
            for i in range(x.shape[0]):
                w.writerow([repr(float(v)) for v in x[i]] + [int(y[i]) if y is not None else -1, domain])
        written.append(path)
    return written


def class_histogram(labels: Sequence[int], n_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a dataset, so experiments can rebuild it per run."""

    kind: str = "blobs"
    n_classes: int = 3
    n_per_class: int = 300
    dim: int = 8
    shift: ShiftSpec = ShiftSpec()
    seed: int = 0
    n_test: Optional[int] = None
    normalize: bool = True
    idx: Optional[dict] = None  # for kind == "idx": source/target path pairs and options

    def build(self) -> DomainDataset:
        if self.kind == "blobs":
            ds = gen_blobs(self.n_classes, self.n_per_class, self.dim, self.shift, self.seed, self.n_test)
        elif self.kind == "moons":
            ds = gen_two_moons(self.n_per_class, self.shift, self.seed, self.n_test)
        elif self.kind == "idx":
            if not self.idx:
                raise SpecError("idx datasets need source/target paths")
            opts = dict(self.idx)
            ds = idx_dataset(opts.pop("source"), opts.pop("target"), seed=self.seed,
                             n_classes=self.n_classes, **opts)
        else:
            raise SpecError(f"unknown dataset kind {self.kind!r}")
        return normalize_dataset(ds) if self.normalize else ds

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("kind", "n_classes", "n_per_class", "dim", "seed",
                                            "n_test", "normalize", "idx")}
        d["shift"] = {"rotation": self.shift.rotation, "translation": list(self.shift.translation),
                      "scale": self.shift.scale, "noise_sigma": self.shift.noise_sigma}
        return d
