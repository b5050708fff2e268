"""TOML experiment configs and the calibrated blobs preset.

A config file has two optional tables::

    [dataset]
    kind = "blobs"
    n_classes = 3
    n_per_class = 300
    dim = 8
    seed = 0
    [dataset.shift]
    rotation = 0.6
    translation = [1.5, 0.0]

    [train]
    max_epochs = 90
    disc_hidden = [16, 16]
    schedule = [[0, 10.0, 0.001, 0.0], [30, 10.0, 0.002, 0.002], [60, 10.0, 0.02, 0.02]]

Any ``TrainConfig`` field may appear under ``[train]``; ``schedule`` also
accepts the names ``"digits"`` and ``"office"``.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import DatasetSpec, ShiftSpec
from .errors import ConfigError, DialError
from .trainer import DIGITS_SCHEDULE, OFFICE_SCHEDULE, TrainConfig

SCHEDULES = {"digits": DIGITS_SCHEDULE, "office": OFFICE_SCHEDULE}

# The rotated-blobs domain shift used by the adaptation experiments.
BLOBS_DATASET = DatasetSpec(kind="blobs", n_classes=3, n_per_class=300, dim=8,
                            shift=ShiftSpec(rotation=0.6, translation=(1.5, 0.0)), seed=0)

# Discriminator and encoder widths were chosen on seeds 1-5 only; experiments
# that report results on this preset use a disjoint seed list.
BLOBS_TRAIN = TrainConfig(max_epochs=90, disc_hidden=(16, 16), encoder_hidden=(32,))
CALIBRATION_SEEDS = (1, 2, 3, 4, 5)


def _dataset_from(table: dict) -> DatasetSpec:
    table = dict(table)
    known = {f.name for f in dataclasses.fields(DatasetSpec)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
    if "shift" in table:
        shift = table["shift"]
        if not isinstance(shift, dict):
            raise ConfigError("dataset.shift must be a table")
        try:
            table["shift"] = ShiftSpec(**shift)
        except TypeError as exc:
            raise ConfigError(f"bad dataset.shift: {exc}") from None
    return DatasetSpec(**table)


def _train_from(table: dict, base: TrainConfig) -> TrainConfig:
    table = dict(table)
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"unknown train keys: {sorted(unknown)}")
    sched = table.get("schedule")
    if isinstance(sched, str):
        if sched not in SCHEDULES:
            raise ConfigError(f"unknown schedule {sched!r}; choose from {sorted(SCHEDULES)}")
        table["schedule"] = SCHEDULES[sched]
    elif sched is not None:
        if not all(isinstance(row, list) and len(row) == 4 for row in sched):
            raise ConfigError("schedule rows must be [epoch_start, alpha, beta1, beta2]")
    try:
        return dataclasses.replace(base, **table)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DialError):
            raise
        raise ConfigError(f"bad train config: {exc}") from None


def parse_config(text: str, preset: bool = True) -> tuple[DatasetSpec, TrainConfig]:
    """Parse TOML text; missing keys fall back to the blobs preset (or library defaults)."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    unknown = set(doc) - {"dataset", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    base_ds = BLOBS_DATASET if preset else DatasetSpec()
    base_tr = BLOBS_TRAIN if preset else TrainConfig()
    ds_table = doc.get("dataset")
    if ds_table is None:
        ds = base_ds
    else:
        merged = {**_dataset_fields(base_ds), **ds_table}
        if isinstance(ds_table.get("shift"), dict):
            merged["shift"] = {**dataclasses.asdict(base_ds.shift), **ds_table["shift"]}
        ds = _dataset_from(merged)
    return ds, _train_from(doc.get("train", {}), base_tr)


def _dataset_fields(spec: DatasetSpec) -> dict:
    d = {f.name: getattr(spec, f.name) for f in dataclasses.fields(DatasetSpec)}
    d["shift"] = dataclasses.asdict(spec.shift)
    return d


def load_config(path: Optional[Path]) -> tuple[DatasetSpec, TrainConfig]:
    if path is None:
        return BLOBS_DATASET, BLOBS_TRAIN
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
