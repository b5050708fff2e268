"""Adversarial domain adaptation with class-center alignment, on a small numpy autodiff."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor
from .config import BLOBS_DATASET, BLOBS_TRAIN, load_config, parse_config
from .data import DatasetSpec, DomainDataset, ShiftSpec, gen_blobs, gen_two_moons, load_idx
from .errors import DialError
from .evaluate import evaluate, export_embeddings, run_ablation, source_retention
from .losses import CenterTable, LossWeights, filter_target, update_centers
from .models import ModelSpec, init_params, predict
from .trainer import TrainConfig, Variant, resume, train

__all__ = [
    "BLOBS_DATASET", "BLOBS_TRAIN", "CenterTable", "DatasetSpec", "DialError", "DomainDataset",
    "LossWeights", "ModelSpec", "ShiftSpec", "Tape", "Tensor", "TrainConfig", "Variant",
    "evaluate", "export_embeddings", "filter_target", "gen_blobs", "gen_two_moons", "init_params",
    "load_config", "load_idx", "parse_config", "predict", "resume", "run_ablation",
    "source_retention", "train", "update_centers",
]
