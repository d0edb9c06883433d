"""Selective pseudo-labeling for semi-supervised domain adaptation at desk scale."""

from .config import METHODS, DataConfig, ExperimentSpec, RunConfig
from .datagen import DatasetBundle, kshot_split, load_bundle, make_shifted_blobs, save_bundle
from .model import Model, init_model
from .training import (
    RunResult, evaluate, pretrain_base, run, run_tml_dqnpl, run_tml_spl, train_baseline,
)

__version__ = "0.1.0"

__all__ = [
    "METHODS", "DataConfig", "DatasetBundle", "ExperimentSpec", "Model", "RunConfig", "RunResult",
    "evaluate", "init_model", "kshot_split", "load_bundle", "make_shifted_blobs", "pretrain_base",
    "run", "run_tml_dqnpl", "run_tml_spl", "save_bundle", "train_baseline",
]
