"""Weakly supervised contrastive adversarial training on small models."""

__version__ = "0.1.0"

from .attacks import AttackSpec
from .core import Classifier, build_classifier, load_checkpoint, save_checkpoint
from .data import AugmentedDataset, SemiDataset, SyntheticRnRConfig, make_synthetic_rnr
from .estimators import WSCATClassifier
from .exceptions import (AttackError, ConfigError, ContractError, FormatError, NumericalError,
                         OracleAccessError, TrainingDivergence, WSCATError)
from .metrics import accuracy, harmonic_mean, robust_accuracy
from .trainer import TrainConfig, fit, train_standard, train_trades, train_variant, train_wscat

__all__ = [
    "AttackSpec", "AttackError", "AugmentedDataset", "Classifier", "ConfigError", "ContractError",
    "FormatError", "NumericalError", "OracleAccessError", "SemiDataset", "SyntheticRnRConfig", "TrainConfig",
    "TrainingDivergence", "WSCATClassifier", "WSCATError", "accuracy", "build_classifier", "fit",
    "harmonic_mean", "load_checkpoint", "make_synthetic_rnr", "robust_accuracy", "save_checkpoint",
    "train_standard", "train_trades", "train_variant", "train_wscat",
]
