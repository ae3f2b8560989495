"""Two-encoder / one-decoder GAN for facial expression transfer, editing and recognition."""

from ._validation import (ConfigurationError, DivergenceError, IntegrityError, NotTrainedError,
                          TerganError, ValidationError)
from .estimator import TERGAN, ExpressionRecognizer
from .losses import LossReport, LossWeights
from .networks import NetworkSpec, TERNetworks, build_networks, gradient_reverse
from .trainer import (OptimizerConfig, StageBudgets, TrainState, load_checkpoint,
                      save_checkpoint)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "DivergenceError", "IntegrityError", "NotTrainedError", "TerganError",
    "ValidationError", "TERGAN", "ExpressionRecognizer", "LossReport", "LossWeights", "NetworkSpec", "TERNetworks",
    "build_networks", "gradient_reverse", "OptimizerConfig", "StageBudgets", "TrainState",
    "load_checkpoint", "save_checkpoint",
]
