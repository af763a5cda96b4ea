"""Response selection with bi- and cross-encoders and logit distillation.

Everything runs on a small numpy autodiff engine (``kdrank.tensor``); the
LSTM recurrence, scatter-add, max-pool and Adam kernels are compiled with
numba unless ``KDRANK_DISABLE_NUMBA=1`` is set.
"""

from ._kernels import BACKEND
from .errors import (
    ConfigurationError, ContractError, DataError, DimensionError, DivergenceError,
    EmptySequenceError, KdrankError, UnsupportedHeadError, VocabularyError,
)
from .model import ModelConfig, RankingModel, build_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigurationError",
    "ContractError",
    "DataError",
    "DimensionError",
    "DivergenceError",
    "EmptySequenceError",
    "KdrankError",
    "ModelConfig",
    "RankingModel",
    "TrainConfig",
    "UnsupportedHeadError",
    "VocabularyError",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
