"""lipwords: a self-contained word-level visual speech recognition stack.

Everything is built on numpy: a taped reverse-mode autograd engine, the
layer vocabulary (1D/2D/3D convolution, batch norm, pooling, linear,
LSTM), the network variants N1-N7, staged SGD training, a synthetic
word-in-utterance corpus generator, and evaluation reports.
"""

from .tensor import (
    ConfigError,
    ContractError,
    DataError,
    LipwordsError,
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    backward,
)
from . import gradcheck, ops
from .networks import ModelConfig, build_variant, desk_config

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "ops",
    "gradcheck",
    "ModelConfig",
    "build_variant",
    "desk_config",
    "LipwordsError",
    "ShapeError",
    "ContractError",
    "NumericError",
    "ConfigError",
    "DataError",
]
