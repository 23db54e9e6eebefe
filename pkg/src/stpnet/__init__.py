"""Text-prompted lesion segmentation on a small numpy autodiff engine."""
from .blocks import StpnetConfig, StpnetModel, build_model, stpnet_forward
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import (
    ContractViolation,
    IntegrityError,
    InvalidArgumentError,
    NumericError,
    StpnetError,
    VersionError,
)
from .estimator import STPNetSegmenter
from .synthgen import GenConfig, derive_text_labels, generate_sample, generate_split
from .textbank import EncodedBank, TextBank, build_text_bank
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ContractViolation",
    "EncodedBank",
    "GenConfig",
    "IntegrityError",
    "InvalidArgumentError",
    "NumericError",
    "RunConfig",
    "STPNetSegmenter",
    "StpnetConfig",
    "StpnetError",
    "StpnetModel",
    "TextBank",
    "TrainConfig",
    "VersionError",
    "build_model",
    "build_text_bank",
    "derive_text_labels",
    "evaluate",
    "generate_sample",
    "generate_split",
    "load_checkpoint",
    "save_checkpoint",
    "stpnet_forward",
    "train",
]
