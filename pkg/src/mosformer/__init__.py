"""2.5D medical volume segmentation with cross-slice window attention and a momentum-updated neighbour encoder."""

from .config import RunConfig, desk_preset, paper_preset
from .data import Case, PhantomSpec, generate_phantoms, load_cases, read_volume, write_volume
from .estimator import MOSformerSegmenter
from .exceptions import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    InputError,
    MosformerError,
    TrainingDiverged,
)
from .losses import LossWeights, deep_supervision_loss
from .metrics import MetricReport, dsc, hd95
from .model import MOSformer, ModelConfig, predict_volume
from .training import evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Case",
    "ConfigError",
    "DataError",
    "DimensionError",
    "FormatError",
    "InputError",
    "LossWeights",
    "MOSformer",
    "MOSformerSegmenter",
    "MetricReport",
    "ModelConfig",
    "MosformerError",
    "PhantomSpec",
    "RunConfig",
    "TrainingDiverged",
    "deep_supervision_loss",
    "desk_preset",
    "dsc",
    "evaluate",
    "generate_phantoms",
    "hd95",
    "load_cases",
    "paper_preset",
    "predict_volume",
    "read_volume",
    "train",
    "write_volume",
]
