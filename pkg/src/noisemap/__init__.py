"""Plantation mapping from noisy labels."""

from importlib.metadata import PackageNotFoundError, version
from .config import PipelineConfig
from .errors import NoisemapError
from .evaluation import EvalReport, confusion_at_points, metrics
from .fusion import SensorModel, fuse
from .loss import dmi_loss, joint_matrix
from .model import UNet, UNetConfig
from .raster import Raster, read_raster, write_raster
from .trainer import TrainConfig, predict_map, train
from .transitions import TransitionMatrix, transition_matrix

try:
    __version__ = version("noisemap")
except PackageNotFoundError:
    __version__ = "0.0.0"

__all__ = [
    "__version__",
    "EvalReport",
    "NoisemapError",
    "PipelineConfig",
    "Raster",
    "SensorModel",
    "TrainConfig",
    "TransitionMatrix",
    "UNet",
    "UNetConfig",
    "confusion_at_points",
    "dmi_loss",
    "fuse",
    "joint_matrix",
    "metrics",
    "predict_map",
    "read_raster",
    "train",
    "transition_matrix",
    "write_raster",
]
