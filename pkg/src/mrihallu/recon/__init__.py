"""Classical and learned reconstruction maps."""

from .checkpoint import load_checkpoint, save_checkpoint
from .models import VARIANTS, ReconModel, TVRecon, UNetLite, VarNetLite, ZeroFill, build_model
from .train import TrainConfig, TrainingDiverged, stack_batch, train
from .tv import TVInfo, tv_reconstruct

__all__ = [
    "VARIANTS", "ReconModel", "TVRecon", "UNetLite", "VarNetLite", "ZeroFill", "build_model",
    "TrainConfig", "TrainingDiverged", "stack_batch", "train", "TVInfo", "tv_reconstruct",
    "load_checkpoint", "save_checkpoint",
]
