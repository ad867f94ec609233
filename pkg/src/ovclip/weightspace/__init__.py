from .checkpoint import Checkpoint, SwaState, final_patch, interpolate, mean_checkpoint, swa_update
from .ckptio import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .training import (
    IwrConfig,
    TrainData,
    batch_loss,
    batch_order,
    iwr_gradient,
    lr_at,
    sample_alpha,
    steps_per_epoch,
    train,
)

__all__ = [
    "Checkpoint", "SwaState", "final_patch", "interpolate", "mean_checkpoint", "swa_update",
    "decode_checkpoint", "encode_checkpoint", "load_checkpoint", "save_checkpoint",
    "IwrConfig", "TrainData", "batch_loss", "batch_order", "iwr_gradient", "lr_at",
    "sample_alpha", "steps_per_epoch", "train",
]
