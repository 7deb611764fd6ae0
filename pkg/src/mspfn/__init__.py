"""Multi-scale progressive fusion deraining on a small numpy autodiff core."""

from .losses import LossConfig, charbonnier, edge_loss, psnr, ssim, total_loss
from .model import (
    VARIANTS,
    ModelConfig,
    ParamStore,
    Variant,
    init_params,
    make_variant,
    mspfn_forward,
    param_count,
)
from .tensor import ShapeError, Tensor, conv2d, conv2d_transpose, no_grad
from .train import TrainConfig, load_checkpoint, lr_schedule, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "VARIANTS",
    "LossConfig",
    "ModelConfig",
    "ParamStore",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "Variant",
    "charbonnier",
    "conv2d",
    "conv2d_transpose",
    "edge_loss",
    "init_params",
    "load_checkpoint",
    "lr_schedule",
    "make_variant",
    "mspfn_forward",
    "no_grad",
    "param_count",
    "psnr",
    "save_checkpoint",
    "ssim",
    "total_loss",
    "train",
]
