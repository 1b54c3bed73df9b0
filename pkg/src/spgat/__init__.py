"""Structural-prior guided generative adversarial transformer for low-light enhancement."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericalError, ShapeError
from .losses import loss_adv_disc, loss_adv_gen, loss_image, loss_structure, psnr, ssim
from .models import ABLATIONS, SPGAT, ModelConfig, ablation_config, extract_structure
from .tensor import Tape, Tensor, backward, finite_diff_check, no_grad
from .training import TrainConfig, Trainer, lr_at

__all__ = [
    "ABLATIONS", "ConfigError", "DataError", "ModelConfig", "NumericalError", "SPGAT",
    "ShapeError", "Tape", "Tensor", "TrainConfig", "Trainer", "ablation_config", "backward",
    "extract_structure", "finite_diff_check", "loss_adv_disc", "loss_adv_gen", "loss_image",
    "loss_structure", "lr_at", "no_grad", "psnr", "ssim",
]
