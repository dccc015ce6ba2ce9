"""Multi-degradation image restoration with decoupled degradation features
and sparsely gated decoding."""

from .degradation import COMBOS, DegradationSpec, compose_degradations, make_test_suite
from .losses import LossWeights, total_loss
from .metrics import evaluate_suite, psnr, ssim
from .network import IMDNet, ModelConfig
from .train import TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "COMBOS",
    "DegradationSpec",
    "IMDNet",
    "LossWeights",
    "ModelConfig",
    "TrainConfig",
    "Trainer",
    "compose_degradations",
    "evaluate_suite",
    "make_test_suite",
    "psnr",
    "ssim",
    "total_loss",
    "train",
]
