"""Test-time prompt-mixture defense for a toy dual-encoder classifier."""

from .autodiff import Tensor, backward, finite_difference_check, no_grad
from .data import CLASS_NAMES, DOWNSTREAM_CLASSES, PUBLIC_CLASSES, generate_dataset
from .engine import (
    DefenseConfig,
    DefenseEngine,
    LayerStatistics,
    ReferenceStatistics,
    SinglePrompt,
    build_bank,
    precompute_references,
    pretrain_prompt,
)
from .model import DualEncoder, ModelConfig, train_backbone
from .moe import PromptBank, Router

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "finite_difference_check", "no_grad",
    "CLASS_NAMES", "PUBLIC_CLASSES", "DOWNSTREAM_CLASSES", "generate_dataset",
    "DefenseConfig", "DefenseEngine", "LayerStatistics", "ReferenceStatistics",
    "SinglePrompt", "build_bank", "precompute_references", "pretrain_prompt",
    "DualEncoder", "ModelConfig", "train_backbone",
    "PromptBank", "Router",
    "__version__",
]
