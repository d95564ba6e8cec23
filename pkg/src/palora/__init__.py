"""Sparse low-rank adapter fine-tuning at desk scale.

Frozen MLP base models, LoRA adapters with row/column masks, importance-driven
sparsity derivation, a masked fine-tuning loop and a lottery-ticket width check.
"""

from .adapters import LoraAdapter, MaskPair, ElementMask, init_adapter, masked_delta, sample_mask_pair
from .linalg import TruncatedSvd, leverage_scores, truncated_svd
from .model import BaseModel, TaskSpec, accuracy, forward, pretrain
from .sparsity import SparsityProfile, derive_profile
from .training import TrainConfig, train_adapters

__version__ = "0.1.0"

__all__ = [
    "BaseModel", "ElementMask", "LoraAdapter", "MaskPair", "SparsityProfile", "TaskSpec", "TrainConfig",
    "TruncatedSvd", "accuracy", "derive_profile", "forward", "init_adapter", "leverage_scores", "masked_delta",
    "pretrain", "sample_mask_pair", "train_adapters", "truncated_svd",
]
