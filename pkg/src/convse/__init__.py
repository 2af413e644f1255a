"""Contrastive visual-semantic embeddings on precomputed features."""

from .errors import ConvseError
from .losses import LossConfig, LossKind, compute_loss, similarity_matrix
from .model import EmbeddingNetwork, NetworkConfig, init_network

__version__ = "0.1.0"

__all__ = [
    "ConvseError",
    "EmbeddingNetwork",
    "LossConfig",
    "LossKind",
    "NetworkConfig",
    "compute_loss",
    "init_network",
    "similarity_matrix",
]
