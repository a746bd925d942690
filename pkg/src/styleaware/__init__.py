"""Style transfer with a style-aware content loss, trained from scratch."""

__version__ = "0.1.0"

from .model import NetworkSpec, StyleTransferNetworks, encode, decode, stylize, discriminate, transform
from .training import TrainConfig, train, load_stylizer
from .grouping import EmbeddingIndex, StyleSet, build_style_set, quantile_threshold
from .evaluation import deception_rate, evaluate_suite

__all__ = [
    "NetworkSpec", "StyleTransferNetworks", "encode", "decode", "stylize", "discriminate",
    "transform", "TrainConfig", "train", "load_stylizer", "EmbeddingIndex", "StyleSet",
    "build_style_set", "quantile_threshold", "deception_rate", "evaluate_suite",
]
