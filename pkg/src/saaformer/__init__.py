"""Axial aggregation transformer for hyperspectral patch classification, built on a small numpy autodiff core."""

__version__ = "0.1.0"

from .dataflow import HsiCube, SplitSpec, block_split, generate_synthetic, overlap_rate, random_split
from .metrics import ConfusionMatrix, aa, kappa, oa
from .model import SaaFormerConfig, SaaFormerParams, TrainConfig, forward, init_params, predict_map, train

__all__ = [
    "ConfusionMatrix",
    "HsiCube",
    "SaaFormerConfig",
    "SaaFormerParams",
    "SplitSpec",
    "TrainConfig",
    "aa",
    "block_split",
    "forward",
    "generate_synthetic",
    "init_params",
    "kappa",
    "oa",
    "overlap_rate",
    "predict_map",
    "random_split",
    "train",
]
