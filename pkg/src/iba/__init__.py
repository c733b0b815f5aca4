"""Attribution by restricting information flow through a noisy feature map.

A small reverse-mode autodiff on numpy (:mod:`iba.tensor`) drives a compact
CNN (:mod:`iba.network`), the per-sample and readout bottlenecks
(:mod:`iba.bottleneck`), reference attribution methods (:mod:`iba.baselines`)
and the evaluation metrics (:mod:`iba.evaluation`).
"""

from .bottleneck import (
    AlphaMask,
    BottleneckConfig,
    FeatureStats,
    Heatmap,
    ReadoutNet,
    beta_depth_sweep,
    bottleneck_forward,
    estimate_stats,
    information_loss,
    per_sample_attribution,
    readout_attribution,
    train_readout,
)
from .data import DatasetConfig, ShapesDataset
from .network import Model, build_default_model, forward_with_tap, load_model, randomize_from, save_model, train
from .tensor import ShapeError, Tensor

__all__ = [
    "AlphaMask",
    "BottleneckConfig",
    "FeatureStats",
    "Heatmap",
    "ReadoutNet",
    "beta_depth_sweep",
    "bottleneck_forward",
    "estimate_stats",
    "information_loss",
    "per_sample_attribution",
    "readout_attribution",
    "train_readout",
    "DatasetConfig",
    "ShapesDataset",
    "Model",
    "build_default_model",
    "forward_with_tap",
    "load_model",
    "randomize_from",
    "save_model",
    "train",
    "ShapeError",
    "Tensor",
]

__version__ = "0.1.0"
