"""Structured GRU traffic forecasting on a small numpy autodiff core."""

__version__ = "0.1.0"

from .data import TrafficSeries, WindowedDataset, generate_synthetic, load_csv, make_windows
from .metrics import MetricsReport, compute_metrics
from .model import Checkpoint, ModelDims, SgruParams, Variant, init_params, sgru_forward
from .training import TrainConfig, evaluate, train

__all__ = [
    "Checkpoint", "MetricsReport", "ModelDims", "SgruParams", "TrafficSeries", "TrainConfig",
    "Variant", "WindowedDataset", "compute_metrics", "evaluate", "generate_synthetic",
    "init_params", "load_csv", "make_windows", "sgru_forward", "train",
]
