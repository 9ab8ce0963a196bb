"""Counting impulse events in accelerometer recordings from per-recording counts only."""

from .model import ConvBlock, ModelParameters, NetworkConfig, forward, init_params, load_model, save_model
from .preprocess import MetricConfig, compute_metric, extract_candidates
from .signal import Dataset, TimeSeries, WeakLabel, build_benchmark, load_dataset, save_dataset, split_dataset

__version__ = "0.1.0"

__all__ = [
    "ConvBlock", "ModelParameters", "NetworkConfig", "forward", "init_params", "load_model", "save_model",
    "MetricConfig", "compute_metric", "extract_candidates", "Dataset", "TimeSeries", "WeakLabel",
    "build_benchmark", "load_dataset", "save_dataset", "split_dataset",
]
