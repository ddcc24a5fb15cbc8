"""Rimer: an RWKV-7 style patch forecaster on a small numpy autodiff core."""

from .data import SeriesDataset, WindowSpec, load_csv, make_windows, split_normalize
from .deq import DeqConfig
from .model import RimerConfig, RimerModel, build_model, forward, param_count, predict
from .train_eval import Metrics, TrainOpts, evaluate, train

__all__ = [
    "DeqConfig",
    "Metrics",
    "RimerConfig",
    "RimerModel",
    "SeriesDataset",
    "TrainOpts",
    "WindowSpec",
    "build_model",
    "evaluate",
    "forward",
    "load_csv",
    "make_windows",
    "param_count",
    "predict",
    "split_normalize",
    "train",
]

__version__ = "0.1.0"
