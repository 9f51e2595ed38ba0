"""
Graph-convolutional recurrent forecasting of network traffic.
"""

import importlib.metadata

try:
    __version__ = importlib.metadata.version("netforecast")
except importlib.metadata.PackageNotFoundError:
    # running from a source checkout (PYTHONPATH=src)
    __version__ = "0.0.0"

from .config import RunConfig, load_config
from .data import (
    TrafficSeries,
    WindowedDataset,
    chrono_split,
    fit_transform,
    generate_synthetic,
    load_traffic_csv,
    make_windows,
)
from .diffcore import Tape, Tensor, backward
from .evaluation import AblationGrid, MetricsReport, evaluate, persistence_baseline, run_ablation
from .experiment import Experiment
from .graph import Topology, normalize
from .model import Checkpoint, ModelParams, forward
from .train import TrainingDivergedError, train

__all__ = [
    "Experiment",
    "RunConfig",
    "load_config",
    "Topology",
    "normalize",
    "TrafficSeries",
    "WindowedDataset",
    "load_traffic_csv",
    "fit_transform",
    "make_windows",
    "chrono_split",
    "generate_synthetic",
    "Tape",
    "Tensor",
    "backward",
    "ModelParams",
    "Checkpoint",
    "forward",
    "train",
    "TrainingDivergedError",
    "evaluate",
    "persistence_baseline",
    "run_ablation",
    "MetricsReport",
    "AblationGrid",
]
