from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from .config import RunConfig, config_fingerprint
from .data import (
    Normalizer,
    TrafficSeries,
    WindowedDataset,
    chrono_split,
    fit_transform,
    load_traffic_csv,
    make_windows,
)
from .evaluation import MetricsReport, evaluate, persistence_baseline, predict
from .graph import AdjacencyProvider, Topology, build_provider
from .model import Checkpoint, ModelParams
from .train import TrainHistory, train

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
CHECKPOINT_FILE = "checkpoint.json"
HISTORY_FILE = "history.csv"
METRICS_FILE = "metrics.json"
BASELINE_FILE = "baseline.json"


@dataclass(frozen=True)
class PreparedData:
    """Normalized series, its windows and their chronological splits."""

    raw: TrafficSeries
    series: TrafficSeries
    normalizer: Normalizer
    windows: WindowedDataset
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset
    train_rows: int

    def split(self, name: str) -> WindowedDataset:
        if name not in SPLITS:
            raise ValueError(f"Unknown split '{name}'; expected one of {', '.join(SPLITS)}")
        return getattr(self, name)


@dataclass(frozen=True)
class RunResult:
    params: ModelParams
    history: TrainHistory
    report: MetricsReport
    baseline: MetricsReport
    checkpoint: Checkpoint


class Experiment:
    """
    One configured forecasting run over a traffic series.

    Wires data preparation, graph construction, training and evaluation
    together; every stage reads the same :class:`RunConfig`.
    """

    def __init__(
        self,
        config: RunConfig,
        series: TrafficSeries,
        topology: Optional[Topology] = None,
        normalizer: Optional[Normalizer] = None,
        static_adjacency: Optional[np.ndarray] = None,
    ) -> None:
        self.config = config
        self.raw = series
        self.topology = topology
        self._normalizer = normalizer
        self._static_adjacency = static_adjacency
        self._prepared: Optional[PreparedData] = None
        self._provider: Optional[AdjacencyProvider] = None

    def __str__(self) -> str:
        return (
            f"<Experiment nodes={self.raw.n_nodes} steps={self.raw.n_steps} "
            f"adjacency={self.config.graph.adjacency} temporal={self.config.model.temporal} "
            f"config={config_fingerprint(self.config)}>"
        )

    @classmethod
    def from_files(
        cls, config: RunConfig, data_path: Union[str, Path], topology_path: Optional[Union[str, Path]] = None
    ) -> "Experiment":
        topology = Topology.from_json(topology_path) if topology_path is not None else None
        if topology is None:
            raise ValueError("A topology file is required to name the series' nodes")
        return cls(config, load_traffic_csv(data_path, topology), topology)

    @classmethod
    def from_checkpoint(
        cls, checkpoint: Checkpoint, series: TrafficSeries, topology: Optional[Topology] = None
    ) -> "Experiment":
        """Rebuild the data pipeline exactly as the checkpoint's training run saw it."""
        if series.n_nodes != len(checkpoint.node_names):
            raise ValueError(
                f"Checkpoint was trained on {len(checkpoint.node_names)} nodes but the data has {series.n_nodes}"
            )
        return cls(checkpoint.config, series, topology, checkpoint.normalizer, checkpoint.adjacency)

    def prepare(self) -> PreparedData:
        """Normalize, window and split once; later calls reuse the result."""
        if self._prepared is None:
            dc = self.config.data
            if self._normalizer is None:
                series, normalizer = fit_transform(self.raw, dc.normalization, dc.split[0])
            else:
                normalizer = self._normalizer
                series = TrafficSeries(
                    self.raw.timestamps, normalizer.transform(self.raw.values), self.raw.node_names, "normalized"
                )
            windows = make_windows(series, dc.window, dc.horizon, dc.stride, dc.time_features)
            train_set, val_set, test_set = chrono_split(windows, dc.split, purge=dc.purge)
            train_rows = int(math.floor(dc.split[0] * series.n_steps + 1e-9))
            self._prepared = PreparedData(
                self.raw, series, normalizer, windows, train_set, val_set, test_set, train_rows
            )
        return self._prepared

    @property
    def provider(self) -> AdjacencyProvider:
        if self._provider is None:
            data = self.prepare()
            self._provider = build_provider(
                self.config.graph, self.topology, data.series, data.train_rows, self._static_adjacency
            )
            logger.info(f"Adjacency provider: {self._provider.method}")
            mc = self.config.model
            if self.config.graph.adjacency == "learnable" and mc.attention and mc.attention_all_layers:
                logger.warning(
                    "Attention replaces the graph in every GCN layer, so the learnable adjacency has no effect; "
                    "set model.attention_all_layers=false to keep it in the later layers"
                )
        return self._provider

    def train(self) -> Tuple[ModelParams, TrainHistory]:
        data = self.prepare()
        return train(data.train, data.val, self.config, self.provider, data.normalizer)

    def evaluate(self, params: ModelParams, split: str = "test") -> MetricsReport:
        data = self.prepare()
        return evaluate(
            params, data.split(split), data.normalizer, self.provider, self.config, split, self.config.eval.batch_size
        )

    def baseline(self, split: str = "test") -> MetricsReport:
        data = self.prepare()
        return persistence_baseline(data.split(split), data.normalizer, self.config, split)

    def predict(self, params: ModelParams, split: str = "test") -> Tuple[np.ndarray, np.ndarray]:
        """Original-unit forecasts (M, N, h) and each sample's first target timestamp."""
        data = self.prepare()
        dataset = data.split(split)
        pred = predict(params, dataset, data.normalizer, self.provider, self.config.eval.batch_size)
        return pred, dataset.target_timestamps()

    def checkpoint(self, params: ModelParams, history: Optional[TrainHistory] = None) -> Checkpoint:
        data = self.prepare()
        return Checkpoint(
            self.config,
            params,
            self.raw.node_names,
            data.normalizer,
            self.provider.static_matrix(),
            history.best_epoch if history is not None else None,
        )

    def run(self, out_dir: Optional[Union[str, Path]] = None) -> RunResult:
        """
        Train, evaluate on the configured split and optionally write artifacts.

        Artifacts: ``checkpoint.json``, ``history.csv``, ``metrics.json`` and
        ``baseline.json`` in ``out_dir``.
        """
        params, history = self.train()
        split = self.config.eval.split
        report = self.evaluate(params, split)
        baseline = self.baseline(split)
        checkpoint = self.checkpoint(params, history)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            checkpoint.save(out / CHECKPOINT_FILE)
            history.to_csv(out / HISTORY_FILE, self.config)
            report.to_json(out / METRICS_FILE, self.config)
            baseline.to_json(out / BASELINE_FILE, self.config)
        return RunResult(params, history, report, baseline, checkpoint)


def forecast_columns(node_names: Tuple[str, ...], horizon: int) -> Tuple[str, ...]:
    if horizon == 1:
        return tuple(node_names)
    return tuple(f"{name}+{k}" for name in node_names for k in range(1, horizon + 1))


def write_forecasts(
    path: Union[str, Path],
    timestamps: np.ndarray,
    forecasts: np.ndarray,
    node_names: Tuple[str, ...],
    config: Optional[RunConfig] = None,
) -> int:
    """Write one row per window: first target timestamp then each node's forecast(s)."""
    m, n, h = forecasts.shape
    with open(path, "w", newline="") as f:
        if config is not None:
            f.write(f"# run_config={config.to_json()}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["timestamp", *forecast_columns(node_names, h)])
        for ts, block in zip(timestamps, forecasts):
            writer.writerow([int(ts), *(repr(float(v)) for v in block.reshape(-1))])
    logger.info(f"Wrote {m} forecast rows to {path}")
    return m


def summarize(reports: Dict[str, MetricsReport]) -> str:
    """Plain-text metrics table."""
    lines = [f"{'model':<14}{'split':<8}{'MAE':>14}{'RMSE':>14}{'R2':>10}"]
    for name, r in reports.items():
        r2 = f"{r.r2:.4f}" if r.r2 is not None else "n/a"
        lines.append(f"{name:<14}{r.split:<8}{r.mae:>14.6g}{r.rmse:>14.6g}{r2:>10}")
    return "\n".join(lines)
