"""Metrics in original units, the persistence floor, and the ablation grid."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .config import RunConfig, config_delta, config_fingerprint, with_overrides
from .data import Normalizer, WindowedDataset
from .diffcore import DimensionError
from .graph import AdjacencyProvider
from .model import ModelParams, predict_batches

if TYPE_CHECKING:
    from .data import TrafficSeries
    from .graph import Topology

logger = logging.getLogger(__name__)

ABLATION_AXES: Dict[str, Tuple[Any, ...]] = {
    "adjacency": ("distance", "correlation", "knn", "adaptive", "learnable"),
    "temporal": ("gru", "lstm"),
    "attention": ("off", "on"),
    "gcn_layers": (1, 2, 3),
}
GRID_COLUMNS = ("delta", "mae", "rmse", "r2", "seed")


class R2UndefinedError(ValueError):
    """Raised when the truth has zero variance, leaving R² undefined."""

    pass


class AblationAxisError(ValueError):
    """Raised for unknown ablation axes or values."""

    pass


def _pair(pred: Any, truth: Any) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"prediction shape {p.shape} does not match truth shape {t.shape}")
    if p.size == 0:
        raise ValueError("metrics need at least one element")
    return p, t


def mae(pred: Any, truth: Any) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def rmse(pred: Any, truth: Any) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def r2(pred: Any, truth: Any) -> float:
    """
    Coefficient of determination ``1 - SS_res / SS_tot`` about the truth mean.

    Raises:
        R2UndefinedError: Fewer than 2 elements or constant truth.
    """
    p, t = _pair(pred, truth)
    if t.size < 2:
        raise R2UndefinedError("R² needs at least 2 elements")
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise R2UndefinedError("R² is undefined for a constant truth series")
    return 1.0 - float(np.sum((p - t) ** 2)) / ss_tot


@dataclass(frozen=True)
class MetricsReport:
    """MAE, RMSE and R² over every (sample, node, horizon) element, in original units."""

    mae: float
    rmse: float
    r2: Optional[float]
    config_fingerprint: str
    seed: int
    n_samples: int
    split: str = "test"
    model: str = "model"
    units: str = "original"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self, path: Optional[Union[str, Path]] = None, config: Optional[RunConfig] = None) -> str:
        """Serialize (optionally embedding the full run config) and write to ``path`` when given."""
        payload = self.to_dict()
        if config is not None:
            payload["config"] = json.loads(config.to_json())
        text = json.dumps(payload, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
            logger.info(f"Wrote {self.split} metrics to {path}")
        return text

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "MetricsReport":
        fields = {k: payload[k] for k in cls.__dataclass_fields__ if k in payload}
        return cls(**fields)


def evaluate_predictions(
    pred: np.ndarray,
    truth: np.ndarray,
    fingerprint: str = "",
    seed: int = 0,
    split: str = "test",
    model: str = "model",
) -> MetricsReport:
    """Pool every element of ``pred``/``truth`` (first axis = samples) into one report."""
    p, t = _pair(pred, truth)
    try:
        score: Optional[float] = r2(p, t)
    except R2UndefinedError as e:
        logger.warning(f"{split} {model}: {e}")
        score = None
    return MetricsReport(
        mae=mae(p, t),
        rmse=rmse(p, t),
        r2=score,
        config_fingerprint=fingerprint,
        seed=seed,
        n_samples=int(p.shape[0]) if p.ndim else 1,
        split=split,
        model=model,
    )


def persistence_forecast(dataset: WindowedDataset) -> np.ndarray:
    """Repeat each window's last observed traffic value over the horizon: (M, N, h)."""
    last = dataset.inputs[:, -1, :, 0]
    return np.repeat(last[:, :, None], dataset.horizon, axis=2)


def persistence_baseline(
    dataset: WindowedDataset,
    normalizer: Optional[Normalizer] = None,
    config: Optional[RunConfig] = None,
    split: str = "test",
) -> MetricsReport:
    """Metrics of the last-value forecaster, in original units when a normalizer is given."""
    pred = persistence_forecast(dataset)
    truth = dataset.targets
    if normalizer is not None:
        pred = normalizer.inverse(pred, node_axis=1)
        truth = normalizer.inverse(truth, node_axis=1)
    return evaluate_predictions(
        pred,
        truth,
        fingerprint=config_fingerprint(config) if config is not None else "",
        seed=config.seed if config is not None else 0,
        split=split,
        model="persistence",
    )


def predict(
    params: ModelParams,
    dataset: WindowedDataset,
    normalizer: Normalizer,
    provider: AdjacencyProvider,
    batch_size: int = 64,
) -> np.ndarray:
    """Forecasts in original units, shape (M, N, horizon)."""
    pred = predict_batches(params, provider, dataset.inputs, dataset.input_end_rows(), batch_size)
    return normalizer.inverse(pred, node_axis=1)


def evaluate(
    params: ModelParams,
    dataset: WindowedDataset,
    normalizer: Normalizer,
    provider: AdjacencyProvider,
    config: Optional[RunConfig] = None,
    split: str = "test",
    batch_size: int = 64,
) -> MetricsReport:
    """
    Forecast every sample, map back to original units and pool all elements.

    Raises:
        ValueError: Empty dataset.
    """
    if len(dataset) == 0:
        raise ValueError(f"Cannot evaluate an empty {split} split")
    pred = predict(params, dataset, normalizer, provider, batch_size)
    truth = normalizer.inverse(dataset.targets, node_axis=1)
    report = evaluate_predictions(
        pred,
        truth,
        fingerprint=config_fingerprint(config) if config is not None else "",
        seed=config.seed if config is not None else 0,
        split=split,
    )
    logger.info(f"{split}: mae={report.mae:.6g} rmse={report.rmse:.6g} r2={report.r2}")
    return report


def parse_axes(text: Union[str, Sequence[str]]) -> Dict[str, Tuple[Any, ...]]:
    """
    Parse ``adjacency,temporal`` (full value ranges) or ``gcn_layers=1|2`` (explicit values).

    Raises:
        AblationAxisError: Unknown axis or value.
    """
    items = [s.strip() for s in text.split(",")] if isinstance(text, str) else [s.strip() for s in text]
    axes: Dict[str, Tuple[Any, ...]] = {}
    for item in filter(None, items):
        name, _, values = item.partition("=")
        name = name.strip()
        if name not in ABLATION_AXES:
            raise AblationAxisError(f"Unknown ablation axis '{name}'; expected one of {', '.join(ABLATION_AXES)}")
        allowed = ABLATION_AXES[name]
        if not values:
            axes[name] = allowed
            continue
        chosen: List[Any] = []
        for raw in values.split("|"):
            raw = raw.strip()
            value: Any = int(raw) if name == "gcn_layers" and raw.isdigit() else raw
            if name == "gcn_layers" and isinstance(value, int) and value >= 1:
                chosen.append(value)
            elif value in allowed:
                chosen.append(value)
            else:
                raise AblationAxisError(f"Axis '{name}' has no value '{raw}'")
        axes[name] = tuple(chosen)
    if not axes:
        raise AblationAxisError("No ablation axes given")
    return axes


def _cell_overrides(base: RunConfig, axis: str, value: Any) -> Dict[str, Any]:
    if axis == "adjacency":
        return {"graph.adjacency": value}
    if axis == "temporal":
        return {"model.temporal": value}
    if axis == "attention":
        return {"model.attention": value == "on"}
    width = base.model.gcn_hidden[0]
    return {"model.gcn_hidden": [width] * int(value)}


def _describe(axis: str, value: Any) -> str:
    return f"{axis}={value}"


@dataclass(frozen=True)
class AblationCell:
    index: int
    delta: str
    overrides: Dict[str, Any]
    report: Optional[MetricsReport]
    status: str = "ok"
    error: str = ""

    @property
    def mae(self) -> float:
        return self.report.mae if self.report is not None else float("nan")


@dataclass
class AblationGrid:
    """Cells trained on identical data and seed, differing only in their declared delta."""

    base: RunConfig
    cells: List[AblationCell] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cells)

    def sorted_cells(self) -> List[AblationCell]:
        """By MAE ascending; failed cells last; ties by cell index."""
        return sorted(self.cells, key=lambda c: (math.isnan(c.mae), c.mae if not math.isnan(c.mae) else 0.0, c.index))

    def best(self) -> Optional[AblationCell]:
        ok = [c for c in self.sorted_cells() if c.report is not None]
        return ok[0] if ok else None

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as f:
            f.write(f"# run_config={self.base.to_json()}\n")
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(GRID_COLUMNS)
            for cell in self.sorted_cells():
                r = cell.report
                writer.writerow(
                    [
                        cell.delta,
                        repr(r.mae) if r else "nan",
                        repr(r.rmse) if r else "nan",
                        repr(r.r2) if r and r.r2 is not None else "nan",
                        self.base.seed,
                    ]
                )
        logger.info(f"Wrote ablation grid with {len(self.cells)} cells to {path}")


def run_ablation(
    base: RunConfig,
    axes: Union[str, Sequence[str], Mapping[str, Sequence[Any]]],
    series: "TrafficSeries",
    topology: Optional["Topology"] = None,
    progress: bool = False,
) -> AblationGrid:
    """
    Train and evaluate every combination of the given axis values.

    Every cell uses the base data, splits and seed. A cell that diverges is
    recorded with its error and the grid still completes.
    """
    from .experiment import Experiment
    from .train import TrainingDivergedError

    parsed = dict(axes) if isinstance(axes, Mapping) else parse_axes(axes)
    names = list(parsed)
    combos = list(itertools.product(*(parsed[n] for n in names)))
    grid = AblationGrid(base)
    logger.info(f"Ablation over {', '.join(names)}: {len(combos)} cells")
    for index, combo in enumerate(tqdm(combos, desc="cells", disable=not progress)):
        overrides: Dict[str, Any] = {}
        for axis, value in zip(names, combo):
            overrides.update(_cell_overrides(base, axis, value))
        delta = ";".join(_describe(a, v) for a, v in zip(names, combo))
        config = with_overrides(base, overrides)
        undeclared = sorted(set(config_delta(base, config)) - set(overrides))
        if undeclared:
            raise AblationAxisError(f"Cell {delta} changed undeclared settings: {', '.join(undeclared)}")
        try:
            report = Experiment(config, series, topology).run().report
            grid.cells.append(AblationCell(index, delta, overrides, report))
            logger.info(f"cell {delta}: mae={report.mae:.6g} r2={report.r2}")
        except TrainingDivergedError as e:
            logger.warning(f"cell {delta} diverged: {e}")
            grid.cells.append(AblationCell(index, delta, overrides, None, status="diverged", error=str(e)))
    return grid
