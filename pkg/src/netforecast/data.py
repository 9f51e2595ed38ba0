"""Traffic ingestion, normalization, windowing, splitting and synthetic generation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

if TYPE_CHECKING:
    from .graph import Topology

logger = logging.getLogger(__name__)

RAW_UNITS = "bytes/s"
NORMALIZED_UNITS = "normalized"
SECONDS_PER_DAY = 86400
LINK_SEPARATORS = ("->", "→")


class SchemaError(ValueError):
    """Raised when a traffic file's columns do not match the topology."""

    pass


class OrderingError(ValueError):
    """Raised when timestamps are not strictly increasing."""

    pass


class DomainError(ValueError):
    """Raised for negative or non-finite traffic values."""

    pass


class DegenerateSeriesError(ValueError):
    """Raised when a node series has zero variance where variance is required."""

    def __init__(self, node: str, detail: str = "has zero variance"):
        super().__init__(f"Node '{node}' {detail}")
        self.node = node


class InsufficientDataError(ValueError):
    """Raised when a series is too short for the requested windows."""

    pass


class SplitError(ValueError):
    """Raised for invalid split fractions or empty splits."""

    pass


@dataclass(frozen=True)
class TrafficSeries:
    """T×N traffic matrix with per-row timestamps (epoch seconds)."""

    timestamps: np.ndarray
    values: np.ndarray
    node_names: Tuple[str, ...]
    units: str = RAW_UNITS

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64).reshape(-1)
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise SchemaError(f"Traffic values must be T×N, got shape {vals.shape}")
        if vals.shape[0] != ts.shape[0]:
            raise SchemaError(f"{ts.shape[0]} timestamps for {vals.shape[0]} rows")
        if vals.shape[1] != len(self.node_names):
            raise SchemaError(f"{len(self.node_names)} node names for {vals.shape[1]} columns")
        if ts.size > 1:
            bad = np.flatnonzero(np.diff(ts) <= 0)
            if bad.size:
                raise OrderingError(f"Timestamps not strictly increasing at row {int(bad[0]) + 1}")
        if not np.all(np.isfinite(vals)):
            row = int(np.argwhere(~np.isfinite(vals))[0][0])
            raise DomainError(f"Non-finite traffic value at row {row}")
        if self.units == RAW_UNITS and np.any(vals < 0):
            row = int(np.argwhere(vals < 0)[0][0])
            raise DomainError(f"Negative traffic value at row {row}")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "node_names", tuple(self.node_names))

    @property
    def n_steps(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_nodes(self) -> int:
        return int(self.values.shape[1])

    @property
    def cadence(self) -> Optional[int]:
        """Median spacing between timestamps; recorded, never enforced."""
        if self.n_steps < 2:
            return None
        return int(np.median(np.diff(self.timestamps)))

    def head(self, rows: int) -> "TrafficSeries":
        return replace(self, timestamps=self.timestamps[:rows], values=self.values[:rows])

    def to_csv(self, path: Union[str, Path], header_comment: Optional[str] = None) -> None:
        """Write ``timestamp,<node>...`` rows; floats use shortest round-trip repr."""
        with open(path, "w", newline="") as f:
            if header_comment:
                f.write(f"# {header_comment}\n")
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["timestamp", *self.node_names])
            for ts, row in zip(self.timestamps, self.values):
                writer.writerow([int(ts), *(repr(float(v)) for v in row)])


def _parse_timestamp(text: str, line: int) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        stamp = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as e:
        raise SchemaError(f"Line {line}: unparseable timestamp '{text}'") from e
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return int(stamp.timestamp())


def _split_link(column: str) -> Optional[Tuple[str, str]]:
    for sep in LINK_SEPARATORS:
        if sep in column:
            src, dst = column.split(sep, 1)
            return src.strip(), dst.strip()
    return None


def load_traffic_csv(path: Union[str, Path], topology: Union["Topology", Sequence[str]]) -> TrafficSeries:
    """
    Load a node-level or link-level traffic CSV.

    Node columns are matched to the topology by name, so column order does not
    matter. Link columns (``src->dst``) are aggregated to node level: each node
    receives the sum of its outgoing and incoming links.

    Args:
        path: CSV with a ``timestamp`` first column; lines starting with ``#`` are skipped.
        topology: A Topology, or just the ordered node names.

    Returns:
        TrafficSeries ordered like the topology's nodes.

    Raises:
        SchemaError: Unknown or missing columns, malformed rows.
        OrderingError: Non-monotone timestamps.
        DomainError: Negative values (reported with the file line number).
    """
    names: List[str] = list(getattr(topology, "node_names", topology))
    index = {name: i for i, name in enumerate(names)}

    with open(path, newline="") as f:
        rows = [(n, r) for n, r in enumerate(csv.reader(f), 1) if r and not r[0].lstrip().startswith("#")]
    if not rows:
        raise SchemaError(f"{path}: no header row")
    header_line, header = rows[0]
    if header[0].strip() != "timestamp":
        raise SchemaError(f"Line {header_line}: first column must be 'timestamp', got '{header[0]}'")

    # column -> list of (node index) receiving that column's value
    targets: List[List[int]] = []
    node_columns: set = set()
    link_ends: set = set()
    seen_links: set = set()
    for col in header[1:]:
        col = col.strip()
        link = _split_link(col)
        if link is not None:
            src, dst = link
            for end in (src, dst):
                if end not in index:
                    raise SchemaError(f"Link column '{col}' names unknown node '{end}'")
                if end in node_columns:
                    raise SchemaError(f"Link column '{col}' overlaps the node column '{end}'")
            if link in seen_links:
                raise SchemaError(f"Duplicate link column '{col}'")
            targets.append([index[src], index[dst]])
            seen_links.add(link)
            link_ends.update(link)
        elif col in index:
            if col in node_columns:
                raise SchemaError(f"Duplicate column '{col}'")
            if col in link_ends:
                raise SchemaError(f"Node column '{col}' overlaps a link column naming it")
            targets.append([index[col]])
            node_columns.add(col)
        else:
            raise SchemaError(f"Unknown column '{col}' (not a topology node)")
    missing = [n for n in names if n not in node_columns and n not in link_ends]
    if missing:
        raise SchemaError(f"Missing columns for nodes: {', '.join(missing)}")

    timestamps: List[int] = []
    values = np.zeros((len(rows) - 1, len(names)))
    for r, (line, row) in enumerate(rows[1:]):
        if len(row) != len(header):
            raise SchemaError(f"Line {line}: expected {len(header)} fields, got {len(row)}")
        timestamps.append(_parse_timestamp(row[0], line))
        if r and timestamps[-1] <= timestamps[-2]:
            raise OrderingError(f"Line {line}: timestamp {timestamps[-1]} does not follow {timestamps[-2]}")
        for cell, nodes in zip(row[1:], targets):
            try:
                v = float(cell)
            except ValueError as e:
                raise SchemaError(f"Line {line}: non-numeric value '{cell}'") from e
            if not math.isfinite(v) or v < 0:
                raise DomainError(f"Line {line}: invalid traffic value {cell}")
            for node in nodes:
                values[r, node] += v

    series = TrafficSeries(np.array(timestamps, dtype=np.int64), values, tuple(names))
    logger.info(f"Loaded {series.n_steps} steps x {series.n_nodes} nodes from {path} (cadence {series.cadence}s)")
    return series


@dataclass(frozen=True)
class Normalizer:
    """Per-node affine normalization fitted on training rows only."""

    mode: str
    center: np.ndarray
    scale: np.ndarray
    fitted_rows: int

    def transform(self, values: np.ndarray, node_axis: int = -1) -> np.ndarray:
        shape = [1] * np.ndim(values)
        shape[node_axis] = -1
        return (np.asarray(values, dtype=np.float64) - self.center.reshape(shape)) / self.scale.reshape(shape)

    def inverse(self, values: np.ndarray, node_axis: int = -1) -> np.ndarray:
        shape = [1] * np.ndim(values)
        shape[node_axis] = -1
        return np.asarray(values, dtype=np.float64) * self.scale.reshape(shape) + self.center.reshape(shape)

    def to_dict(self) -> Dict[str, object]:
        return {
            "mode": self.mode,
            "center": [float(v) for v in self.center],
            "scale": [float(v) for v in self.scale],
            "fitted_rows": self.fitted_rows,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> "Normalizer":
        return cls(
            mode=str(payload["mode"]),
            center=np.asarray(payload["center"], dtype=np.float64),
            scale=np.asarray(payload["scale"], dtype=np.float64),
            fitted_rows=int(payload["fitted_rows"]),  # type: ignore[call-overload]
        )


def fit_transform(
    series: TrafficSeries, mode: str = "zscore", train_fraction: float = 0.7
) -> Tuple[TrafficSeries, Normalizer]:
    """
    Fit a normalizer on the first ``floor(train_fraction * T)`` rows and apply it to all rows.

    Args:
        series: Raw series.
        mode: ``"zscore"`` (mean/population std) or ``"minmax"``.
        train_fraction: Fraction of leading rows used for the statistics.

    Raises:
        DegenerateSeriesError: A node is constant over the training rows.
    """
    if mode not in ("zscore", "minmax"):
        raise ValueError(f"Unknown normalization mode '{mode}'")
    rows = int(math.floor(train_fraction * series.n_steps + 1e-9))
    if rows < 1:
        raise InsufficientDataError(f"train_fraction {train_fraction} leaves no rows of {series.n_steps}")
    fit = series.values[:rows]
    if mode == "zscore":
        center = fit.mean(axis=0)
        spread = fit.std(axis=0)
    else:
        center = fit.min(axis=0)
        spread = fit.max(axis=0) - center
    for i, s in enumerate(spread):
        if not s > 0:
            raise DegenerateSeriesError(series.node_names[i], f"is constant over the {rows} training rows")
    normalizer = Normalizer(mode=mode, center=center, scale=spread, fitted_rows=rows)
    normalized = replace(series, values=normalizer.transform(series.values), units=NORMALIZED_UNITS)
    logger.debug(f"Fitted {mode} normalizer on {rows} of {series.n_steps} rows")
    return normalized, normalizer


def time_of_day_features(timestamps: np.ndarray) -> np.ndarray:
    """sin/cos hour-of-day encoding, shape T×2."""
    phase = 2.0 * np.pi * (np.asarray(timestamps) % SECONDS_PER_DAY) / SECONDS_PER_DAY
    return np.stack([np.sin(phase), np.cos(phase)], axis=1)


@dataclass(frozen=True)
class WindowedDataset:
    """Sliding-window samples: inputs (M, W, N, F) and targets (M, N, h)."""

    inputs: np.ndarray
    targets: np.ndarray
    starts: np.ndarray
    window: int
    horizon: int
    stride: int
    timestamps: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def n_nodes(self) -> int:
        return int(self.inputs.shape[2])

    @property
    def n_features(self) -> int:
        return int(self.inputs.shape[3])

    def time_range(self, m: int) -> Tuple[int, int, int]:
        """Row bounds ``(input_start, target_start, target_end)``; end is exclusive."""
        s = int(self.starts[m])
        return s, s + self.window, s + self.window + self.horizon

    def input_end_rows(self) -> np.ndarray:
        """Exclusive end row of each sample's input window."""
        return self.starts + self.window

    def target_timestamps(self) -> np.ndarray:
        """Timestamp of the first target row of each sample."""
        return self.timestamps[self.starts + self.window]

    def subset(self, indices: Union[slice, np.ndarray]) -> "WindowedDataset":
        return replace(self, inputs=self.inputs[indices], targets=self.targets[indices], starts=self.starts[indices])


def make_windows(
    series: TrafficSeries, window: int, horizon: int = 1, stride: int = 1, time_features: bool = False
) -> WindowedDataset:
    """
    Build sliding-window (input, target) pairs.

    Sample ``m`` starts at row ``m * stride``: input rows ``[s, s+W)``, target
    rows ``[s+W, s+W+h)`` transposed to N×h. Feature 0 is traffic; with
    ``time_features`` two hour-of-day channels follow.

    Raises:
        InsufficientDataError: ``window + horizon > T``.
    """
    if window < 1 or horizon < 1 or stride < 1:
        raise ValueError(f"window, horizon and stride must be >= 1 (got {window}, {horizon}, {stride})")
    needed = window + horizon
    if needed > series.n_steps:
        raise InsufficientDataError(
            f"Need at least window + horizon = {needed} timesteps, series has {series.n_steps}"
        )
    count = (series.n_steps - needed) // stride + 1
    starts = np.arange(count, dtype=np.int64) * stride

    frames = series.values[:, :, None]
    if time_features:
        tod = time_of_day_features(series.timestamps)
        frames = np.concatenate([frames, np.repeat(tod[:, None, :], series.n_nodes, axis=1)], axis=2)

    input_idx = starts[:, None] + np.arange(window)[None, :]
    target_idx = starts[:, None] + window + np.arange(horizon)[None, :]
    inputs = frames[input_idx]
    targets = np.transpose(series.values[target_idx], (0, 2, 1))
    return WindowedDataset(
        inputs=inputs,
        targets=targets,
        starts=starts,
        window=window,
        horizon=horizon,
        stride=stride,
        timestamps=series.timestamps,
    )


def chrono_split(
    dataset: WindowedDataset, fractions: Sequence[float] = (0.7, 0.1, 0.2), purge: bool = False
) -> Tuple[WindowedDataset, WindowedDataset, WindowedDataset]:
    """
    Split samples chronologically into train/val/test.

    Val and test sizes are ``floor(fraction * M)``; the remainder goes to train.
    With ``purge`` the leading val/test samples whose input rows overlap the
    previous split's target rows are dropped.

    Raises:
        SplitError: Fractions not positive / not summing to 1, or an empty split.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise SplitError(f"Split fractions must be three positive numbers, got {tuple(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"Split fractions must sum to 1, got {sum(fractions)}")
    total = len(dataset)
    n_val = int(math.floor(fractions[1] * total + 1e-9))
    n_test = int(math.floor(fractions[2] * total + 1e-9))
    n_train = total - n_val - n_test
    order = np.argsort(dataset.starts, kind="stable")
    parts = [order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]]

    if purge:
        for k in (1, 2):
            prev = parts[k - 1]
            if prev.size == 0:
                continue
            last_target_end = int(dataset.starts[prev].max()) + dataset.window + dataset.horizon
            parts[k] = parts[k][dataset.starts[parts[k]] >= last_target_end]

    names = ("train", "val", "test")
    for name, idx in zip(names, parts):
        if idx.size == 0:
            raise SplitError(f"The {name} split is empty ({total} samples, fractions {tuple(fractions)})")
    train, val, test = (dataset.subset(idx) for idx in parts)
    logger.info(f"Chronological split: train={len(train)} val={len(val)} test={len(test)}")
    return train, val, test


@dataclass(frozen=True)
class SyntheticOptions:
    """Knobs of the synthetic spatiotemporal traffic generator."""

    coupling: float = 0.3
    period: int = 288
    amplitude: float = 0.4
    noise: float = 0.05
    base_level: float = 1.0e6
    phase_spread: float = math.pi / 3
    cadence: int = 300
    start_time: int = 0
    switch_step: Optional[int] = None
    switch_edges: Optional[Tuple[Tuple[int, int], ...]] = None

    def __post_init__(self):
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError(f"coupling must lie in [0, 1], got {self.coupling}")
        if self.period < 1 or self.cadence < 1:
            raise ValueError("period and cadence must be >= 1")
        if self.noise < 0 or self.amplitude < 0 or self.base_level <= 0:
            raise ValueError("noise and amplitude must be >= 0, base_level > 0")
        if (self.switch_step is None) != (self.switch_edges is None):
            raise ValueError("switch_step and switch_edges must be given together")


def _mixing_matrix(n: int, edges: Sequence[Tuple[int, int]], coupling: float) -> np.ndarray:
    """(1 - κ) I + κ P with P the row-normalized binary adjacency; isolated nodes keep themselves."""
    a = np.zeros((n, n))
    for i, j in edges:
        if i != j:
            a[i, j] = a[j, i] = 1.0
    deg = a.sum(axis=1, keepdims=True)
    p = np.where(deg > 0, a / np.where(deg > 0, deg, 1.0), np.eye(n))
    return (1.0 - coupling) * np.eye(n) + coupling * p


def generate_synthetic(
    topology: "Topology", steps: int, seed: int, options: Optional[SyntheticOptions] = None
) -> TrafficSeries:
    """
    Generate spatiotemporally coupled traffic on ``topology``.

    Each node carries a daily sinusoid around its own base level plus Gaussian
    noise; every node is then pulled toward its neighbors' average with
    coefficient ``coupling``. Output is clamped at zero and fully determined
    by ``seed``.
    """
    opts = options or SyntheticOptions()
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    n = topology.n_nodes
    rng = np.random.default_rng(seed)
    base = opts.base_level * rng.uniform(0.5, 1.5, size=n)
    phase = rng.uniform(-opts.phase_spread, opts.phase_spread, size=n)
    shocks = rng.standard_normal((steps, n))

    t = np.arange(steps, dtype=np.float64)[:, None]
    own = base * (1.0 + opts.amplitude * np.sin(2.0 * np.pi * t / opts.period + phase)) + opts.noise * base * shocks

    edges = [(i, j) for i, j, _ in topology.edges]
    mix = _mixing_matrix(n, edges, opts.coupling)
    values = own @ mix.T
    if opts.switch_step is not None and opts.switch_edges is not None:
        later = _mixing_matrix(n, list(opts.switch_edges), opts.coupling)
        values[opts.switch_step :] = own[opts.switch_step :] @ later.T
    values = np.maximum(values, 0.0)

    timestamps = opts.start_time + np.arange(steps, dtype=np.int64) * opts.cadence
    logger.info(f"Generated synthetic traffic: {steps} steps x {n} nodes, seed {seed}, coupling {opts.coupling}")
    return TrafficSeries(timestamps, values, tuple(topology.node_names))
