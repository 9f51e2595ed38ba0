"""
Adjacency construction, normalization and per-batch graph contexts.

Five data-driven or structural strategies are supported next to the topology's
own links (``explicit``): Gaussian distance kernel, thresholded absolute
correlation, k-nearest correlation neighbors, rolling-window (adaptive)
correlation, and node embeddings learned jointly with the model.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import diffcore as dc
from .data import DegenerateSeriesError, InsufficientDataError, TrafficSeries
from .diffcore import Tensor

if TYPE_CHECKING:
    from .config import GraphConfig

logger = logging.getLogger(__name__)

METHODS = ("distance", "correlation", "knn", "adaptive", "learnable", "explicit")
STATIC_METHODS = ("distance", "correlation", "knn", "explicit")
EARTH_RADIUS_KM = 6371.0


class InvalidAdjacencyError(ValueError):
    """Raised for negative, non-square or otherwise malformed adjacency matrices."""

    pass


class GraphConfigError(ValueError):
    """Raised when a construction strategy lacks the inputs it needs."""

    pass


class ParameterError(ValueError):
    """Raised for out-of-range construction parameters (k, tau, window, ...)."""

    pass


@dataclass(frozen=True)
class Topology:
    """Network graph: named nodes, weighted undirected links, optional geometry."""

    node_names: Tuple[str, ...]
    edges: Tuple[Tuple[int, int, float], ...] = ()
    distances: Optional[np.ndarray] = None
    coordinates: Optional[np.ndarray] = None

    def __post_init__(self):
        names = tuple(str(n) for n in self.node_names)
        n = len(names)
        if n < 1:
            raise GraphConfigError("A topology needs at least one node")
        if len(set(names)) != n:
            raise GraphConfigError("Duplicate node names in topology")
        edges = []
        for edge in self.edges:
            i, j, w = int(edge[0]), int(edge[1]), float(edge[2])
            if not (0 <= i < n and 0 <= j < n):
                raise GraphConfigError(f"Edge ({i}, {j}) references a node outside [0, {n})")
            if i == j:
                raise GraphConfigError(f"Self-loop edge on node {i} ({names[i]}); self-loops come from normalization")
            if not w >= 0:
                raise InvalidAdjacencyError(f"Edge ({i}, {j}) has negative weight {w}")
            edges.append((i, j, w))
        object.__setattr__(self, "node_names", names)
        object.__setattr__(self, "edges", tuple(edges))
        if self.distances is not None:
            d = np.asarray(self.distances, dtype=np.float64)
            if d.shape != (n, n):
                raise GraphConfigError(f"Distance matrix must be {n}x{n}, got {d.shape}")
            if np.any(d < 0) or not np.all(np.isfinite(d)):
                raise GraphConfigError("Distances must be finite and nonnegative")
            object.__setattr__(self, "distances", d)
        if self.coordinates is not None:
            c = np.asarray(self.coordinates, dtype=np.float64)
            if c.shape != (n, 2):
                raise GraphConfigError(f"Coordinates must be {n}x2 (lat, lon), got {c.shape}")
            object.__setattr__(self, "coordinates", c)

    @property
    def n_nodes(self) -> int:
        return len(self.node_names)

    def index(self, name: str) -> int:
        try:
            return self.node_names.index(name)
        except ValueError:
            raise GraphConfigError(f"Unknown node '{name}'") from None

    def neighbors(self) -> List[set]:
        out: List[set] = [set() for _ in self.node_names]
        for i, j, _ in self.edges:
            out[i].add(j)
            out[j].add(i)
        return out

    def distance_matrix(self) -> Optional[np.ndarray]:
        """Explicit distances, else great-circle kilometers from coordinates, else None."""
        if self.distances is not None:
            return self.distances
        if self.coordinates is not None:
            return haversine_matrix(self.coordinates)
        return None

    def reorder(self, names: Sequence[str]) -> "Topology":
        """
        The same graph with its nodes listed in ``names`` order.

        Raises:
            GraphConfigError: ``names`` is not a permutation of this topology's nodes.
        """
        names = tuple(str(n) for n in names)
        if sorted(names) != sorted(self.node_names) or len(set(names)) != len(names):
            raise GraphConfigError(
                f"Node names differ: expected [{', '.join(names)}], topology has [{', '.join(self.node_names)}]"
            )
        if names == self.node_names:
            return self
        perm = [self.node_names.index(n) for n in names]
        position = {old: new for new, old in enumerate(perm)}
        edges = tuple((position[i], position[j], w) for i, j, w in self.edges)
        distances = self.distances[np.ix_(perm, perm)] if self.distances is not None else None
        coordinates = self.coordinates[perm] if self.coordinates is not None else None
        return Topology(names, edges, distances=distances, coordinates=coordinates)

    @classmethod
    def ring(cls, n: int, prefix: str = "n") -> "Topology":
        """``n`` nodes on a cycle with unit weights and unit hop distances."""
        names = tuple(f"{prefix}{i}" for i in range(n))
        if n == 1:
            return cls(names)
        edges = tuple((i, (i + 1) % n, 1.0) for i in range(n if n > 2 else 1))
        idx = np.arange(n)
        gap = np.abs(idx[:, None] - idx[None, :])
        return cls(names, edges, distances=np.minimum(gap, n - gap).astype(np.float64))

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "Topology":
        if "nodes" not in payload:
            raise GraphConfigError("Topology document has no 'nodes' list")
        names = [str(n) for n in payload["nodes"]]
        lookup = {name: i for i, name in enumerate(names)}
        edges = []
        for raw in payload.get("edges", []):
            if len(raw) not in (2, 3):
                raise GraphConfigError(f"Edge entry {raw!r} must be [i, j] or [i, j, weight]")
            ends = []
            for end in raw[:2]:
                if isinstance(end, str):
                    if end not in lookup:
                        raise GraphConfigError(f"Edge {raw!r} names unknown node '{end}'")
                    ends.append(lookup[end])
                else:
                    ends.append(int(end))
            edges.append((ends[0], ends[1], float(raw[2]) if len(raw) == 3 else 1.0))
        return cls(
            tuple(names),
            tuple(edges),
            distances=(
                np.asarray(payload["distances"], dtype=np.float64) if payload.get("distances") is not None else None
            ),
            coordinates=(
                np.asarray(payload["coordinates"], dtype=np.float64) if payload.get("coordinates") is not None else None
            ),
        )

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "Topology":
        """
        Load ``{"nodes": [...], "edges": [[i, j, w], ...], "distances"?: NxN, "coordinates"?: Nx2}``.

        Raises:
            GraphConfigError: Unreadable JSON or inconsistent content.
        """
        try:
            with open(path) as f:
                payload = json.load(f)
        except json.JSONDecodeError as e:
            raise GraphConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
        if not isinstance(payload, dict):
            raise GraphConfigError(f"{path}: topology must be a JSON object")
        return cls.from_dict(payload)

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "nodes": list(self.node_names),
            "edges": [[i, j, w] for i, j, w in self.edges],
        }
        if self.distances is not None:
            out["distances"] = self.distances.tolist()
        if self.coordinates is not None:
            out["coordinates"] = self.coordinates.tolist()
        return out

    def to_json(self, path: Union[str, Path]) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def fingerprint(self) -> str:
        """Short sha1 of the canonical JSON document."""
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def haversine_matrix(coordinates: np.ndarray) -> np.ndarray:
    """Pairwise great-circle distances (km) between (lat, lon) degree pairs."""
    lat = np.radians(coordinates[:, 0])[:, None]
    lon = np.radians(coordinates[:, 1])[:, None]
    dlat = lat - lat.T
    dlon = lon - lon.T
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat) * np.cos(lat.T) * np.sin(dlon / 2.0) ** 2
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    np.fill_diagonal(d, 0.0)
    return d


@dataclass(frozen=True)
class AdjacencyMatrix:
    """Raw N×N adjacency ``a`` and the strategy that produced it."""

    a: Tensor
    method: str

    @property
    def n_nodes(self) -> int:
        return self.a.rows

    def numpy(self) -> np.ndarray:
        return self.a.numpy()

    def support(self) -> np.ndarray:
        return self.a.data > 0.0


@dataclass(frozen=True)
class NormalizedAdjacency:
    """``D^-1/2 (A + I) D^-1/2``."""

    a_hat: Tensor


def _check_matrix(a: np.ndarray, what: str = "adjacency") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidAdjacencyError(f"{what} must be square, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidAdjacencyError(f"{what} has non-finite entries")
    neg = np.argwhere(arr < 0)
    if neg.size:
        i, j = neg[0]
        raise InvalidAdjacencyError(f"{what} entry ({i}, {j}) is negative: {arr[i, j]}")
    return arr


def normalize(adj: Union[AdjacencyMatrix, np.ndarray]) -> NormalizedAdjacency:
    """
    Symmetric normalization with self-loops.

    Args:
        adj: Nonnegative N×N adjacency (array or AdjacencyMatrix).

    Returns:
        NormalizedAdjacency holding a constant (untaped) Â.

    Raises:
        InvalidAdjacencyError: Negative or non-square input.
    """
    raw = adj.a.data if isinstance(adj, AdjacencyMatrix) else adj
    a = _check_matrix(raw)
    a_prime = a + np.eye(a.shape[0])
    d = a_prime.sum(axis=1) ** -0.5
    return NormalizedAdjacency(Tensor(d[:, None] * a_prime * d[None, :]))


def normalize_tensor(a: Tensor) -> Tensor:
    """Differentiable counterpart of :func:`normalize` for tape-attached adjacencies."""
    n = a.rows
    a_prime = dc.add(a, np.eye(n))
    d = dc.power(dc.row_sum(a_prime), -0.5)
    left = dc.scale_rows(a_prime, d)
    return dc.transpose(dc.scale_rows(dc.transpose(left), d))


def spectral_radius(matrix: np.ndarray, iterations: int = 1000, tol: float = 1e-13) -> float:
    """Power-iteration estimate of the spectral radius of a nonnegative matrix."""
    m = np.asarray(matrix, dtype=np.float64)
    x = np.ones(m.shape[0]) / math.sqrt(m.shape[0])
    estimate = 0.0
    for _ in range(iterations):
        y = m @ x
        norm = float(np.linalg.norm(y))
        if norm == 0.0:
            return 0.0
        x = y / norm
        if abs(norm - estimate) <= tol * max(norm, 1.0):
            return norm
        estimate = norm
    return estimate


def explicit_adjacency(topology: Topology) -> AdjacencyMatrix:
    """Topology link weights; duplicate or reversed links keep the larger weight."""
    n = topology.n_nodes
    a = np.zeros((n, n))
    for i, j, w in topology.edges:
        a[i, j] = a[j, i] = max(a[i, j], w)
    return AdjacencyMatrix(Tensor(a), "explicit")


def load_adjacency_csv(path: Union[str, Path], n_nodes: Optional[int] = None) -> AdjacencyMatrix:
    """Read an N×N comma-separated matrix as an explicit adjacency."""
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r and not r[0].lstrip().startswith("#")]
    try:
        a = np.array([[float(v) for v in r] for r in rows])
    except ValueError as e:
        raise InvalidAdjacencyError(f"{path}: non-numeric entry ({e})") from e
    a = _check_matrix(a, f"{path}")
    if n_nodes is not None and a.shape[0] != n_nodes:
        raise InvalidAdjacencyError(f"{path}: matrix is {a.shape[0]}x{a.shape[0]} but topology has {n_nodes} nodes")
    if np.any(np.diag(a) != 0):
        raise InvalidAdjacencyError(f"{path}: diagonal must be zero; self-loops come from normalization")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12):
        raise InvalidAdjacencyError(f"{path}: explicit adjacency must be symmetric")
    return AdjacencyMatrix(Tensor(a), "explicit")


def distance_adjacency(topology: Topology, sigma: Optional[float] = None, epsilon: float = 0.1) -> AdjacencyMatrix:
    """
    Gaussian kernel ``exp(-d^2 / sigma^2)`` over node distances, cut below ``epsilon``.

    ``sigma`` defaults to the standard deviation of the off-diagonal distances.

    Raises:
        GraphConfigError: The topology has neither distances nor coordinates.
        ParameterError: ``sigma <= 0`` or ``epsilon`` outside ``[0, 1)``.
    """
    d = topology.distance_matrix()
    if d is None:
        raise GraphConfigError("distance adjacency needs 'distances' or 'coordinates' in the topology")
    if not 0.0 <= epsilon < 1.0:
        raise ParameterError(f"epsilon must lie in [0, 1), got {epsilon}")
    n = topology.n_nodes
    off = ~np.eye(n, dtype=bool)
    if sigma is None:
        spread = float(d[off].std()) if n > 1 else 0.0
        sigma = spread if spread > 0 else (float(d[off].mean()) if n > 1 and d[off].mean() > 0 else 1.0)
        logger.debug(f"distance adjacency: sigma defaulted to {sigma:.6g}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    a = np.exp(-(d**2) / sigma**2)
    a[(a < epsilon) | ~off] = 0.0
    return AdjacencyMatrix(Tensor(a), "distance")


def _values(series: Union[TrafficSeries, np.ndarray]) -> Tuple[np.ndarray, Sequence[str]]:
    if isinstance(series, TrafficSeries):
        return series.values, series.node_names
    v = np.asarray(series, dtype=np.float64)
    return v, [str(i) for i in range(v.shape[1])]


def correlation_matrix(series: Union[TrafficSeries, np.ndarray], strict: bool = True) -> np.ndarray:
    """
    Absolute Pearson correlations with a zero diagonal.

    Args:
        series: T×N values or a TrafficSeries.
        strict: Raise on constant nodes; otherwise give them no edges.

    Raises:
        InsufficientDataError: Fewer than 3 timesteps.
        DegenerateSeriesError: A constant node in strict mode.
    """
    v, names = _values(series)
    if v.shape[0] < 3:
        raise InsufficientDataError(f"Correlation needs at least 3 timesteps, got {v.shape[0]}")
    centered = v - v.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    flat = norms <= 1e-12 * np.maximum(np.abs(v).max(axis=0), 1.0)
    if np.any(flat):
        bad = [names[i] for i in np.flatnonzero(flat)]
        if strict:
            raise DegenerateSeriesError(bad[0])
        logger.warning(f"Constant series get no correlation edges: {', '.join(bad)}")
    safe = np.where(flat, 1.0, norms)
    r = (centered.T @ centered) / np.outer(safe, safe)
    r = np.clip(np.abs(r), 0.0, 1.0)
    r[flat, :] = 0.0
    r[:, flat] = 0.0
    np.fill_diagonal(r, 0.0)
    return r


def correlation_adjacency(series: Union[TrafficSeries, np.ndarray], tau: float = 0.5) -> AdjacencyMatrix:
    """``A_ij = |pearson(i, j)|`` where it reaches ``tau``, zero elsewhere."""
    if not 0.0 <= tau <= 1.0:
        raise ParameterError(f"tau must lie in [0, 1], got {tau}")
    r = correlation_matrix(series)
    r[r < tau] = 0.0
    return AdjacencyMatrix(Tensor(r), "correlation")


def knn_from_correlation(corr: np.ndarray, k: int) -> np.ndarray:
    """Keep each row's top-``k`` entries (ties to the lower index), then ``max(A, A^T)``."""
    n = corr.shape[0]
    if not 1 <= k < n:
        raise ParameterError(f"k must satisfy 1 <= k < N={n}, got {k}")
    a = np.zeros_like(corr)
    idx = np.arange(n)
    for i in range(n):
        others = idx[idx != i]
        # lexsort: last key is primary
        order = others[np.lexsort((others, -corr[i, others]))]
        keep = order[:k]
        a[i, keep] = corr[i, keep]
    return np.maximum(a, a.T)


def knn_adjacency(series: Union[TrafficSeries, np.ndarray], k: int = 3) -> AdjacencyMatrix:
    """Top-k absolute-correlation neighbors per node, max-symmetrized."""
    v, _ = _values(series)
    if not 1 <= k < v.shape[1]:
        raise ParameterError(f"k must satisfy 1 <= k < N={v.shape[1]}, got {k}")
    return AdjacencyMatrix(Tensor(knn_from_correlation(correlation_matrix(series), k)), "knn")


@dataclass(frozen=True)
class AdaptiveSchedule:
    """Rolling-window correlation adjacencies; window ``m`` covers rows ``[starts[m], ends[m])``."""

    starts: np.ndarray
    ends: np.ndarray
    matrices: Tuple[AdjacencyMatrix, ...]
    window: int
    stride: int

    def __len__(self) -> int:
        return len(self.matrices)

    def __getitem__(self, m: int) -> AdjacencyMatrix:
        return self.matrices[m]

    def __iter__(self) -> Iterator[AdjacencyMatrix]:
        return iter(self.matrices)

    def index_at(self, row: int) -> int:
        """Latest window ending at or before ``row`` (exclusive end), or -1 if none has completed."""
        return int(np.searchsorted(self.ends, row, side="right")) - 1

    def at(self, row: int) -> Optional[AdjacencyMatrix]:
        m = self.index_at(row)
        return self.matrices[m] if m >= 0 else None


def adaptive_adjacency(
    series: Union[TrafficSeries, np.ndarray], window: int, stride: int, tau: float = 0.5
) -> AdaptiveSchedule:
    """
    Recompute the correlation adjacency on windows ``[s, s + window)`` for ``s = 0, stride, ...``.

    Constant nodes inside a window get no edges for that window.

    Raises:
        ParameterError: ``window > T`` or non-positive window/stride.
    """
    v, names = _values(series)
    t = v.shape[0]
    if window < 3 or stride < 1:
        raise ParameterError(f"adaptive window must be >= 3 and stride >= 1, got {window}, {stride}")
    if window > t:
        raise ParameterError(f"adaptive window {window} exceeds the series length {t}")
    if not 0.0 <= tau <= 1.0:
        raise ParameterError(f"tau must lie in [0, 1], got {tau}")
    starts = np.arange(0, t - window + 1, stride, dtype=np.int64)
    matrices = []
    for s in starts:
        r = correlation_matrix(v[s : s + window], strict=False)
        r[r < tau] = 0.0
        matrices.append(AdjacencyMatrix(Tensor(r), "adaptive"))
    logger.debug(f"adaptive adjacency: {len(matrices)} windows of {window} rows, stride {stride}")
    return AdaptiveSchedule(starts, starts + window, tuple(matrices), window, stride)


def learnable_adjacency(embeddings: Tensor) -> AdjacencyMatrix:
    """
    ``row_softmax(relu(E E^T))`` over off-diagonal entries; stays on the embeddings' tape.

    A row zeroed by the relu becomes uniform ``1/(N-1)``. A single node has no
    off-diagonal entries and gets the empty graph.
    """
    n = embeddings.rows
    if embeddings.cols < 1:
        raise ParameterError("Adjacency embeddings need at least one column")
    if n == 1:
        return AdjacencyMatrix(Tensor(np.zeros((1, 1))), "learnable")
    logits = dc.relu(dc.matmul(embeddings, dc.transpose(embeddings)))
    off = ~np.eye(n, dtype=bool)
    return AdjacencyMatrix(dc.row_softmax_masked(logits, off), "learnable")


def neighbor_mask(a: np.ndarray) -> np.ndarray:
    """Attention neighborhood: adjacency support plus each node itself."""
    return (np.asarray(a) > 0.0) | np.eye(a.shape[0], dtype=bool)


@dataclass(frozen=True)
class GraphContext:
    """
    Graph inputs for one batch.

    ``blocks`` stacks K normalized N×N adjacencies row-wise: K = 1 when every
    sample shares the graph, K = B when each sample has its own. ``mask``
    stacks the matching attention neighborhoods.
    """

    blocks: Tensor
    mask: np.ndarray
    n_nodes: int

    @property
    def n_blocks(self) -> int:
        return self.blocks.rows // self.n_nodes

    def mask_for(self, frames: int) -> np.ndarray:
        """Attention mask tiled over ``frames`` time-major repetitions of the blocks."""
        return np.tile(self.mask, (frames, 1))


class AdjacencyProvider:
    """Produces the :class:`GraphContext` for a batch of samples."""

    method: str = "explicit"
    n_nodes: int = 0

    def param_shapes(self) -> Dict[str, Tuple[int, int]]:
        """Trainable tensors this provider contributes, by name."""
        return {}

    def context(self, params: Mapping[str, Tensor], input_end_rows: np.ndarray) -> GraphContext:
        raise NotImplementedError

    def static_matrix(self) -> Optional[np.ndarray]:
        """Raw adjacency to store in checkpoints, when the graph is fixed."""
        return None


@dataclass
class StaticProvider(AdjacencyProvider):
    """One fixed graph for every sample."""

    adjacency: AdjacencyMatrix
    _context: GraphContext = field(init=False, repr=False)

    def __post_init__(self):
        self.method = self.adjacency.method
        self.n_nodes = self.adjacency.n_nodes
        a = self.adjacency.a.data
        self._context = GraphContext(normalize(a).a_hat, neighbor_mask(a), self.n_nodes)

    def context(self, params: Mapping[str, Tensor], input_end_rows: np.ndarray) -> GraphContext:
        return self._context

    def static_matrix(self) -> Optional[np.ndarray]:
        return self.adjacency.a.numpy()


@dataclass
class AdaptiveProvider(AdjacencyProvider):
    """Per-sample graph from the latest rolling window that completed before the sample's target."""

    schedule: AdaptiveSchedule
    n_nodes: int = 0
    _normalized: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.method = "adaptive"
        if self.n_nodes == 0:
            self.n_nodes = self.schedule[0].n_nodes

    def _block(self, m: int) -> Tuple[np.ndarray, np.ndarray]:
        if m not in self._normalized:
            if m < 0:
                # no window has completed yet: empty graph
                eye = np.eye(self.n_nodes)
                self._normalized[m] = (eye, eye.astype(bool))
            else:
                a = self.schedule[m].a.data
                self._normalized[m] = (normalize(a).a_hat.data, neighbor_mask(a))
        return self._normalized[m]

    def context(self, params: Mapping[str, Tensor], input_end_rows: np.ndarray) -> GraphContext:
        parts = [self._block(self.schedule.index_at(int(r))) for r in input_end_rows]
        blocks = np.concatenate([p[0] for p in parts], axis=0)
        mask = np.concatenate([p[1] for p in parts], axis=0)
        return GraphContext(Tensor(blocks), mask, self.n_nodes)


@dataclass
class LearnableProvider(AdjacencyProvider):
    """Graph derived from trainable node embeddings ``adjacency.E``."""

    n_nodes: int
    embedding_dim: int = 8

    def __post_init__(self):
        self.method = "learnable"
        if self.embedding_dim < 1:
            raise ParameterError(f"embedding_dim must be >= 1, got {self.embedding_dim}")

    def param_shapes(self) -> Dict[str, Tuple[int, int]]:
        return {"adjacency.E": (self.n_nodes, self.embedding_dim)}

    def context(self, params: Mapping[str, Tensor], input_end_rows: np.ndarray) -> GraphContext:
        adj = learnable_adjacency(params["adjacency.E"])
        a_hat = normalize_tensor(adj.a)
        return GraphContext(a_hat, np.ones((self.n_nodes, self.n_nodes), dtype=bool), self.n_nodes)


def build_provider(
    settings: "GraphConfig",
    topology: Optional[Topology],
    series: TrafficSeries,
    train_rows: int,
    static_matrix: Optional[np.ndarray] = None,
) -> AdjacencyProvider:
    """
    Resolve the configured adjacency strategy into a provider.

    Correlation-based static graphs are fitted on the first ``train_rows`` rows.
    ``static_matrix`` (from a checkpoint) bypasses construction for static methods.
    """
    method = settings.adjacency
    n = series.n_nodes
    if method not in METHODS:
        raise GraphConfigError(f"Unknown adjacency method '{method}'; expected one of {', '.join(METHODS)}")
    if topology is not None and topology.n_nodes != n:
        raise GraphConfigError(f"Topology has {topology.n_nodes} nodes but the series has {n}")

    if method in STATIC_METHODS and static_matrix is not None:
        a = _check_matrix(static_matrix)
        if a.shape[0] != n:
            raise InvalidAdjacencyError(f"Stored adjacency is {a.shape[0]}x{a.shape[0]} but the series has {n} nodes")
        return StaticProvider(AdjacencyMatrix(Tensor(a), method))

    if method == "explicit":
        if settings.adjacency_csv:
            return StaticProvider(load_adjacency_csv(settings.adjacency_csv, n))
        if topology is None:
            raise GraphConfigError("explicit adjacency needs a topology or graph.adjacency_csv")
        return StaticProvider(explicit_adjacency(topology))
    if method == "distance":
        if topology is None:
            raise GraphConfigError("distance adjacency needs a topology")
        return StaticProvider(distance_adjacency(topology, settings.sigma, settings.epsilon))
    if method == "correlation":
        return StaticProvider(correlation_adjacency(series.head(train_rows), settings.tau))
    if method == "knn":
        return StaticProvider(knn_adjacency(series.head(train_rows), settings.k))
    if method == "adaptive":
        schedule = adaptive_adjacency(series, settings.adaptive_window, settings.adaptive_stride, settings.tau)
        return AdaptiveProvider(schedule, n)
    return LearnableProvider(n, settings.embedding_dim)
