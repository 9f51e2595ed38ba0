"""
Graph-convolutional recurrent forecaster.

Every timestep of an input window is encoded by the same stack of graph
convolutions (optionally attention-weighted); the encoded sequence drives a GRU
or LSTM cell from a zero state, and a per-node MLP head maps the final hidden
state to ``horizon`` forecasts.

Batches are stacked time-major: frame ``t`` of sample ``b`` occupies rows
``(t * B + b) * N`` to ``(t * B + b + 1) * N``, so one pass of the GCN stack
encodes every frame of every sample.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import diffcore as dc
from .config import ModelConfig, RunConfig
from .data import Normalizer
from .diffcore import DimensionError, Tape, Tensor
from .graph import AdjacencyProvider, GraphContext, NormalizedAdjacency

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

ACTIVATIONS: Dict[str, Callable[[dc.ArrayLike], Tensor]] = {
    "relu": dc.relu,
    "tanh": dc.tanh,
    "sigmoid": dc.sigmoid,
    "identity": dc.identity,
}


class CheckpointError(ValueError):
    """Raised for unreadable or inconsistent checkpoint documents."""

    pass


@dataclass(frozen=True)
class GcnParams:
    weights: Tuple[Tensor, ...]


@dataclass(frozen=True)
class AttentionParams:
    """Scoring projection ``w`` (F×F') and vector ``a`` (2F'×1)."""

    w: Tensor
    a: Tensor

    def __post_init__(self):
        if self.a.shape != (2 * self.w.cols, 1):
            raise DimensionError(f"attention vector must be {2 * self.w.cols}x1, got {self.a.shape}")


@dataclass(frozen=True)
class GruParams:
    w_z: Tensor
    w_r: Tensor
    w_h: Tensor
    u_z: Tensor
    u_r: Tensor
    u_h: Tensor
    b_z: Optional[Tensor] = None
    b_r: Optional[Tensor] = None
    b_h: Optional[Tensor] = None

    def __post_init__(self):
        if not (self.w_z.shape == self.w_r.shape == self.w_h.shape):
            raise DimensionError("GRU input weights must share one shape")
        if not (self.u_z.shape == self.u_r.shape == self.u_h.shape):
            raise DimensionError("GRU recurrent weights must share one shape")


@dataclass(frozen=True)
class LstmParams:
    w_i: Tensor
    w_f: Tensor
    w_o: Tensor
    w_c: Tensor
    u_i: Tensor
    u_f: Tensor
    u_o: Tensor
    u_c: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_c: Tensor


@dataclass(frozen=True)
class LstmState:
    h: Tensor
    c: Tensor


@dataclass(frozen=True)
class HeadParams:
    """(weight, bias) per dense layer; relu between layers, linear output."""

    layers: Tuple[Tuple[Tensor, Tensor], ...]


def _activation(name: str, slope: float = 0.2) -> Callable[[dc.ArrayLike], Tensor]:
    if name == "leaky_relu":
        return lambda x: dc.leaky_relu(x, slope)
    if name not in ACTIVATIONS:
        raise ValueError(f"Unknown activation '{name}'")
    return ACTIVATIONS[name]


def _a_hat(adjacency: Union[NormalizedAdjacency, Tensor, np.ndarray]) -> dc.ArrayLike:
    return adjacency.a_hat if isinstance(adjacency, NormalizedAdjacency) else adjacency


def gcn_forward(
    h: dc.ArrayLike,
    a_hat: Union[NormalizedAdjacency, Tensor, np.ndarray],
    w: dc.ArrayLike,
    activation: str = "relu",
) -> Tensor:
    """
    One graph convolution ``act(A_hat H W)``.

    ``a_hat`` may stack several N×N blocks; ``h`` rows are then propagated block
    by block (see :func:`netforecast.diffcore.block_matmul`).
    """
    return _activation(activation)(dc.block_matmul(_a_hat(a_hat), dc.matmul(h, w)))


def attention_coefficients(
    x: dc.ArrayLike,
    params: AttentionParams,
    neighbor_mask: np.ndarray,
    activation: str = "relu",
    slope: float = 0.2,
) -> Tensor:
    """
    Row-stochastic neighbor weights ``softmax_j(act(a^T [W x_i || W x_j]))`` over the mask.

    ``neighbor_mask`` is N×N, or stacked blocks of N×N matching the row blocks of ``x``.

    Raises:
        DegenerateRowError: A mask row has no neighbors.
    """
    mask = np.asarray(neighbor_mask, dtype=bool)
    n = mask.shape[1]
    projected = dc.matmul(x, params.w)
    width = params.w.cols
    u = dc.matmul(projected, dc.slice_rows(params.a, 0, width))
    v = dc.matmul(projected, dc.slice_rows(params.a, width, 2 * width))
    logits = _activation(activation, slope)(dc.block_pairwise_sum(u, v, n))
    return dc.row_softmax_masked(logits, mask)


def gcn_attention_forward(
    h: dc.ArrayLike, coefficients: dc.ArrayLike, w: dc.ArrayLike, activation: str = "relu"
) -> Tensor:
    """Graph convolution with attention weights in place of ``A_hat``: ``act(alpha H W)``."""
    return _activation(activation)(dc.block_matmul(coefficients, dc.matmul(h, w)))


def _affine(x: dc.ArrayLike, w: Tensor, h: dc.ArrayLike, u: Tensor, b: Optional[Tensor]) -> Tensor:
    out = dc.add(dc.matmul(x, w), dc.matmul(h, u))
    return dc.add_row(out, b) if b is not None else out


def gru_step(x: dc.ArrayLike, h_prev: dc.ArrayLike, params: GruParams) -> Tensor:
    """
    One GRU update.

    z = sigmoid(x W_z + h U_z), r = sigmoid(x W_r + h U_r),
    h' = tanh(x W_h + (r * h) U_h), h_new = (1 - z) * h + z * h'.
    """
    z = dc.sigmoid(_affine(x, params.w_z, h_prev, params.u_z, params.b_z))
    r = dc.sigmoid(_affine(x, params.w_r, h_prev, params.u_r, params.b_r))
    candidate = dc.tanh(_affine(x, params.w_h, dc.hadamard(r, h_prev), params.u_h, params.b_h))
    return dc.add(dc.hadamard(dc.one_minus(z), h_prev), dc.hadamard(z, candidate))


def lstm_step(x: dc.ArrayLike, state: LstmState, params: LstmParams) -> LstmState:
    i = dc.sigmoid(_affine(x, params.w_i, state.h, params.u_i, params.b_i))
    f = dc.sigmoid(_affine(x, params.w_f, state.h, params.u_f, params.b_f))
    o = dc.sigmoid(_affine(x, params.w_o, state.h, params.u_o, params.b_o))
    g = dc.tanh(_affine(x, params.w_c, state.h, params.u_c, params.b_c))
    c = dc.add(dc.hadamard(f, state.c), dc.hadamard(i, g))
    return LstmState(h=dc.hadamard(o, dc.tanh(c)), c=c)


def mlp_head(h: dc.ArrayLike, params: HeadParams) -> Tensor:
    """Per-node MLP applied row-wise; relu on hidden layers, linear output."""
    out = h
    last = len(params.layers) - 1
    for l, (w, b) in enumerate(params.layers):
        out = dc.add_row(dc.matmul(out, w), b)
        if l < last:
            out = dc.relu(out)
    return out  # type: ignore[return-value]


def _xavier(rng: np.random.Generator, shape: Tuple[int, int]) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


GRU_GATES = ("z", "r", "h")
LSTM_GATES = ("i", "f", "o", "c")


def parameter_shapes(config: ModelConfig, n_features: int, horizon: int) -> Dict[str, Tuple[int, int]]:
    """Name and shape of every model tensor, in a fixed order."""
    shapes: Dict[str, Tuple[int, int]] = {}
    dims = [n_features, *config.gcn_hidden]
    for l in range(len(config.gcn_hidden)):
        if config.attention and (l == 0 or config.attention_all_layers):
            shapes[f"attention.{l}.W"] = (dims[l], config.attention_dim)
            shapes[f"attention.{l}.a"] = (2 * config.attention_dim, 1)
        shapes[f"gcn.{l}.W"] = (dims[l], dims[l + 1])
    enc, hid = dims[-1], config.hidden
    if config.temporal == "gru":
        for g in GRU_GATES:
            shapes[f"gru.W_{g}"] = (enc, hid)
        for g in GRU_GATES:
            shapes[f"gru.U_{g}"] = (hid, hid)
        if config.gru_bias:
            for g in GRU_GATES:
                shapes[f"gru.b_{g}"] = (1, hid)
    else:
        for g in LSTM_GATES:
            shapes[f"lstm.W_{g}"] = (enc, hid)
        for g in LSTM_GATES:
            shapes[f"lstm.U_{g}"] = (hid, hid)
        for g in LSTM_GATES:
            shapes[f"lstm.b_{g}"] = (1, hid)
    widths = [hid, *config.head_hidden, horizon]
    for l in range(len(widths) - 1):
        shapes[f"head.{l}.W"] = (widths[l], widths[l + 1])
        shapes[f"head.{l}.b"] = (1, widths[l + 1])
    return shapes


@dataclass(frozen=True)
class ModelParams:
    """
    All trainable tensors plus the architecture they belong to.

    Values are plain arrays; :meth:`bind` attaches them to a tape for one
    training step.
    """

    config: ModelConfig
    n_features: int
    horizon: int
    values: Dict[str, np.ndarray]

    @classmethod
    def init(
        cls,
        config: ModelConfig,
        n_features: int,
        horizon: int,
        seed: int,
        extra_shapes: Optional[Mapping[str, Tuple[int, int]]] = None,
    ) -> "ModelParams":
        """Xavier-uniform weights, zero biases (LSTM forget bias 1.0), seeded."""
        rng = np.random.default_rng(seed)
        shapes = dict(parameter_shapes(config, n_features, horizon))
        shapes.update(extra_shapes or {})
        values: Dict[str, np.ndarray] = {}
        for name, shape in shapes.items():
            if name.split(".")[-1].startswith("b_") or name.endswith(".b"):
                fill = 1.0 if name == "lstm.b_f" else 0.0
                values[name] = np.full(shape, fill)
            else:
                values[name] = _xavier(rng, shape)
        logger.debug(f"Initialized {len(values)} tensors ({sum(v.size for v in values.values())} scalars)")
        return cls(config, n_features, horizon, values)

    def names(self) -> List[str]:
        return list(self.values)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: object) -> bool:
        return name in self.values

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def bind(self, tape: Optional[Tape] = None) -> Dict[str, Tensor]:
        """Tensors for every parameter: watched leaves on ``tape``, or untaped constants."""
        if tape is None:
            return {name: Tensor(v) for name, v in self.values.items()}
        return {name: tape.watch(v) for name, v in self.values.items()}

    def replace(self, values: Mapping[str, np.ndarray]) -> "ModelParams":
        """Copy with some tensors replaced; shapes must match."""
        merged = dict(self.values)
        for name, v in values.items():
            if name not in merged:
                raise KeyError(f"Unknown parameter '{name}'")
            if np.shape(v) != merged[name].shape:
                raise DimensionError(f"{name}: shape {np.shape(v)} does not match {merged[name].shape}")
            merged[name] = np.array(v, dtype=np.float64, copy=True)
        return ModelParams(self.config, self.n_features, self.horizon, merged)

    def copy(self) -> "ModelParams":
        return self.replace(self.values)

    def to_tensors_json(self) -> Dict[str, Dict[str, list]]:
        return {name: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for name, v in self.values.items()}

    @classmethod
    def from_tensors_json(
        cls,
        config: ModelConfig,
        n_features: int,
        horizon: int,
        tensors: Mapping[str, Mapping[str, list]],
        extra_shapes: Optional[Mapping[str, Tuple[int, int]]] = None,
    ) -> "ModelParams":
        """Rebuild from checkpoint tensors, checking names and shapes against the architecture."""
        expected = dict(parameter_shapes(config, n_features, horizon))
        expected.update(extra_shapes or {})
        missing = [name for name in expected if name not in tensors]
        if missing:
            raise CheckpointError(f"Checkpoint lacks tensors: {', '.join(missing)}")
        unknown = [name for name in tensors if name not in expected]
        if unknown:
            raise CheckpointError(f"Checkpoint has unexpected tensors: {', '.join(unknown)}")
        values = {}
        for name, shape in expected.items():
            entry = tensors[name]
            stored = tuple(entry["shape"])
            data = np.asarray(entry["data"], dtype=np.float64)
            if stored != shape or data.size != shape[0] * shape[1]:
                raise CheckpointError(f"Tensor {name}: expected shape {shape}, found {stored} with {data.size} values")
            values[name] = data.reshape(shape)
        return cls(config, n_features, horizon, values)


def gcn_params(bound: Mapping[str, Tensor], layers: int) -> GcnParams:
    return GcnParams(tuple(bound[f"gcn.{l}.W"] for l in range(layers)))


def gru_params(bound: Mapping[str, Tensor]) -> GruParams:
    return GruParams(
        *(bound[f"gru.W_{g}"] for g in GRU_GATES),
        *(bound[f"gru.U_{g}"] for g in GRU_GATES),
        *(bound.get(f"gru.b_{g}") for g in GRU_GATES),
    )


def lstm_params(bound: Mapping[str, Tensor]) -> LstmParams:
    return LstmParams(
        *(bound[f"lstm.W_{g}"] for g in LSTM_GATES),
        *(bound[f"lstm.U_{g}"] for g in LSTM_GATES),
        *(bound[f"lstm.b_{g}"] for g in LSTM_GATES),
    )


def head_params(bound: Mapping[str, Tensor]) -> HeadParams:
    layers = []
    l = 0
    while f"head.{l}.W" in bound:
        layers.append((bound[f"head.{l}.W"], bound[f"head.{l}.b"]))
        l += 1
    return HeadParams(tuple(layers))


def encode_frames(frames: Tensor, bound: Mapping[str, Tensor], config: ModelConfig, context: GraphContext) -> Tensor:
    """Run the GCN stack (shared across timesteps) over stacked frames."""
    h: Tensor = frames
    repeats = frames.rows // context.blocks.rows
    mask = context.mask_for(repeats) if config.attention else None
    for l, w in enumerate(gcn_params(bound, len(config.gcn_hidden)).weights):
        if mask is not None and (l == 0 or config.attention_all_layers):
            att = AttentionParams(bound[f"attention.{l}.W"], bound[f"attention.{l}.a"])
            alpha = attention_coefficients(h, att, mask, config.attention_activation, config.attention_slope)
            h = gcn_attention_forward(h, alpha, w, config.gcn_activation)
        else:
            h = gcn_forward(h, context.blocks, w, config.gcn_activation)
    return h


def forward_batch(
    inputs: np.ndarray,
    bound: Mapping[str, Tensor],
    config: ModelConfig,
    context: GraphContext,
    tape: Optional[Tape] = None,
) -> Tensor:
    """
    Forecast a batch of windows.

    Args:
        inputs: (B, W, N, F) normalized input windows.
        bound: Parameter tensors (see :meth:`ModelParams.bind`).
        config: Architecture settings.
        context: Graph for the batch; one block shared or one block per sample.
        tape: Tape the inputs are recorded on, when gradients are wanted.

    Returns:
        (B·N)×horizon tensor, sample-major.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"inputs must be (batch, window, nodes, features), got shape {x.shape}")
    b, w, n, f = x.shape
    if w < 1:
        raise DimensionError("window length must be >= 1")
    if n != context.n_nodes:
        raise DimensionError(f"inputs have {n} nodes but the graph has {context.n_nodes}")
    if context.n_blocks not in (1, b):
        raise DimensionError(f"graph context has {context.n_blocks} blocks for a batch of {b}")
    stacked = np.transpose(x, (1, 0, 2, 3)).reshape(w * b * n, f)
    frames = tape.constant(stacked) if tape is not None else Tensor(stacked)
    encoded = encode_frames(frames, bound, config, context)

    rows = b * n
    zeros = np.zeros((rows, config.hidden))
    if config.temporal == "gru":
        gru = gru_params(bound)
        h: dc.ArrayLike = zeros
        for t in range(w):
            h = gru_step(dc.slice_rows(encoded, t * rows, (t + 1) * rows), h, gru)
    else:
        lstm = lstm_params(bound)
        state = LstmState(Tensor(zeros), Tensor(zeros))
        for t in range(w):
            state = lstm_step(dc.slice_rows(encoded, t * rows, (t + 1) * rows), state, lstm)
        h = state.h
    return mlp_head(h, head_params(bound))


def _as_context(adjacency: Union[GraphContext, NormalizedAdjacency, Tensor, np.ndarray], n: int) -> GraphContext:
    if isinstance(adjacency, GraphContext):
        return adjacency
    a_hat = _a_hat(adjacency)
    blocks = a_hat if isinstance(a_hat, Tensor) else Tensor(a_hat)
    return GraphContext(blocks, np.asarray(blocks.data) > 0.0, n)


def forward(
    window: Union[np.ndarray, Sequence[np.ndarray]],
    params: Union[ModelParams, Mapping[str, Tensor]],
    adjacency: Union[GraphContext, NormalizedAdjacency, Tensor, np.ndarray],
    config: Optional[ModelConfig] = None,
    tape: Optional[Tape] = None,
) -> Tensor:
    """
    Forecast one window: W frames of N×F (or N-vectors for F=1) to an N×horizon tensor.

    ``params`` is either a :class:`ModelParams` (evaluated without a tape) or
    already-bound tensors together with ``config``.
    """
    frames = [np.asarray(f, dtype=np.float64) for f in window]
    if not frames:
        raise DimensionError("window length must be >= 1")
    stacked = np.stack([f.reshape(f.shape[0], -1) for f in frames])[None]
    if isinstance(params, ModelParams):
        config = params.config
        bound = params.bind(tape)
    else:
        bound = dict(params)
        if config is None:
            raise ValueError("config is required with bound tensors")
    return forward_batch(stacked, bound, config, _as_context(adjacency, stacked.shape[2]), tape)


def predict_batches(
    params: ModelParams,
    provider: AdjacencyProvider,
    inputs: np.ndarray,
    input_end_rows: np.ndarray,
    batch_size: int = 64,
) -> np.ndarray:
    """Normalized forecasts (M, N, horizon) for stacked windows, evaluated in fixed-size batches."""
    bound = params.bind()
    m, _, n, _ = inputs.shape
    out = np.zeros((m, n, params.horizon))
    for start in range(0, m, batch_size):
        stop = min(start + batch_size, m)
        context = provider.context(bound, input_end_rows[start:stop])
        pred = forward_batch(inputs[start:stop], bound, params.config, context)
        out[start:stop] = pred.data.reshape(stop - start, n, params.horizon)
    return out


@dataclass(frozen=True)
class Checkpoint:
    """Everything needed to reuse a trained model without its training inputs."""

    config: RunConfig
    params: ModelParams
    node_names: Tuple[str, ...]
    normalizer: Normalizer
    adjacency: Optional[np.ndarray] = None
    best_epoch: Optional[int] = None

    def to_dict(self) -> Dict[str, object]:
        return {
            "version": CHECKPOINT_VERSION,
            "config": json.loads(self.config.to_json()),
            "n_features": self.params.n_features,
            "best_epoch": self.best_epoch,
            "tensors": self.params.to_tensors_json(),
            "node_names": list(self.node_names),
            "normalizer": self.normalizer.to_dict(),
            "adjacency": self.adjacency.tolist() if self.adjacency is not None else None,
        }

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)
        logger.info(f"Wrote checkpoint with {self.params.size} parameters to {path}")

    @classmethod
    def from_dict(cls, payload: Mapping[str, object]) -> "Checkpoint":
        from pydantic import ValidationError

        if payload.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint version {payload.get('version')!r}")
        for key in ("config", "tensors", "node_names", "normalizer"):
            if key not in payload:
                raise CheckpointError(f"Checkpoint has no '{key}' entry")
        try:
            config = RunConfig.model_validate(payload["config"])
        except ValidationError as e:
            raise CheckpointError(f"Checkpoint config is invalid: {e}") from e
        node_names = tuple(str(n) for n in payload["node_names"])  # type: ignore[attr-defined]
        n = len(node_names)
        extra = {"adjacency.E": (n, config.graph.embedding_dim)} if config.graph.adjacency == "learnable" else {}
        params = ModelParams.from_tensors_json(
            config.model,
            int(payload.get("n_features", 1)),  # type: ignore[arg-type]
            config.data.horizon,
            payload["tensors"],  # type: ignore[arg-type]
            extra,
        )
        try:
            normalizer = Normalizer.from_dict(payload["normalizer"])  # type: ignore[arg-type]
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"Checkpoint normalizer is invalid: {e}") from e
        if normalizer.center.shape != (n,) or normalizer.scale.shape != (n,):
            raise CheckpointError(f"Normalizer statistics do not cover {n} nodes")
        adjacency = payload.get("adjacency")
        a = np.asarray(adjacency, dtype=np.float64) if adjacency is not None else None
        if a is not None and a.shape != (n, n):
            raise CheckpointError(f"Stored adjacency is {a.shape}, expected {n}x{n}")
        best = payload.get("best_epoch")
        best_epoch = int(best) if best is not None else None  # type: ignore[call-overload]
        return cls(config, params, node_names, normalizer, a, best_epoch)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        """
        Read a checkpoint JSON document.

        Raises:
            CheckpointError: Parse failures (with line and column) or inconsistent content.
        """
        try:
            with open(path) as f:
                payload = json.load(f)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
        if not isinstance(payload, dict):
            raise CheckpointError(f"{path}: checkpoint must be a JSON object")
        return cls.from_dict(payload)
