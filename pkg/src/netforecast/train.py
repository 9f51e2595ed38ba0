"""Loss, optimizer and the seeded mini-batch training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import diffcore as dc
from .config import RunConfig, TrainConfig, derive_seed
from .data import Normalizer, WindowedDataset
from .diffcore import Tape, Tensor
from .evaluation import R2UndefinedError, mae, r2, rmse
from .graph import AdjacencyProvider
from .model import ModelParams, forward_batch, predict_batches

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_mae", "val_rmse", "val_r2", "seconds")


class TrainingDivergedError(RuntimeError):
    """Raised when a loss, gradient or validation metric stops being finite."""

    pass


def mse_loss(pred: dc.ArrayLike, target: dc.ArrayLike) -> Tensor:
    """Mean over all elements of ``(pred - target)^2``."""
    return dc.mean_all(dc.square(dc.sub(pred, target)))


@dataclass
class AdamState:
    """First and second moments per parameter plus the step count."""

    step: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(
            0,
            {name: np.zeros_like(p) for name, p in params.values.items()},
            {name: np.zeros_like(p) for name, p in params.values.items()},
        )


def adam_step(
    params: ModelParams, grads: Mapping[str, np.ndarray], state: AdamState, config: TrainConfig
) -> Tuple[ModelParams, AdamState]:
    """
    One bias-corrected Adam update.

    Raises:
        TrainingDivergedError: A gradient has non-finite entries (the tensor is named).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"Non-finite gradient for tensor '{name}'")
    step = state.step + 1
    b1, b2 = config.beta1, config.beta2
    corr1 = 1.0 - b1**step
    corr2 = 1.0 - b2**step
    new_values: Dict[str, np.ndarray] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for name, p in params.values.items():
        if name not in state.m or state.m[name].shape != p.shape:
            raise dc.DimensionError(f"Optimizer state for '{name}' does not match the parameter shape {p.shape}")
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_m[name], new_v[name] = m, v
        new_values[name] = p - config.lr * (m / corr1) / (np.sqrt(v / corr2) + config.eps)
    return params.replace(new_values), AdamState(step, new_m, new_v)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm


def batch_loss(
    params: ModelParams,
    provider: AdjacencyProvider,
    inputs: np.ndarray,
    targets: np.ndarray,
    input_end_rows: np.ndarray,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss on one batch and its gradient for every parameter."""
    tape = Tape()
    bound = params.bind(tape)
    context = provider.context(bound, input_end_rows)
    pred = forward_batch(inputs, bound, params.config, context, tape)
    loss = mse_loss(pred, targets.reshape(-1, targets.shape[-1]))
    dc.backward(tape, loss)
    return loss.item(), {name: tape.grad(t) for name, t in bound.items()}


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    val_rmse: float
    val_r2: float
    seconds: Optional[float] = None


@dataclass
class TrainHistory:
    """Per-epoch records; ``best_epoch`` is the 1-based epoch of the returned snapshot."""

    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.records)

    @property
    def best(self) -> EpochRecord:
        return self.records[self.best_epoch - 1]

    def column(self, name: str) -> List[float]:
        return [getattr(r, name) for r in self.records]

    def to_csv(self, path: Union[str, Path], run_config: Optional[RunConfig] = None) -> None:
        with open(path, "w", newline="") as f:
            if run_config is not None:
                f.write(f"# run_config={run_config.to_json()}\n")
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(HISTORY_COLUMNS)
            for r in self.records:
                writer.writerow(
                    [
                        r.epoch,
                        repr(r.train_loss),
                        repr(r.val_mae),
                        repr(r.val_rmse),
                        repr(r.val_r2),
                        "" if r.seconds is None else f"{r.seconds:.3f}",
                    ]
                )
        logger.info(f"Wrote {len(self.records)} epochs of history to {path}")


def _validate(
    params: ModelParams, provider: AdjacencyProvider, dataset: WindowedDataset, normalizer: Normalizer, batch_size: int
) -> Tuple[float, float, float]:
    pred = predict_batches(params, provider, dataset.inputs, dataset.input_end_rows(), batch_size)
    pred = normalizer.inverse(pred, node_axis=1)
    truth = normalizer.inverse(dataset.targets, node_axis=1)
    if not np.all(np.isfinite(pred)):
        raise TrainingDivergedError("Validation predictions are not finite")
    try:
        score = r2(pred, truth)
    except R2UndefinedError:
        score = float("nan")
    return mae(pred, truth), rmse(pred, truth), score


def train(
    train_set: WindowedDataset,
    val_set: WindowedDataset,
    config: RunConfig,
    provider: AdjacencyProvider,
    normalizer: Normalizer,
    params: Optional[ModelParams] = None,
) -> Tuple[ModelParams, TrainHistory]:
    """
    Fit the model with Adam on shuffled mini-batches and early stopping on validation MAE.

    Args:
        train_set: Normalized training windows.
        val_set: Normalized validation windows.
        config: Run configuration; ``config.seed`` drives initialization and shuffling.
        provider: Graph for each batch.
        normalizer: Maps forecasts back to original units for validation metrics.
        params: Starting point; freshly initialized when omitted.

    Returns:
        The snapshot with the lowest validation MAE and the per-epoch history.

    Raises:
        TrainingDivergedError: Non-finite loss (with epoch and batch) or gradient.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train() needs nonempty train and validation splits")
    tc = config.train
    if params is None:
        params = ModelParams.init(
            config.model,
            train_set.n_features,
            train_set.horizon,
            derive_seed(config.seed, "init"),
            provider.param_shapes(),
        )
    rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    state = AdamState.zeros(params)
    history = TrainHistory()
    best_params, best_mae, waited = params, math.inf, 0
    end_rows = train_set.input_end_rows()
    m = len(train_set)

    epochs = tqdm(range(1, tc.epochs + 1), desc="epochs", disable=not tc.progress)
    for epoch in epochs:
        started = time.perf_counter()
        order = rng.permutation(m)
        total = 0.0
        for batch, start in enumerate(range(0, m, tc.batch_size)):
            idx = order[start : start + tc.batch_size]
            loss, grads = batch_loss(params, provider, train_set.inputs[idx], train_set.targets[idx], end_rows[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"Loss became non-finite at epoch {epoch}, batch {batch}")
            if tc.clip_norm is not None:
                grads, norm = clip_grad_norm(grads, tc.clip_norm)
                logger.debug(f"epoch {epoch} batch {batch}: loss {loss:.6g} grad norm {norm:.4g}")
            params, state = adam_step(params, grads, state, tc)
            total += loss * len(idx)

        val_mae, val_rmse, val_r2 = _validate(params, provider, val_set, normalizer, config.eval.batch_size)
        record = EpochRecord(
            epoch,
            total / m,
            val_mae,
            val_rmse,
            val_r2,
            time.perf_counter() - started if tc.record_wall_clock else None,
        )
        history.records.append(record)
        logger.info(
            f"epoch {epoch}: train_loss={record.train_loss:.6g} val_mae={val_mae:.6g} "
            f"val_rmse={val_rmse:.6g} val_r2={val_r2:.4f}"
        )
        if tc.progress:
            epochs.set_postfix(val_mae=f"{val_mae:.4g}")

        if val_mae < best_mae:
            best_params, best_mae, waited = params, val_mae, 0
            history.best_epoch = epoch
        else:
            waited += 1
            if waited >= tc.patience:
                history.stopped_early = True
                logger.info(f"Early stop at epoch {epoch}; best epoch {history.best_epoch} (val_mae={best_mae:.6g})")
                break
    return best_params, history
