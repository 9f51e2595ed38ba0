from pathlib import Path

import numpy as np
import pytest

from netforecast.config import load_config
from netforecast.data import SyntheticOptions, generate_synthetic
from netforecast.diffcore import Tape, backward, numerical_gradient, sum_all, hadamard
from netforecast.graph import Topology

ABILENE = Path(__file__).resolve().parent.parent / "data" / "abilene.json"

# small enough for a few seconds per training run
FAST_OVERRIDES = {
    "data.window": 6,
    "model.gcn_hidden": [8],
    "model.hidden": 8,
    "model.head_hidden": [8],
    "model.attention_dim": 4,
    "graph.adaptive_window": 48,
    "graph.adaptive_stride": 24,
    "graph.k": 2,
    "train.epochs": 3,
    "train.batch_size": 16,
    "train.lr": 0.005,
}


@pytest.fixture
def abilene():
    return Topology.from_json(ABILENE)


@pytest.fixture
def ring5():
    return Topology.ring(5)


@pytest.fixture
def small_series(ring5):
    return generate_synthetic(ring5, 240, seed=7, options=SyntheticOptions(period=48))


@pytest.fixture
def fast_config():
    return load_config(overrides=FAST_OVERRIDES)


@pytest.fixture
def check_gradient():
    """Compare the tape gradient of ``sum(op(x) * weights)`` with central differences."""

    def check(op, x, rtol=1e-5, atol=1e-8, seed=0):
        x = np.asarray(x, dtype=np.float64)
        out_shape = op(x).shape
        weights = np.random.default_rng(seed).uniform(-1.0, 1.0, size=out_shape)

        tape = Tape()
        leaf = tape.watch(x)
        loss = sum_all(hadamard(op(leaf), weights))
        backward(tape, loss)
        analytic = tape.grad(leaf)

        numeric = numerical_gradient(lambda v: sum_all(hadamard(op(v), weights)).item(), x)
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1.0)
        assert np.abs(analytic - numeric).max() <= rtol * scale + atol
        return analytic

    return check
