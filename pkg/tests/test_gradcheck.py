"""End-to-end gradient checks: tape gradients of the batch loss against central differences."""

import numpy as np
import pytest

from netforecast.config import ModelConfig
from netforecast.diffcore import numerical_gradient
from netforecast.graph import LearnableProvider, StaticProvider, Topology, explicit_adjacency
from netforecast.model import ModelParams, forward_batch
from netforecast.train import batch_loss, mse_loss

N, W, B = 4, 5, 2


def _provider(kind):
    if kind == "learnable":
        return LearnableProvider(N, embedding_dim=3)
    return StaticProvider(explicit_adjacency(Topology.ring(N)))


def _config(attention, temporal):
    # smooth activations keep central differences away from relu kinks
    return ModelConfig(
        gcn_hidden=[3, 3],
        gcn_activation="tanh",
        attention=attention,
        attention_dim=3,
        attention_activation="leaky_relu",
        attention_slope=1.0,
        temporal=temporal,
        hidden=6,
        head_hidden=[4],
    )


@pytest.mark.parametrize("kind", ["explicit", "learnable"])
@pytest.mark.parametrize("temporal", ["gru", "lstm"])
@pytest.mark.parametrize("attention", [False, True])
def test_batch_loss_gradient(kind, temporal, attention):
    provider = _provider(kind)
    config = _config(attention, temporal)
    params = ModelParams.init(config, 1, 1, seed=13, extra_shapes=provider.param_shapes())
    rng = np.random.default_rng(14)
    inputs = rng.normal(size=(B, W, N, 1))
    targets = rng.normal(size=(B, N, 1))
    end_rows = np.array([W, W + 1])

    _, grads = batch_loss(params, provider, inputs, targets, end_rows)

    def loss_at(name):
        def fn(value):
            bound = params.replace({name: value}).bind()
            pred = forward_batch(inputs, bound, config, provider.context(bound, end_rows))
            return mse_loss(pred, targets.reshape(-1, 1)).item()

        return fn

    assert set(grads) == set(params.names())
    for name in params.names():
        numeric = numerical_gradient(loss_at(name), params[name], step=1e-6)
        scale = max(np.abs(numeric).max(), np.abs(grads[name]).max(), 1e-8)
        assert np.abs(grads[name] - numeric).max() / scale <= 1e-4, name
