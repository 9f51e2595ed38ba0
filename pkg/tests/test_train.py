import dataclasses

import numpy as np
import pytest

from netforecast.config import ModelConfig, derive_seed, with_overrides
from netforecast.diffcore import Tape, backward
from netforecast.experiment import Experiment
from netforecast.model import ModelParams
from netforecast.train import (
    HISTORY_COLUMNS,
    AdamState,
    TrainingDivergedError,
    adam_step,
    batch_loss,
    clip_grad_norm,
    global_norm,
    mse_loss,
    train,
)


@pytest.fixture
def experiment(fast_config, small_series, ring5):
    return Experiment(fast_config, small_series, ring5)


def _scalar_params(value=1.0):
    return ModelParams(ModelConfig(), 1, 1, {"x": np.array([[value]])})


def test_mse_examples():
    assert mse_loss([[1.0, 2.0]], [[1.0, 2.0]]).item() == 0.0
    assert mse_loss([[0.0]], [[2.0]]).item() == 4.0
    tape = Tape()
    pred = tape.watch([[1.0, 3.0]])
    backward(tape, mse_loss(pred, [[0.0, 0.0]]))
    assert np.allclose(tape.grad(pred), [[1.0, 3.0]])


def test_adam_zero_gradient_keeps_params(fast_config):
    params = _scalar_params()
    moved, state = adam_step(params, {"x": np.zeros((1, 1))}, AdamState.zeros(params), fast_config.train)
    assert moved["x"][0, 0] == 1.0
    assert state.step == 1


def test_adam_first_step_moves_by_learning_rate(fast_config):
    params = _scalar_params()
    cfg = fast_config.train.model_copy(update={"lr": 0.1})
    moved, _ = adam_step(params, {"x": np.array([[2.0]])}, AdamState.zeros(params), cfg)
    assert moved["x"][0, 0] == pytest.approx(0.9, abs=1e-8)


def test_adam_rejects_non_finite_gradient(fast_config):
    params = _scalar_params()
    with pytest.raises(TrainingDivergedError, match="'x'"):
        adam_step(params, {"x": np.array([[np.nan]])}, AdamState.zeros(params), fast_config.train)


def test_clip_grad_norm():
    grads = {"a": np.array([[3.0]]), "b": np.array([[4.0]])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == 5.0
    assert global_norm(clipped) == pytest.approx(1.0)
    assert clipped["a"][0, 0] / clipped["b"][0, 0] == pytest.approx(0.75)
    same, _ = clip_grad_norm(grads, 10.0)
    assert np.array_equal(same["a"], grads["a"])


@pytest.mark.parametrize("seed", range(10))
def test_gradient_step_decreases_loss(experiment, seed):
    data = experiment.prepare()
    provider = experiment.provider
    cfg = experiment.config
    params = ModelParams.init(cfg.model, 1, 1, seed, provider.param_shapes())
    batch = slice(0, 16)
    args = (data.train.inputs[batch], data.train.targets[batch], data.train.input_end_rows()[batch])
    loss, grads = batch_loss(params, provider, *args)
    stepped = params.replace({name: params[name] - 1e-3 * g for name, g in grads.items()})
    assert batch_loss(stepped, provider, *args)[0] < loss


def test_zero_learning_rate_stops_after_patience(small_series, ring5, fast_config):
    config = with_overrides(fast_config, {"train.lr": 0.0, "train.patience": 1, "train.epochs": 5})
    exp = Experiment(config, small_series, ring5)
    data = exp.prepare()
    params, history = train(data.train, data.val, config, exp.provider, data.normalizer)
    assert len(history) == 2
    assert history.best_epoch == 1
    assert history.stopped_early
    initial = ModelParams.init(config.model, 1, 1, derive_seed(config.seed, "init"), exp.provider.param_shapes())
    for name in initial.names():
        assert np.array_equal(params[name], initial[name])


def test_training_is_deterministic(small_series, ring5, fast_config):
    runs = []
    for _ in range(2):
        exp = Experiment(fast_config, small_series, ring5)
        runs.append(exp.train())
    (p1, h1), (p2, h2) = runs
    assert h1.column("train_loss") == h2.column("train_loss")
    assert h1.column("val_mae") == h2.column("val_mae")
    assert all(np.array_equal(p1[n], p2[n]) for n in p1.names())


def test_seed_changes_initialization(small_series, ring5, fast_config):
    other = with_overrides(fast_config, {"seed": 1})
    _, h1 = Experiment(fast_config, small_series, ring5).train()
    _, h2 = Experiment(other, small_series, ring5).train()
    assert h1.column("train_loss") != h2.column("train_loss")


def test_training_loss_goes_down(small_series, ring5, fast_config):
    config = with_overrides(fast_config, {"train.epochs": 5, "train.patience": 5})
    _, history = Experiment(config, small_series, ring5).train()
    losses = history.column("train_loss")
    assert losses[-1] < losses[0]
    assert history.best.val_mae == min(history.column("val_mae"))


def test_non_finite_inputs_diverge(experiment):
    data = experiment.prepare()
    poisoned = dataclasses.replace(data.train, inputs=np.full_like(data.train.inputs, np.nan))
    with pytest.raises(TrainingDivergedError, match="epoch 1, batch 0"):
        train(poisoned, data.val, experiment.config, experiment.provider, data.normalizer)


def test_history_csv(tmp_path, experiment):
    _, history = experiment.train()
    path = tmp_path / "history.csv"
    history.to_csv(path, experiment.config)
    lines = path.read_text().splitlines()
    assert lines[0] == f"# run_config={experiment.config.to_json()}"
    assert lines[1] == ",".join(HISTORY_COLUMNS)
    assert len(lines) == 2 + len(history)
    first = lines[2].split(",")
    assert first[0] == "1"
    assert float(first[1]) == history.records[0].train_loss
    assert first[-1] == ""


def test_wall_clock_is_recorded_on_request(small_series, ring5, fast_config):
    config = with_overrides(fast_config, {"train.epochs": 1, "train.record_wall_clock": True})
    _, history = Experiment(config, small_series, ring5).train()
    assert history.records[0].seconds is not None and history.records[0].seconds >= 0.0


@pytest.mark.parametrize("all_layers,warned", [(True, True), (False, False)])
def test_learnable_graph_hidden_by_attention_is_reported(caplog, small_series, ring5, fast_config, all_layers, warned):
    config = with_overrides(
        fast_config,
        {"graph.adjacency": "learnable", "model.attention": True, "model.attention_all_layers": all_layers},
    )
    with caplog.at_level("WARNING", logger="netforecast.experiment"):
        assert Experiment(config, small_series, ring5).provider.method == "learnable"
    assert ("learnable adjacency has no effect" in caplog.text) is warned
