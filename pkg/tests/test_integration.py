import pytest

from netforecast.config import load_config
from netforecast.data import generate_synthetic
from netforecast.evaluation import run_ablation
from netforecast.experiment import Experiment

pytestmark = pytest.mark.slow

STATIC_METHODS = ("distance", "correlation", "knn", "adaptive")


@pytest.fixture
def abilene_week(abilene):
    return generate_synthetic(abilene, 2016, seed=0)


def test_default_model_beats_persistence(abilene_week, abilene):
    result = Experiment(load_config(), abilene_week, abilene).run()
    assert result.report.mae <= 0.8 * result.baseline.mae
    assert result.report.r2 is not None and result.report.r2 >= 0.90


def test_every_adjacency_method_trains(abilene_week, abilene):
    config = load_config(overrides={"train.epochs": 60})
    grid = run_ablation(config, "adjacency", abilene_week, abilene)
    assert [cell.status for cell in grid.cells] == ["ok"] * 5
    by_method = {cell.delta.split("=")[1]: cell for cell in grid.cells}
    for cell in grid.cells:
        assert cell.report.r2 > 0.0
    static = [by_method[m].mae for m in STATIC_METHODS]
    assert by_method["learnable"].mae <= max(static)
