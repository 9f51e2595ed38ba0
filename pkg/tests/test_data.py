import math

import numpy as np
import pytest

from netforecast.data import (
    DegenerateSeriesError,
    DomainError,
    InsufficientDataError,
    OrderingError,
    SchemaError,
    SplitError,
    SyntheticOptions,
    TrafficSeries,
    chrono_split,
    fit_transform,
    generate_synthetic,
    load_traffic_csv,
    make_windows,
    time_of_day_features,
)
from netforecast.graph import Topology


def _write(tmp_path, text, name="traffic.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _series(values, start=0, cadence=300):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    names = tuple(f"n{i}" for i in range(values.shape[1]))
    return TrafficSeries(start + cadence * np.arange(values.shape[0]), values, names)


def test_load_smoke(tmp_path):
    path = _write(tmp_path, "timestamp,a,b\n0,1.5,2\n300,3,4\n600,5,6.25\n")
    series = load_traffic_csv(path, ["a", "b"])
    assert (series.n_steps, series.n_nodes) == (3, 2)
    assert series.values[2, 1] == 6.25
    assert series.cadence == 300
    assert series.units == "bytes/s"


def test_load_matches_columns_by_name(tmp_path):
    ordered = load_traffic_csv(_write(tmp_path, "timestamp,a,b\n0,1,2\n60,3,4\n", "o.csv"), ["a", "b"])
    shuffled = load_traffic_csv(_write(tmp_path, "timestamp,b,a\n0,2,1\n60,4,3\n", "s.csv"), ["a", "b"])
    assert np.array_equal(ordered.values, shuffled.values)
    assert np.array_equal(ordered.timestamps, shuffled.timestamps)


@pytest.mark.parametrize("sep", ["->", "→"])
def test_load_aggregates_links(tmp_path, sep):
    path = _write(tmp_path, f"timestamp,a{sep}b,b{sep}a\n0,5,7\n")
    series = load_traffic_csv(path, Topology(("a", "b"), ((0, 1, 1.0),)))
    assert series.values.tolist() == [[12.0, 12.0]]


@pytest.mark.parametrize(
    "header,fragment",
    [
        ("a->b,a->b", "Duplicate link"),
        ("a->b,a→b", "Duplicate link"),
        ("a->b,a", "overlaps a link"),
        ("a,a->b", "overlaps the node"),
        ("a,b,a", "Duplicate column"),
    ],
)
def test_load_rejects_duplicated_columns(tmp_path, header, fragment):
    row = ",".join("1" for _ in header.split(","))
    path = _write(tmp_path, f"timestamp,{header}\n0,{row}\n")
    with pytest.raises(SchemaError, match=fragment):
        load_traffic_csv(path, ["a", "b"])


def test_load_iso_timestamps_and_comments(tmp_path):
    text = "# exported\ntimestamp,a\n2024-01-01T00:00:00Z,1\n2024-01-01T00:05:00,2\n"
    series = load_traffic_csv(_write(tmp_path, text), ["a"])
    assert series.timestamps.tolist() == [1704067200, 1704067500]


@pytest.mark.parametrize(
    "text,error,fragment",
    [
        ("timestamp,a,zz\n0,1,2\n", SchemaError, "zz"),
        ("timestamp,a\n0,1\n", SchemaError, "Missing"),
        ("time,a,b\n0,1,2\n", SchemaError, "Line 1"),
        ("timestamp,a,b\n0,1,2\n0,3,4\n", OrderingError, "Line 3"),
        ("timestamp,a,b\n0,1,2\n60,-3,4\n", DomainError, "Line 3"),
        ("timestamp,a,b\n0,1\n", SchemaError, "Line 2"),
        ("timestamp,a,b\nyesterday,1,2\n", SchemaError, "Line 2"),
        ("timestamp,a,b\n0,1,nan\n", DomainError, "Line 2"),
    ],
)
def test_load_errors(tmp_path, text, error, fragment):
    with pytest.raises(error, match=fragment):
        load_traffic_csv(_write(tmp_path, text), ["a", "b"])


def test_series_checks_ordering_and_domain():
    with pytest.raises(OrderingError):
        TrafficSeries(np.array([0, 5, 5]), np.ones((3, 1)), ("a",))
    with pytest.raises(DomainError):
        TrafficSeries(np.array([0, 5]), np.array([[1.0], [-1.0]]), ("a",))


def test_csv_round_trip_is_exact(tmp_path, small_series):
    path = tmp_path / "series.csv"
    small_series.to_csv(path, header_comment="seed 7")
    again = load_traffic_csv(path, small_series.node_names)
    assert np.array_equal(again.values, small_series.values)
    assert np.array_equal(again.timestamps, small_series.timestamps)


def test_zscore_statistics_use_training_rows():
    values = np.stack([np.arange(10.0), 2.0 * np.arange(10.0) + 1.0], axis=1)
    normalized, normalizer = fit_transform(_series(values), "zscore", train_fraction=0.5)
    assert normalizer.fitted_rows == 5
    assert np.allclose(normalizer.center, [2.0, 5.0])
    assert np.allclose(normalizer.scale, [math.sqrt(2.0), 2.0 * math.sqrt(2.0)])
    assert normalized.units == "normalized"
    assert np.allclose(normalized.values[:5].mean(axis=0), 0.0, atol=1e-12)


def test_minmax_maps_training_range_to_unit_interval():
    normalized, _ = fit_transform(_series(np.arange(10.0) + 100.0), "minmax", train_fraction=0.5)
    assert normalized.values[0, 0] == 0.0 and normalized.values[4, 0] == 1.0


def test_inverse_round_trip(small_series):
    normalized, normalizer = fit_transform(small_series)
    back = normalizer.inverse(normalized.values)
    assert np.allclose(back, small_series.values, rtol=1e-9, atol=0)


def test_normalizer_ignores_rows_after_training():
    values = np.random.default_rng(0).uniform(1, 2, size=(20, 2))
    _, first = fit_transform(_series(values), train_fraction=0.5)
    values[10:] *= 1000.0
    _, second = fit_transform(_series(values), train_fraction=0.5)
    assert np.array_equal(first.center, second.center)
    assert np.array_equal(first.scale, second.scale)


def test_constant_training_node_is_named():
    values = np.stack([np.arange(10.0), np.full(10, 3.0)], axis=1)
    with pytest.raises(DegenerateSeriesError) as exc:
        fit_transform(_series(values))
    assert exc.value.node == "n1"


def test_normalizer_dict_round_trip(small_series):
    _, normalizer = fit_transform(small_series)
    again = type(normalizer).from_dict(normalizer.to_dict())
    assert np.array_equal(again.center, normalizer.center)
    assert again.fitted_rows == normalizer.fitted_rows


def test_window_count_example():
    assert len(make_windows(_series(np.arange(10.0)), window=5)) == 5


def test_windows_exhaustive_small_series():
    for t in range(2, 13):
        series = _series(np.arange(t, dtype=np.float64) + 1.0)
        for window in range(1, t):
            for horizon in range(1, t - window + 1):
                for stride in (1, 2, 3):
                    ds = make_windows(series, window, horizon, stride)
                    assert len(ds) == (t - window - horizon) // stride + 1
                    for m in range(len(ds)):
                        start, target_start, target_end = ds.time_range(m)
                        assert start == m * stride
                        assert ds.inputs[m, :, 0, 0].tolist() == list(range(start + 1, target_start + 1))
                        assert ds.targets[m, 0].tolist() == list(range(target_start + 1, target_end + 1))
                        assert target_end <= t


def test_windows_need_enough_rows():
    with pytest.raises(InsufficientDataError, match="6"):
        make_windows(_series(np.arange(5.0)), window=5, horizon=1)


def test_windows_with_time_features():
    series = _series(np.ones((30, 2)) + np.arange(30.0)[:, None], cadence=3600)
    ds = make_windows(series, window=4, time_features=True)
    assert ds.inputs.shape == (26, 4, 2, 3)
    assert np.allclose(ds.inputs[0, 0, 0, 1:], time_of_day_features(np.array([0]))[0])
    assert ds.target_timestamps()[0] == 4 * 3600


def test_chrono_split_sizes_and_order():
    ds = make_windows(_series(np.arange(14.0)), window=4)
    train, val, test = chrono_split(ds, (0.6, 0.2, 0.2))
    assert (len(train), len(val), len(test)) == (6, 2, 2)
    assert train.starts.max() < val.starts.min() and val.starts.max() < test.starts.min()


@pytest.mark.parametrize("fractions", [(0.5, 0.5), (0.7, 0.2, 0.2), (0.8, 0.0, 0.2), (1.2, -0.1, -0.1)])
def test_chrono_split_rejects_fractions(fractions):
    ds = make_windows(_series(np.arange(14.0)), window=4)
    with pytest.raises(SplitError):
        chrono_split(ds, fractions)


def test_chrono_split_rejects_empty_split():
    ds = make_windows(_series(np.arange(8.0)), window=4)
    with pytest.raises(SplitError):
        chrono_split(ds, (0.7, 0.1, 0.2))


def test_purge_drops_overlapping_samples():
    ds = make_windows(_series(np.arange(60.0)), window=4, horizon=2)
    train, val, test = chrono_split(ds, (0.6, 0.2, 0.2), purge=True)
    assert val.starts.min() >= train.starts.max() + 4 + 2
    assert test.starts.min() >= val.starts.max() + 4 + 2
    plain = chrono_split(ds, (0.6, 0.2, 0.2))
    assert len(val) < len(plain[1])


def test_synthetic_is_periodic_without_noise_or_coupling(ring5):
    options = SyntheticOptions(coupling=0.0, noise=0.0, period=24)
    values = generate_synthetic(ring5, 96, seed=1, options=options).values
    assert np.allclose(values[:72], values[24:], rtol=1e-9, atol=0)


def test_synthetic_couples_neighbors(abilene):
    options = SyntheticOptions(coupling=0.5, amplitude=0.0)
    values = generate_synthetic(abilene, 3000, seed=2, options=options).values
    corr = np.corrcoef(values.T)
    neighbors = abilene.neighbors()
    near = [corr[i, j] for i in range(11) for j in neighbors[i]]
    far = [corr[i, j] for i in range(11) for j in range(11) if j != i and j not in neighbors[i]]
    assert np.mean(near) > np.mean(far) + 0.1


def test_synthetic_is_deterministic(abilene):
    a = generate_synthetic(abilene, 100, seed=3)
    b = generate_synthetic(abilene, 100, seed=3)
    c = generate_synthetic(abilene, 100, seed=4)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert a.node_names == abilene.node_names
    assert np.all(a.values >= 0.0)
    assert a.timestamps[1] - a.timestamps[0] == 300


def test_synthetic_regime_switch_changes_coupling(ring5):
    options = SyntheticOptions(coupling=0.5, amplitude=0.0, switch_step=1000, switch_edges=((0, 2), (1, 3)))
    values = generate_synthetic(ring5, 2000, seed=5, options=options).values
    before = np.corrcoef(values[:1000].T)
    after = np.corrcoef(values[1000:].T)
    assert before[0, 1] > before[0, 2]
    assert after[0, 2] > after[0, 1]
