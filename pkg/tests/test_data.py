import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtsloc.data import (AnomalySpec, SeriesMatrix, WvsConfig, denormalize, generate_wvs, inject_anomalies,
                         label_segments, load_labels_csv, load_series_csv, runs, window_split, zscore_normalize)
from mtsloc.errors import ConfigError, IngestionError


def small_wvs(**kw):
    base = dict(length=2000, train_fraction=0.5, seed=3)
    base.update(kw)
    return WvsConfig(**base)


# -- generate_wvs -------------------------------------------------------------

def test_no_anomalies_gives_empty_labels():
    ds = generate_wvs(small_wvs())
    assert ds.dim_labels.sum() == 0
    assert ds.point_labels.sum() == 0
    assert ds.segments == []


def test_default_groups_and_amplitudes():
    cfg = WvsConfig(length=20000)
    ds = generate_wvs(cfg)
    freqs = np.asarray(ds.meta["frequencies"])
    counts = [int((freqs == f).sum()) for f in cfg.frequencies]
    assert counts == [1, 3, 3, 3]
    amps = np.asarray(ds.meta["amplitudes"])
    assert amps.min() >= 2 and amps.max() <= 3
    phases = np.asarray(ds.meta["phases"])
    assert phases.min() >= 0 and phases.max() <= math.pi / 2
    assert ds.train.length + ds.test.length == 20000


def test_constant_outlier_cell_count():
    spec = AnomalySpec(3, 100, 120, "constant_outlier")
    ds = generate_wvs(small_wvs(anomaly_specs=(spec,)))
    expected = np.zeros_like(ds.dim_labels)
    expected[100:121, 3] = 1
    assert ds.dim_labels.sum() == 21
    assert np.array_equal(ds.dim_labels, expected)
    assert ds.segments == [(100, 120, (3,))]


def test_generate_is_deterministic():
    specs = (AnomalySpec(1, 10, 30, "additive_sine"), AnomalySpec(4, 50, 60, "additive_offset"))
    a = generate_wvs(small_wvs(anomaly_specs=specs))
    b = generate_wvs(small_wvs(anomaly_specs=specs))
    assert np.array_equal(a.train.values, b.train.values)
    assert np.array_equal(a.test.values, b.test.values)
    assert np.array_equal(a.dim_labels, b.dim_labels)
    c = generate_wvs(small_wvs(seed=4))
    assert not np.array_equal(a.train.values, c.train.values)


def test_anomalies_only_touch_test_portion():
    clean = generate_wvs(small_wvs())
    dirty = generate_wvs(small_wvs(anomaly_specs=(AnomalySpec(0, 5, 9, "additive_offset", {"offset": 4.0}),)))
    assert np.array_equal(clean.train.values, dirty.train.values)
    diff = dirty.test.values - clean.test.values
    assert np.allclose(diff[5:10, 0], 4.0)
    diff[5:10, 0] = 0
    assert not diff.any()


def test_invalid_wvs_configs():
    with pytest.raises(ConfigError):
        generate_wvs(WvsConfig(group_sizes=(1, 3, 3), length=100))
    with pytest.raises(ConfigError):
        generate_wvs(WvsConfig(n_series=9, length=100))
    with pytest.raises(ConfigError):
        generate_wvs(WvsConfig(amplitude_range=(3.0, 2.0), length=100))
    with pytest.raises(ConfigError):
        generate_wvs(small_wvs(anomaly_specs=(AnomalySpec(10, 0, 1, "constant_outlier"),)))


def test_wvs_config_text_round_trip():
    cfg = small_wvs(anomaly_specs=(AnomalySpec(2, 3, 9, "additive_sine", {"frequency": 0.1, "amplitude": 2.5}),
                                   AnomalySpec(5, 20, 40, "constant_outlier")))
    again = WvsConfig.from_text(cfg.to_text())
    assert again == cfg
    assert WvsConfig.from_text(again.to_text()).to_text() == cfg.to_text()


# -- inject_anomalies ---------------------------------------------------------

@pytest.fixture
def noise():
    rng = np.random.default_rng(0)
    return SeriesMatrix.from_array(rng.normal(size=(120, 3)))


def test_empty_specs_is_identity(noise):
    out, labels = inject_anomalies(noise, [])
    assert np.array_equal(out.values, noise.values)
    assert labels.sum() == 0


def test_single_cell_offset(noise):
    out, labels = inject_anomalies(noise, [AnomalySpec(0, 10, 10, "additive_offset", {"offset": 5.0})])
    diff = out.values - noise.values
    assert diff[10, 0] == out.values[10, 0] - noise.values[10, 0]
    assert abs(diff[10, 0] - 5.0) < 1e-12
    diff[10, 0] = 0
    assert not diff.any()
    assert labels.sum() == 1 and labels[10, 0] == 1


def test_additive_sine_matches_independent_evaluation(noise):
    out, _ = inject_anomalies(noise, [AnomalySpec(1, 0, 99, "additive_sine", {"frequency": 0.05, "amplitude": 1.0})])
    expected = np.sin(2 * np.pi * 0.05 * np.arange(100))
    resid = (out.values[:100, 1] - noise.values[:100, 1]) - expected
    assert np.max(np.abs(resid)) < 1e-12


def test_constant_outlier_replaces(noise):
    out, _ = inject_anomalies(noise, [AnomalySpec(2, 5, 7, "constant_outlier", {"value": -9.0})])
    assert np.all(out.values[5:8, 2] == -9.0)


def test_overlapping_specs_rejected(noise):
    specs = [AnomalySpec(0, 10, 20, "additive_offset", {"offset": 1.0}),
             AnomalySpec(0, 20, 25, "constant_outlier", {"value": 1.0})]
    with pytest.raises(ConfigError):
        inject_anomalies(noise, specs)
    # same interval on a different series is fine
    inject_anomalies(noise, [specs[0], AnomalySpec(1, 10, 20, "constant_outlier", {"value": 1.0})])


def test_out_of_bounds_spec_rejected(noise):
    with pytest.raises(ConfigError):
        inject_anomalies(noise, [AnomalySpec(0, 110, 120, "additive_offset", {"offset": 1.0})])


def test_anomaly_spec_text_round_trip():
    spec = AnomalySpec(3, 4, 9, "additive_sine", {"amplitude": 6.0, "frequency": 0.1})
    assert AnomalySpec.from_text(spec.to_text()) == spec
    with pytest.raises(ConfigError):
        AnomalySpec.from_text("1:2:3:bogus")
    with pytest.raises(ConfigError):
        AnomalySpec(0, 5, 4, "constant_outlier")


@st.composite
def additive_specs(draw, length=60, d=3):
    specs = []
    used = np.zeros((length, d), dtype=bool)
    for _ in range(draw(st.integers(0, 4))):
        col = draw(st.integers(0, d - 1))
        t1 = draw(st.integers(0, length - 1))
        t2 = draw(st.integers(t1, min(length - 1, t1 + 10)))
        if used[t1 : t2 + 1, col].any():
            continue
        used[t1 : t2 + 1, col] = True
        if draw(st.booleans()):
            specs.append(AnomalySpec(col, t1, t2, "additive_offset", {"offset": draw(st.floats(0.5, 5))}))
        else:
            specs.append(AnomalySpec(col, t1, t2, "additive_sine", {"frequency": 0.07, "amplitude": 2.0}))
    return specs


@settings(max_examples=60, deadline=None)
@given(additive_specs())
def test_injection_locality_and_label_consistency(specs):
    x = SeriesMatrix.from_array(np.random.default_rng(1).normal(size=(60, 3)))
    out, labels = inject_anomalies(x, specs)
    diff = out.values - x.values
    assert not diff[labels == 0].any()
    ds_point = labels.any(axis=1)
    segs = label_segments(labels)
    covered = np.zeros(60, dtype=bool)
    for s, e, dims in segs:
        assert not covered[s : e + 1].any()
        covered[s : e + 1] = True
        assert labels[s : e + 1].any(axis=1).all()
        assert set(dims) == set(np.flatnonzero(labels[s : e + 1].any(axis=0)))
    assert np.array_equal(covered, ds_point)
    # maximality: neighbours of each segment are normal
    for s, e, _ in segs:
        assert s == 0 or not ds_point[s - 1]
        assert e == 59 or not ds_point[e + 1]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.booleans(), max_size=50))
def test_runs_partition_flags(flags):
    rebuilt = np.zeros(len(flags), dtype=bool)
    prev_end = -2
    for s, e in runs(flags):
        assert s > prev_end + 1
        rebuilt[s : e + 1] = True
        prev_end = e
    assert np.array_equal(rebuilt, np.asarray(flags, dtype=bool))


# -- load_series_csv ----------------------------------------------------------

def test_load_csv_without_header(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("1,2\n3,4\n5,6\n")
    x = load_series_csv(p)
    assert x.values.shape == (3, 2)
    assert np.array_equal(x.values, [[1, 2], [3, 4], [5, 6]])
    assert x.names == ("s0", "s1")


def test_load_csv_with_header(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1.5,2\n")
    x = load_series_csv(p, has_header=True)
    assert x.names == ("a", "b")
    assert x.length == 1


def test_load_csv_reports_bad_cell(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("1,x\n")
    with pytest.raises(IngestionError, match="row 1, column 2"):
        load_series_csv(p)


@pytest.mark.parametrize("text,match", [("", "empty"), ("1,2\n3\n", "row 2"), ("1,nan\n", "row 1, column 2")])
def test_load_csv_errors(tmp_path, text, match):
    p = tmp_path / "x.csv"
    p.write_text(text)
    with pytest.raises(IngestionError, match=match):
        load_series_csv(p)


def test_load_labels_broadcasts_point_labels(tmp_path):
    p = tmp_path / "y.csv"
    p.write_text("0\n1\n0\n")
    labels = load_labels_csv(p, (3, 4))
    assert labels.shape == (3, 4)
    assert labels[1].all() and not labels[0].any()
    p.write_text("0\n2\n0\n")
    with pytest.raises(IngestionError):
        load_labels_csv(p, (3, 4))


def test_series_matrix_invariants():
    with pytest.raises(ValueError):
        SeriesMatrix.from_array([[1.0, np.nan]])
    with pytest.raises(ValueError):
        SeriesMatrix(np.zeros((2, 2)), ("a", "a"))
    with pytest.raises(ValueError):
        SeriesMatrix(np.zeros((2, 2)), ("a",))


# -- normalization -------------------------------------------------------------

def test_constant_column_centered_only():
    x = SeriesMatrix.from_array(np.full((5, 1), 7.0))
    z, stats = zscore_normalize(x, x)
    assert np.all(z.values == 0)
    assert stats.centered_only[0]


def test_zscore_two_values():
    x = SeriesMatrix.from_array([[0.0], [2.0]])
    z, stats = zscore_normalize(x, x)
    assert np.array_equal(z.values[:, 0], [-1.0, 1.0])
    assert stats.mean[0] == 1.0 and stats.std[0] == 1.0


def test_zscore_uses_source_statistics_and_round_trips():
    rng = np.random.default_rng(2)
    train = SeriesMatrix.from_array(rng.normal(3, 2, size=(200, 3)))
    test = SeriesMatrix.from_array(rng.normal(0, 5, size=(50, 3)))
    z, stats = zscore_normalize(test, train)
    assert np.allclose(z.values, (test.values - train.values.mean(0)) / train.values.std(0))
    back = denormalize(z, stats)
    assert np.max(np.abs(back.values - test.values)) < 1e-9
    with pytest.raises(ValueError):
        zscore_normalize(SeriesMatrix.from_array(np.zeros((3, 2))), train)


# -- windowing -------------------------------------------------------------------

def test_window_split_examples():
    x = SeriesMatrix.from_array(np.arange(500.0).reshape(250, 2))
    w = window_split(x, 100)
    assert w.shape == (2, 100, 2)
    assert np.array_equal(w[0], x.values[:100]) and np.array_equal(w[1], x.values[100:200])
    x100 = x.slice(0, 100)
    assert np.array_equal(window_split(x100, 100)[0], x100.values)
    with pytest.raises(ValueError):
        window_split(x.slice(0, 99), 100)
    with pytest.raises(ValueError):
        window_split(x, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 80), st.integers(1, 4), st.integers(1, 80))
def test_window_partition(n, d, T):
    x = np.arange(n * d, dtype=float).reshape(n, d)
    if T > n:
        with pytest.raises(ValueError):
            window_split(x, T)
        return
    w = window_split(x, T)
    assert w.shape == (n // T, T, d)
    assert np.array_equal(w.reshape(-1, d), x[: (n // T) * T])
