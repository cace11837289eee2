import io
import json
import time
from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastersts import ModelConfig
from fastersts.data import (PEMS_DATASETS, DataError, NormStats, SidecarError, TrafficDataset, clean, convert_npz,
                            load_csv, mean_absolute_deviation, persistence_forecast, split_and_window,
                            synth_generate, window_counts, write_csv, write_rows)


def write_pair(tmp_path, text, meta=None, name="d"):
    csv_path = tmp_path / f"{name}.csv"
    csv_path.write_text(text)
    meta = meta if meta is not None else {"name": name, "interval_minutes": 5, "start": "2018-01-01T00:00:00"}
    (tmp_path / f"{name}.json").write_text(json.dumps(meta))
    return csv_path


def cfg(T=12, tau=12, N=2):
    return ModelConfig(N=N, T=T, tau=tau, H=4, d_e=2, num_layers=1)


class TestLoadCsv:
    def test_plain_values(self, tmp_path):
        ds = load_csv(write_pair(tmp_path, "1,2\n3,4\n5,6\n"))
        assert (ds.n_steps, ds.n_nodes) == (3, 2)
        np.testing.assert_array_equal(ds.values, [[1, 2], [3, 4], [5, 6]])

    def test_header_skipped(self, tmp_path):
        ds = load_csv(write_pair(tmp_path, "n0,n1\n1,2\n3,4\n"))
        np.testing.assert_array_equal(ds.values, [[1, 2], [3, 4]])

    def test_blank_cells_and_sentinel_become_nan(self, tmp_path):
        meta = {"name": "x", "interval_minutes": 5, "start": "2018-01-01T00:00:00Z", "missing_sentinel": -1}
        ds = load_csv(write_pair(tmp_path, "1,\n-1,4\n", meta))
        assert np.isnan(ds.values[0, 1]) and np.isnan(ds.values[1, 0])
        assert ds.start.tzinfo is not None

    def test_ragged_row_reports_row_number(self, tmp_path):
        with pytest.raises(DataError, match="row 3"):
            load_csv(write_pair(tmp_path, "1,2\n3,4\n5\n"))

    def test_non_numeric_cell(self, tmp_path):
        with pytest.raises(DataError, match="row 2"):
            load_csv(write_pair(tmp_path, "1,2\nx,4\n"))

    def test_missing_sidecar(self, tmp_path):
        (tmp_path / "lonely.csv").write_text("1,2\n")
        with pytest.raises(SidecarError, match="not found"):
            load_csv(tmp_path / "lonely.csv")

    @pytest.mark.parametrize("field", ["name", "interval_minutes", "start"])
    def test_missing_sidecar_field(self, tmp_path, field):
        meta = {"name": "x", "interval_minutes": 5, "start": "2018-01-01T00:00:00"}
        del meta[field]
        with pytest.raises(SidecarError, match=field):
            load_csv(write_pair(tmp_path, "1,2\n", meta))

    def test_bad_timestamp(self, tmp_path):
        meta = {"name": "x", "interval_minutes": 5, "start": "yesterday"}
        with pytest.raises(SidecarError):
            load_csv(write_pair(tmp_path, "1,2\n", meta))

    def test_empty(self, tmp_path):
        with pytest.raises(DataError, match="no data"):
            load_csv(write_pair(tmp_path, "n0,n1\n"))

    def test_write_then_load_round_trip(self, tmp_path):
        ds = synth_generate(3, 50, seed=4)
        write_csv(ds, tmp_path / "s.csv")
        back = load_csv(tmp_path / "s.csv")
        np.testing.assert_array_equal(back.values, ds.values)
        assert (back.interval_minutes, back.start, back.name) == (ds.interval_minutes, ds.start, ds.name)

    def test_convert_npz(self, tmp_path):
        arr = np.random.default_rng(0).uniform(0, 100, (20, 3, 3))
        np.savez(tmp_path / "p.npz", data=arr)
        ds = convert_npz(tmp_path / "p.npz", tmp_path / "p.csv", "2018-01-01T00:00:00")
        np.testing.assert_array_equal(load_csv(tmp_path / "p.csv").values, arr[..., 0])
        assert ds.name == "p"


class TestSlots:
    def test_tod_wraps_after_one_day(self):
        ds = TrafficDataset(np.zeros((300, 1)), 5, datetime(2018, 1, 1), "x")
        tod, dow = ds.slot_indices()
        assert tod[0] == 0 and tod[1] == 5 and tod[287] == 1435
        assert tod[288] == 0
        assert dow[0] == 0 and dow[288] == 1  # 2018-01-01 is a Monday

    def test_offset_start(self):
        ds = TrafficDataset(np.zeros((2, 1)), 5, datetime(2018, 1, 7, 23, 55), "x")
        tod, dow = ds.slot_indices()
        assert list(tod) == [1435, 0]
        assert list(dow) == [6, 0]


class TestClean:
    def test_midpoint(self):
        ds = TrafficDataset(np.array([[1.0], [np.nan], [3.0]]), 5, datetime(2018, 1, 1), "x")
        np.testing.assert_array_equal(clean(ds).values[:, 0], [1, 2, 3])

    def test_leading_fill(self):
        ds = TrafficDataset(np.array([[np.nan], [5.0], [5.0]]), 5, datetime(2018, 1, 1), "x")
        np.testing.assert_array_equal(clean(ds).values[:, 0], [5, 5, 5])

    def test_negative_treated_as_missing(self):
        ds = TrafficDataset(np.array([[2.0], [-1.0], [4.0], [np.nan]]), 5, datetime(2018, 1, 1), "x")
        np.testing.assert_array_equal(clean(ds).values[:, 0], [2, 3, 4, 4])

    def test_dead_node(self):
        ds = TrafficDataset(np.array([[1.0, np.nan], [2.0, np.nan]]), 5, datetime(2018, 1, 1), "x")
        with pytest.raises(DataError, match="node 1"):
            clean(ds)

    def test_does_not_mutate_input(self):
        v = np.array([[1.0], [np.nan], [3.0]])
        clean(TrafficDataset(v, 5, datetime(2018, 1, 1), "x"))
        assert np.isnan(v[1, 0])

    @pytest.mark.parametrize("name", sorted(PEMS_DATASETS))
    def test_altered_fraction_equals_missing_ratio(self, name):
        ratio = PEMS_DATASETS[name]["missing_pct"] / 100
        ds = synth_generate(20, 2000, seed=1)
        rng = np.random.default_rng(2)
        n_bad = round(ratio * ds.values.size)
        mask = np.zeros(ds.values.size, bool)
        mask[rng.choice(ds.values.size, n_bad, replace=False)] = True
        mask = mask.reshape(ds.values.shape)
        corrupted = ds.values.copy()
        corrupted[mask] = np.nan
        fixed = clean(TrafficDataset(corrupted, 5, ds.start, ds.name)).values
        altered = ~np.isclose(fixed, np.nan_to_num(corrupted, nan=-1.0), rtol=0, atol=0)
        assert altered.sum() / altered.size == pytest.approx(n_bad / ds.values.size, abs=0)
        assert not np.isnan(fixed).any()


class TestWindows:
    def test_pems04_counts(self):
        info = PEMS_DATASETS["PEMS04"]
        assert window_counts(info["steps"], 12, 12) == (10181, 3393, 3395)
        assert sum(window_counts(info["steps"], 12, 12)) == 16969

    def test_pems04_counts_by_enumeration(self):
        starts = [s for s in range(16992) if s + 24 <= 16992]
        n = len(starts)
        assert n == 16969
        n_train = n * 6 // 10
        n_val = n * 2 // 10
        assert (n_train, n_val, n - n_train - n_val) == (10181, 3393, 3395)

    def test_single_window_has_empty_train(self):
        ds = synth_generate(2, 24, seed=0)
        tr, va, te, _ = split_and_window(ds, cfg())
        assert (len(tr), len(va), len(te)) == (0, 0, 1)

    def test_too_short(self):
        with pytest.raises(DataError, match="shorter"):
            split_and_window(synth_generate(2, 23, seed=0), cfg())

    def test_nan_rejected(self):
        ds = synth_generate(2, 40, seed=0)
        ds.values[3, 1] = np.nan
        with pytest.raises(DataError, match="clean"):
            split_and_window(ds, cfg())

    def test_normalization_round_trip(self):
        stats = NormStats(213.7, 51.2)
        x = np.random.default_rng(0).uniform(0, 500, 1000)
        np.testing.assert_allclose(stats.denormalize(stats.normalize(x)), x, atol=1e-12, rtol=0)

    def test_stats_from_training_inputs_only(self):
        ds = synth_generate(3, 200, seed=3)
        tr, _, _, stats = split_and_window(ds, cfg(N=3))
        rows = ds.values[: tr.starts[-1] + 12]
        assert stats.mean == pytest.approx(rows.mean(), abs=1e-12)
        assert stats.std == pytest.approx(rows.std(), abs=1e-12)

    def test_constant_series_std_falls_back_to_one(self):
        ds = TrafficDataset(np.full((60, 2), 7.0), 5, datetime(2018, 1, 1), "flat")
        _, _, _, stats = split_and_window(ds, cfg())
        assert stats.std == 1.0

    def test_sample_contents(self):
        ds = synth_generate(3, 80, seed=5)
        tr, _, _, stats = split_and_window(ds, cfg(T=4, tau=3, N=3))
        tod, dow = ds.slot_indices()
        for i, (x, y, t, w) in enumerate(tr.samples):
            s = tr.starts[i]
            np.testing.assert_allclose(stats.denormalize(x[..., 0]), ds.values[s:s + 4], atol=1e-12)
            np.testing.assert_array_equal(y, ds.values[s + 4:s + 7].T)
            np.testing.assert_array_equal(t, tod[s:s + 4])
            np.testing.assert_array_equal(w, dow[s:s + 4])
        b = tr.batch([0, 2])
        assert b.x.shape == (2, 4, 3, 1) and b.y.shape == (2, 3, 3)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 400), st.integers(1, 12), st.integers(1, 12))
    def test_property_split_invariants(self, S, T, tau):
        if S < T + tau:
            with pytest.raises(DataError):
                window_counts(S, T, tau)
            return
        ds = TrafficDataset(np.arange(S * 2, dtype=float).reshape(S, 2), 5, datetime(2018, 1, 1), "r")
        tr, va, te, _ = split_and_window(ds, cfg(T=T, tau=tau))
        all_starts = np.concatenate([tr.starts, va.starts, te.starts])
        # exhaustive, disjoint, chronological
        np.testing.assert_array_equal(all_starts, np.arange(S - T - tau + 1))
        if len(tr) and len(va):
            assert tr.starts.max() < va.starts.min()
        if len(va) and len(te):
            assert va.starts.max() < te.starts.min()
        assert len(tr) == (S - T - tau + 1) * 6 // 10
        for split in (tr, va, te):
            if len(split) == 0:
                continue
            b = split.all()
            # y's first step follows x's last step; no window runs past the end
            x_last = split._raw[split.starts + T - 1]
            y_first = b.y[:, :, 0]
            np.testing.assert_array_equal(y_first, x_last + 2)
            assert split.starts.max() + T + tau <= S


class TestSynth:
    def test_same_seed_identical(self):
        a, b = synth_generate(4, 100, 7), synth_generate(4, 100, 7)
        assert a.values.tobytes() == b.values.tobytes()

    def test_different_seed_differs(self):
        assert not np.array_equal(synth_generate(4, 100, 7).values, synth_generate(4, 100, 8).values)

    def test_noise_free_is_daily_periodic(self):
        ds = synth_generate(3, 3 * 288, 1, noise=0.0, weekly=0.0)
        np.testing.assert_allclose(ds.values[288:], ds.values[:-288], atol=1e-9)
        assert not np.allclose(ds.values[144], ds.values[0])

    def test_fast_enough(self):
        t0 = time.perf_counter()
        synth_generate(8, 2016, 0)
        assert time.perf_counter() - t0 < 1.0

    def test_stdout_rows(self):
        buf = io.StringIO()
        write_rows(synth_generate(2, 3, 0), buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "n0,n1" and len(lines) == 4


def test_persistence_baseline():
    ds = synth_generate(3, 100, 2)
    _, _, te, _ = split_and_window(ds, cfg(T=4, tau=3, N=3))
    pred, truth = persistence_forecast(te)
    s = te.starts[0]
    np.testing.assert_array_equal(pred[0, :, 1], ds.values[s + 3])
    np.testing.assert_array_equal(truth, te.all().y)


def test_mean_absolute_deviation():
    assert mean_absolute_deviation(np.array([1.0, 3.0, 5.0, 7.0])) == 2.0
