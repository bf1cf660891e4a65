import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsttn.checkpoint import load_dataset, save_dataset
from hsttn.data import (
    InvalidRule,
    NormStats,
    RecordSet,
    Schema,
    SplitBounds,
    apply_zscore,
    default_invalid_rules,
    drop_fully_invalid,
    fit_zscore,
    invert_zscore,
    load_records,
    make_windows,
    mark_invalid,
    synth_generate,
    write_csv,
)
from hsttn.errors import ConfigError, DatasetError, IngestError


def small_schema():
    return Schema(channels=("Wspd", "Wdir", "Patv"), nacelle_direction=None)


def write_rows(path, header, rows):
    lines = [",".join(header)] + [",".join(str(c) for c in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


HEADER = ["TurbID", "Day", "Tmstamp", "Wspd", "Wdir", "Patv"]


class TestLoadRecords:
    def test_full_grid(self, tmp_path):
        rows = []
        for turb in (1, 2):
            for slot, stamp in enumerate(["00:00", "00:10", "00:20"]):
                rows.append([turb, 1, stamp, 5.0 + slot, 10.0, 100.0 * turb])
        path = tmp_path / "farm.csv"
        write_rows(path, HEADER, rows)
        rs = load_records(path, small_schema())
        assert rs.values.shape == (2, 3, 3)
        assert rs.validity.all()
        assert rs.turbine_ids == (1, 2)

    def test_missing_target_cell_invalidates_record(self, tmp_path):
        rows = [
            [1, 1, "00:00", 5.0, 10.0, 100.0],
            [1, 1, "00:10", 5.0, 10.0, ""],
        ]
        path = tmp_path / "farm.csv"
        write_rows(path, HEADER, rows)
        rs = load_records(path, small_schema())
        assert rs.values.shape == (1, 2, 3)
        assert rs.validity[0, 0]
        assert not rs.validity[0, 1]

    def test_gap_in_grid_is_invalid(self, tmp_path):
        rows = [
            [1, 1, "00:00", 5.0, 10.0, 100.0],
            [1, 1, "00:20", 5.0, 10.0, 100.0],
        ]
        path = tmp_path / "farm.csv"
        write_rows(path, HEADER, rows)
        rs = load_records(path, small_schema())
        assert rs.values.shape == (1, 3, 3)
        assert not rs.validity[0, 1]

    def test_default_schema_has_13_channels(self, tmp_path):
        schema = Schema.default()
        assert len(schema.channels) == 13
        rs = synth_generate(2, 4, 13, seed=0)
        assert rs.values.shape == (2, 4, 13)
        path = tmp_path / "farm.csv"
        write_csv(rs, path)
        reloaded = load_records(path, rs.schema)
        assert reloaded.n_channels == 13

    def test_non_finite_value_invalidates_record(self, tmp_path):
        rows = [
            [1, 1, "00:00", 5.0, 10.0, "nan"],
            [1, 1, "00:10", 5.0, 10.0, 100.0],
        ]
        path = tmp_path / "farm.csv"
        write_rows(path, HEADER, rows)
        rs = load_records(path, small_schema())
        assert not rs.validity[0, 0]
        assert rs.validity[0, 1]

    def test_unknown_column_rejected(self, tmp_path):
        path = tmp_path / "farm.csv"
        write_rows(path, HEADER + ["Mystery"],
                   [[1, 1, "00:00", 5.0, 10.0, 100.0, 1.0]])
        with pytest.raises(IngestError, match="Mystery"):
            load_records(path, small_schema())

    def test_unparseable_numeric_names_row(self, tmp_path):
        path = tmp_path / "farm.csv"
        write_rows(path, HEADER, [[1, 1, "00:00", "abc", 10.0, 100.0]])
        with pytest.raises(IngestError, match=":2"):
            load_records(path, small_schema())

    def test_duplicate_record_rejected(self, tmp_path):
        path = tmp_path / "farm.csv"
        write_rows(path, HEADER, [
            [1, 1, "00:00", 5.0, 10.0, 100.0],
            [1, 1, "00:00", 6.0, 11.0, 101.0],
        ])
        with pytest.raises(IngestError, match="duplicate"):
            load_records(path, small_schema())


class TestMarkInvalid:
    def make_rs(self, patv, wspd=5.0, wdir=0.0):
        values = np.zeros((1, len(patv), 3))
        values[0, :, 0] = wspd
        values[0, :, 1] = wdir
        values[0, :, 2] = patv
        return RecordSet(schema=small_schema(), values=values,
                         validity=np.ones((1, len(patv)), dtype=bool), turbine_ids=(1,))

    def test_empty_rules_keep_mask(self):
        rs = self.make_rs([1.0, 2.0])
        assert np.array_equal(mark_invalid(rs, []).validity, rs.validity)

    def test_negative_target_flagged(self):
        rs = self.make_rs([-5.0, 3.0])
        out = mark_invalid(rs, default_invalid_rules(rs.schema))
        assert not out.validity[0, 0]
        assert out.validity[0, 1]

    def test_zero_output_in_wind_flagged(self):
        rs = self.make_rs([0.0, 10.0], wspd=6.0)
        out = mark_invalid(rs, default_invalid_rules(rs.schema))
        assert not out.validity[0, 0]
        assert out.validity[0, 1]

    def test_direction_out_of_range_flagged(self):
        rs = self.make_rs([10.0], wdir=200.0)
        out = mark_invalid(rs, default_invalid_rules(rs.schema))
        assert not out.validity[0, 0]

    def test_tautology_keeps_all_valid(self):
        rs = self.make_rs([1.0, 2.0])
        rule = InvalidRule("never", ("Patv",), lambda p: np.zeros_like(p, dtype=bool))
        assert mark_invalid(rs, [rule]).validity.all()

    def test_rule_with_unknown_channel(self):
        rs = self.make_rs([1.0])
        rule = InvalidRule("bad", ("Nope",), lambda p: p < 0)
        with pytest.raises(ConfigError):
            mark_invalid(rs, [rule])


class TestZscore:
    def test_fit_apply_standardizes(self):
        rs = synth_generate(3, 200, 4, seed=1)
        stats = fit_zscore(rs, (0, 200))
        normed = apply_zscore(rs, stats)
        for c in range(4):
            cells = normed.values[:, :, c][normed.validity]
            assert abs(cells.mean()) < 1e-8
            assert abs(cells.std() - 1.0) < 1e-8

    def test_round_trip(self):
        rs = synth_generate(2, 100, 3, seed=2)
        stats = fit_zscore(rs, (0, 100))
        back = invert_zscore(stats.apply(rs.values), stats)
        assert np.all(np.abs(back - rs.values) < 1e-10)

    @given(st.floats(-1e3, 1e3), st.floats(0.1, 100.0), st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=50)
    def test_round_trip_property(self, mean, spread, seed):
        rng = np.random.default_rng(seed)
        values = mean + spread * rng.normal(size=(2, 30, 1))
        stats = NormStats(mean=np.array([values.mean()]), std=np.array([values.std() + 0.1]))
        back = invert_zscore(stats.apply(values), stats)
        assert np.all(np.abs(back - values) < 1e-10 * max(1.0, abs(mean) + spread))

    def test_constant_channel_floored(self):
        values = np.zeros((1, 50, 3))
        values[:, :, 0] = 7.0
        values[:, :, 1] = np.arange(50)
        values[:, :, 2] = np.arange(50) * 2.0
        rs = RecordSet(schema=small_schema(), values=values,
                       validity=np.ones((1, 50), dtype=bool), turbine_ids=(1,))
        stats = fit_zscore(rs, (0, 50))
        assert stats.std[0] == 1.0
        assert np.allclose(apply_zscore(rs, stats).values[:, :, 0], 0.0)

    def test_stats_ignore_invalid_cells(self):
        rs = synth_generate(2, 60, 3, seed=3)
        validity = rs.validity.copy()
        validity[0, :10] = False
        masked = RecordSet(schema=rs.schema, values=rs.values, validity=validity,
                           turbine_ids=rs.turbine_ids)
        stats1 = fit_zscore(masked, (0, 60))
        mutated_values = rs.values.copy()
        mutated_values[0, :10, :] = 1e9
        mutated = RecordSet(schema=rs.schema, values=mutated_values, validity=validity,
                            turbine_ids=rs.turbine_ids)
        stats2 = fit_zscore(mutated, (0, 60))
        assert np.array_equal(stats1.mean, stats2.mean)
        assert np.array_equal(stats1.std, stats2.std)

    def test_all_invalid_channel_is_fit_error(self):
        rs = synth_generate(1, 20, 3, seed=4)
        invalid = RecordSet(schema=rs.schema, values=rs.values,
                            validity=np.zeros((1, 20), dtype=bool), turbine_ids=(1,))
        with pytest.raises(DatasetError):
            fit_zscore(invalid, (0, 20))

    def test_invalid_cells_become_zero(self):
        rs = synth_generate(1, 30, 3, seed=5)
        validity = rs.validity.copy()
        validity[0, 5] = False
        masked = RecordSet(schema=rs.schema, values=rs.values, validity=validity,
                           turbine_ids=(1,))
        normed = apply_zscore(masked, fit_zscore(masked, (0, 30)))
        assert np.array_equal(normed.values[0, 5], np.zeros(3))


class TestWindows:
    def test_hand_count(self):
        rs = synth_generate(1, 300, 3, seed=6)
        assert len(make_windows(rs, 144, 144, 1)) == 13

    def test_exact_fit(self):
        rs = synth_generate(1, 20, 3, seed=7)
        assert len(make_windows(rs, 10, 10, 1)) == 1

    def test_large_stride(self):
        rs = synth_generate(1, 30, 3, seed=8)
        assert len(make_windows(rs, 10, 10, 30)) == 1

    def test_too_short_errors(self):
        rs = synth_generate(1, 10, 3, seed=9)
        with pytest.raises(DatasetError):
            make_windows(rs, 10, 10, 1)

    @given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 200), st.integers(1, 50))
    @settings(max_examples=60, deadline=None)
    def test_count_formula(self, h, f, extra, stride):
        total = h + f + extra
        rs = synth_generate(1, total, 2, seed=10)
        windows = make_windows(rs, h, f, stride)
        assert len(windows) == (total - h - f) // stride + 1

    def test_windows_tile_timeline(self):
        rs = synth_generate(1, 50, 2, seed=11)
        windows = make_windows(rs, 5, 5, 3, start=7)
        for i, w in enumerate(windows):
            assert w.origin - 5 == 7 + i * 3

    def test_history_future_contiguous(self):
        rs = synth_generate(1, 40, 2, seed=12)
        w = make_windows(rs, 8, 8, 1)[3]
        assert np.array_equal(w.history[0, -1], rs.values[0, w.origin - 1])
        assert np.array_equal(w.future_target[0, 0, 0],
                              rs.values[0, w.origin, rs.target_index])

    def test_drop_fully_invalid(self):
        rs = synth_generate(1, 40, 2, seed=13)
        validity = rs.validity.copy()
        validity[:, 20:] = False
        masked = RecordSet(schema=rs.schema, values=rs.values, validity=validity,
                           turbine_ids=rs.turbine_ids)
        windows = make_windows(masked, 10, 10, 10)
        kept = drop_fully_invalid(windows)
        assert len(kept) < len(windows)
        assert all(w.future_validity.any() for w in kept)


class TestSplits:
    def test_chronological_disjoint(self):
        ranges = SplitBounds(100, 150).ranges(200)
        assert ranges["train"] == (0, 100)
        assert ranges["val"] == (100, 150)
        assert ranges["test"] == (150, 200)
        assert ranges["train"][1] <= ranges["val"][0]
        assert ranges["val"][1] <= ranges["test"][0]

    def test_degenerate_rejected(self):
        with pytest.raises(ConfigError):
            SplitBounds(100, 100).ranges(200)


class TestSynth:
    def test_deterministic(self):
        a = synth_generate(4, 200, 5, seed=42)
        b = synth_generate(4, 200, 5, seed=42)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.validity, b.validity)

    def test_shape_contract(self):
        rs = synth_generate(4, 2000, 5, seed=1)
        assert rs.values.shape == (4, 2000, 5)
        assert rs.validity.all()

    def test_noiseless_target_is_power_curve(self):
        from hsttn.data import _power_curve
        rs = synth_generate(3, 100, 4, seed=2, noise_scale=0.0)
        wind = rs.values[:, :, 0]
        assert np.array_equal(rs.values[:, :, -1], _power_curve(wind))

    def test_csv_bytes_deterministic(self, tmp_path):
        for name in ("a.csv", "b.csv"):
            write_csv(synth_generate(2, 50, 4, seed=7), tmp_path / name)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestCacheRoundTrip:
    def test_lossless(self, tmp_path):
        rs = synth_generate(3, 80, 5, seed=3)
        validity = rs.validity.copy()
        validity[1, 10:20] = False
        rs = RecordSet(schema=rs.schema, values=rs.values, validity=validity,
                       turbine_ids=rs.turbine_ids)
        path = tmp_path / "cache.bin"
        save_dataset(path, rs)
        back = load_dataset(path)
        assert np.array_equal(back.values, rs.values)
        assert np.array_equal(back.validity, rs.validity)
        assert back.schema == rs.schema
        assert back.turbine_ids == rs.turbine_ids

    def test_csv_reload_preserves_values(self, tmp_path):
        rs = synth_generate(2, 60, 4, seed=4)
        path = tmp_path / "farm.csv"
        write_csv(rs, path)
        back = load_records(path, rs.schema)
        assert np.array_equal(back.values, rs.values)
        assert np.array_equal(back.validity, rs.validity)


class TestSchemaFile:
    def test_save_load_round_trip(self, tmp_path):
        schema = Schema.default()
        path = tmp_path / "farm.schema"
        schema.save(path)
        assert Schema.load(path) == schema

    def test_missing_channels_key(self, tmp_path):
        path = tmp_path / "bad.schema"
        path.write_text("target = Patv\n")
        with pytest.raises(ConfigError):
            Schema.load(path)

    def test_target_must_be_channel(self):
        with pytest.raises(ConfigError):
            Schema(channels=("A", "B"), target="C", wind_speed=None,
                   wind_direction=None, nacelle_direction=None)
