import logging
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pir.dataio import (ChannelStats, ForecastRecord, IngestionError, JoinError, TimeSeriesDataset,
                        WindowError, calendar_features, compute_stats, destandardize, join_forecasts,
                        load_csv, make_windows, parse_ratios, read_forecasts, split_bounds,
                        split_chronological, standardize, write_csv, write_forecasts)


def hourly(n, start="2024-01-01T00:00:00"):
    return np.datetime64(start, "s") + np.arange(n) * np.timedelta64(3600, "s")


def dataset(values, start="2024-01-01T00:00:00"):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    names = tuple(f"c{i}" for i in range(values.shape[1]))
    return TimeSeriesDataset(values, hourly(len(values), start), names)


# ---------------------------------------------------------------------------
# load_csv


def test_load_small_file(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("date,a,b\n2024-01-01 00:00:00,1,2\n2024-01-01 01:00:00,3,4\n"
                 "2024-01-01 02:00:00,5,6\n2024-01-01 03:00:00,7,8\n")
    ds = load_csv(p)
    assert ds.values.shape == (4, 2)
    assert ds.channel_names == ("a", "b")
    np.testing.assert_array_equal(ds.values[:, 1], [2, 4, 6, 8])


def test_iso_timestamps_accepted(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("date,a\n2024-01-01T00:00:00,1\n2024-01-01T00:15:00,2\n")
    assert load_csv(p).length == 2


def test_gap_in_timestamps_names_the_row(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("date,a\n2024-01-01 00:00:00,1\n2024-01-01 01:00:00,2\n"
                 "2024-01-01 03:00:00,3\n2024-01-01 04:00:00,4\n")
    with pytest.raises(IngestionError, match="row 4"):
        load_csv(p)


def test_missing_cell_names_the_row(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("date,a,b\n2024-01-01 00:00:00,1,2\n2024-01-01 01:00:00,,4\n")
    with pytest.raises(IngestionError, match="row 3"):
        load_csv(p)


def test_unparsable_timestamp_names_the_row(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("date,a\n2024-01-01 00:00:00,1\nyesterday,2\n")
    with pytest.raises(IngestionError, match="row 3"):
        load_csv(p)


def test_seven_channel_hourly_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ds = TimeSeriesDataset(rng.normal(size=(300, 7)) * 10, hourly(300, "2016-07-01T00:00:00"),
                           ("HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_csv(ds, a)
    back = load_csv(a)
    write_csv(back, b)
    assert back.values.tobytes() == ds.values.tobytes()
    assert (back.timestamps == ds.timestamps).all()
    assert back.channel_names == ds.channel_names
    assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------------------
# splitting


def test_split_6_2_2():
    parts = split_chronological(dataset(np.arange(100)), (6, 2, 2))
    assert [p.length for p in parts] == [60, 20, 20]
    assert [p.offset for p in parts] == [0, 60, 80]


def test_split_7_1_2_on_ten_rows():
    assert [p.length for p in split_chronological(dataset(np.arange(10)), parse_ratios("7:1:2"))] == [7, 1, 2]


def test_empty_split_rejected():
    with pytest.raises(ValueError):
        split_bounds(100, (1, 0, 0))


def test_bounds_use_floor_of_cumulative_ratio():
    assert split_bounds(17, (Fraction(1, 3), Fraction(1, 3), Fraction(1, 3))) == [0, 5, 11, 17]


@given(st.integers(10, 5000), st.lists(st.integers(1, 20), min_size=3, max_size=3))
def test_splits_are_contiguous_and_cover(length, ratios):
    try:
        b = split_bounds(length, ratios)
    except ValueError:
        return
    assert b[0] == 0 and b[-1] == length
    assert all(x < y for x, y in zip(b, b[1:]))


# ---------------------------------------------------------------------------
# standardisation


def test_standardize_one_two_three():
    out, stats = standardize(dataset([1.0, 2.0, 3.0]))
    assert stats.mean[0] == 2.0
    assert stats.std[0] == pytest.approx(0.8165, abs=1e-4)
    np.testing.assert_allclose(out.values[:, 0], [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_constant_channel_clamped_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        out, stats = standardize(dataset([4.0, 4.0, 4.0]))
    assert stats.std[0] == 1.0
    np.testing.assert_array_equal(out.values[:, 0], 0.0)
    assert "clamped" in caplog.text


def test_train_stats_applied_to_test_by_hand():
    train = dataset([2.0, 4.0, 6.0, 8.0, 10.0])
    test = dataset([1.0, 6.0, 11.0])
    _, stats = standardize(train)
    out, _ = standardize(test, stats)
    # mean 6, population variance (16+4+0+4+16)/5 = 8
    sd = 8 ** 0.5
    np.testing.assert_allclose(out.values[:, 0], [-5 / sd, 0.0, 5 / sd], rtol=1e-15)


def test_destandardize_inverts_standardize():
    rng = np.random.default_rng(2)
    ds = dataset(rng.normal(3.0, 7.0, size=(50, 4)))
    out, stats = standardize(ds)
    np.testing.assert_allclose(destandardize(out.values, stats), ds.values, atol=1e-9)


def test_stats_sidecar_round_trip(tmp_path):
    stats = compute_stats(dataset(np.random.default_rng(1).normal(size=(20, 3))))
    stats.save(tmp_path / "s.json")
    back = ChannelStats.load(tmp_path / "s.json")
    assert back.channel_names == stats.channel_names
    assert back.mean.tobytes() == stats.mean.tobytes()
    assert back.std.tobytes() == stats.std.tobytes()


# ---------------------------------------------------------------------------
# windows


def test_window_count_formula():
    assert len(make_windows(dataset(np.zeros(200)), 96, 12)) == 93
    assert len(make_windows(dataset(np.zeros(200)), 96, 12, stride=5)) == 19


def test_too_short_series_states_minimum():
    with pytest.raises(WindowError, match="108"):
        make_windows(dataset(np.zeros(100)), 96, 12)


def test_windows_are_direct_slices():
    rng = np.random.default_rng(0)
    full = dataset(rng.normal(size=(60, 3)))
    ds = full.slice(10, 60)
    ws = make_windows(ds, 8, 4, stride=3)
    src = full.values
    for k, w in enumerate(ws):
        s = 10 + 3 * k
        assert w.id == k
        assert w.origin == s + 8
        np.testing.assert_array_equal(w.x, src[s:s + 8].T)
        np.testing.assert_array_equal(w.y, src[s + 8:s + 12].T)
        np.testing.assert_array_equal(w.exo, calendar_features(full.timestamps[s + 8:s + 12]))


def test_windows_stay_inside_their_split():
    ds = dataset(np.arange(300.0))
    for part in split_chronological(ds, (7, 1, 2)):
        for w in make_windows(part, 12, 6):
            assert part.offset <= w.x[0, 0] and w.y[0, -1] < part.offset + part.length


# ---------------------------------------------------------------------------
# calendar


def test_hour_twelve():
    f = calendar_features(np.array(["2024-03-05T12:00:00"], dtype="datetime64[s]"))
    assert f[0, 1] == pytest.approx(12 / 23 - 0.5)
    assert f[0, 1] == pytest.approx(0.0217, abs=1e-4)


def test_midnight_monday_january_first():
    # 2024-01-01 is a Monday
    f = calendar_features(np.array(["2024-01-01T00:00:00"], dtype="datetime64[s]"))
    np.testing.assert_array_equal(f[0], [-0.5] * 5)


def test_hour_column_increases_until_wraparound():
    f = calendar_features(hourly(30, "2024-01-01T05:00:00"))
    hours = f[:, 1]
    for i in range(29):
        if (5 + i) % 24 == 23:
            assert hours[i + 1] < hours[i]
        else:
            assert hours[i + 1] > hours[i]


@given(st.integers(0, 10 ** 9))
@settings(max_examples=50)
def test_calendar_features_bounded(seconds):
    t = np.datetime64("1990-01-01T00:00:00", "s") + np.timedelta64(seconds, "s")
    f = calendar_features(np.array([t]))
    assert np.all(f >= -0.5) and np.all(f <= 0.5)


# ---------------------------------------------------------------------------
# forecast exchange


def test_long_format_row_count(tmp_path):
    recs = [ForecastRecord(0, np.array([[1.0, 2.0]])), ForecastRecord(1, np.array([[3.0, 4.0]]))]
    p = tmp_path / "f.csv"
    write_forecasts(recs, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "instance_id,channel,step,value"
    assert len(lines) == 5


def test_forecast_round_trip_exact(tmp_path):
    rng = np.random.default_rng(4)
    recs = [ForecastRecord(i, rng.normal(size=(3, 5)) * 1e3, "bb") for i in (2, 0, 1)]
    p = tmp_path / "bb.csv"
    write_forecasts(recs, p)
    back = read_forecasts(p)
    assert [r.instance_id for r in back] == [0, 1, 2]
    by = {r.instance_id: r for r in recs}
    for r in back:
        assert r.values.tobytes() == by[r.instance_id].values.tobytes()
        assert r.source == "bb"


def test_hand_written_file_joins_to_instances(tmp_path):
    ws = make_windows(dataset(np.arange(20.0).reshape(10, 2)), 3, 2)
    p = tmp_path / "ext.csv"
    lines = ["instance_id,channel,step,value"]
    for w in ws:
        for c in range(2):
            for t in range(2):
                lines.append(f"{w.id},{c},{t},{100 * w.id + 10 * c + t}.5")
    # rows in reverse order; the reader must not depend on file order
    p.write_text("\n".join([lines[0]] + lines[:0:-1]) + "\n")
    arr = join_forecasts(read_forecasts(p), ws)
    assert arr.shape == (len(ws), 2, 2)
    assert arr[3, 1, 0] == 310.5


def test_join_rejects_unknown_ids(tmp_path):
    ws = make_windows(dataset(np.zeros(10)), 3, 2)
    recs = [ForecastRecord(w.id, np.zeros((1, 2))) for w in ws] + [ForecastRecord(99, np.zeros((1, 2)))]
    with pytest.raises(JoinError, match=r"\[99\]"):
        join_forecasts(recs, ws)


def test_exchange_file_with_holes_rejected(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("instance_id,channel,step,value\n0,0,0,1.0\n0,0,2,1.0\n")
    with pytest.raises(IngestionError, match="holes"):
        read_forecasts(p)


def test_exchange_file_header_checked(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("id,ch,t,v\n0,0,0,1.0\n")
    with pytest.raises(IngestionError, match="header"):
        read_forecasts(p)
