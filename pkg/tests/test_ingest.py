import numpy as np
import pytest

from samovar.errors import DataError, ParseError
from samovar.ingest import (SplitSpec, load_csv, split_and_standardize, window_arrays, window_count,
                            window_sampler, with_calendar_features, write_csv)


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_small_file(tmp_path):
    ds = load_csv(write(tmp_path, "a,b\n1,2\n3,4\n5,6\n"))
    assert ds.values.shape == (3, 2) and ds.channel_names == ["a", "b"] and ds.timestamps is None


def test_timestamp_column(tmp_path):
    ds = load_csv(write(tmp_path, "date,x\n2016-07-01 00:00:00,1.5\n2016-07-01 01:00:00,2.5\n"))
    assert ds.C == 1 and ds.timestamps[1] == "2016-07-01 01:00:00"
    cal = with_calendar_features(ds)
    assert cal.C == 5 and cal.channel_names[-1] == "yearday"
    assert np.all(np.abs(cal.values[:, 1:]) <= 0.5)


@pytest.mark.parametrize("text,row,col", [
    ("a,b\n1,2\n3,NaN\n", 3, 2),
    ("a,b\n1,2\n3,x\n", 3, 2),
    ("a,b\n1,2\n3\n", 3, None),
    ("", 1, None),
])
def test_parse_errors_carry_position(tmp_path, text, row, col):
    with pytest.raises(ParseError) as exc:
        load_csv(write(tmp_path, text))
    assert exc.value.row == row and exc.value.col == col


def test_missing_file():
    with pytest.raises(DataError):
        load_csv("/nonexistent/file.csv")


def _dataset(tmp_path, T=100, C=2, seed=0):
    vals = np.random.default_rng(seed).standard_normal((T, C)) * 3 + 5
    p = tmp_path / "x.csv"
    write_csv(p, vals)
    return load_csv(p), vals


def test_split_lengths_and_standardisation(tmp_path):
    ds, vals = _dataset(tmp_path)
    tr, va, te, spec = split_and_standardize(ds, SplitSpec())
    assert (len(tr.values), len(va.values), len(te.values)) == (70, 10, 20)
    assert np.max(np.abs(tr.values.mean(axis=0))) < 1e-9
    np.testing.assert_allclose(tr.values.std(axis=0), 1.0, rtol=1e-12)
    assert np.all(np.abs(va.values.mean(axis=0)) > 0)
    for s in (tr, va, te):
        orig = vals[s.start:s.start + len(s.values)]
        np.testing.assert_allclose(s.destandardize(), orig, rtol=1e-9)


def test_constant_channel_rejected(tmp_path):
    ds, _ = _dataset(tmp_path)
    ds.values[:, 1] = 4.0
    with pytest.raises(DataError, match="constant"):
        split_and_standardize(ds)


def test_bad_ratios():
    with pytest.raises(Exception):
        SplitSpec((0.5, 0.5, 0.5))


def test_window_counts_and_contents():
    vals = np.arange(20.0).reshape(10, 2)
    wins = list(window_sampler(vals, 4, 2, 1))
    assert len(wins) == 5 == window_count(10, 4, 2)
    x, y = wins[2]
    np.testing.assert_array_equal(x, vals[2:6])
    np.testing.assert_array_equal(y, vals[6:8])
    X, Y = window_arrays(vals, 4, 2, 2)
    assert X.shape == (3, 4, 2) and Y.shape == (3, 2, 2)
    # stride L_P: targets do not overlap
    np.testing.assert_array_equal(Y[1], vals[6:8])
    np.testing.assert_array_equal(Y[2], vals[8:10])
    with pytest.raises(DataError):
        list(window_sampler(vals, 8, 4))


def test_windows_stay_inside_split(tmp_path):
    ds, vals = _dataset(tmp_path)
    _, va, _, _ = split_and_standardize(ds)
    X, Y = window_arrays(va, 6, 2)
    assert len(X) == 3
    np.testing.assert_array_equal(Y[-1], va.values[-2:])
