import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volsort.data import (
    PAPER_FRACTIONS,
    ConfigurationError,
    IngestionError,
    apply_stats,
    fit_stats,
    generate_synthetic,
    invert_stats,
    load_csv,
    split,
    write_csv,
)


def test_synthetic_is_deterministic():
    a, b = generate_synthetic(500, 3), generate_synthetic(500, 3)
    assert a.X.tobytes() == b.X.tobytes() and a.Y.tobytes() == b.Y.tobytes()
    assert generate_synthetic(500, 4).Y.tobytes() != a.Y.tobytes()
    assert set(np.unique(a.X)) <= {1.5, 2.0, 2.5}
    np.testing.assert_array_equal(a.groups, a.X[:, 0])
    with pytest.raises(ValueError):
        generate_synthetic(0, 0)


def test_synthetic_spread_grows_with_x():
    ds = generate_synthetic(5000, 0)
    lo = ds.Y[ds.X[:, 0] == 1.5, 1].std()
    hi = ds.Y[ds.X[:, 0] == 2.5, 1].std()
    assert hi > lo


def test_synthetic_v_shape():
    ds = generate_synthetic(5000, 1)
    for g in (1.5, 2.0, 2.5):
        y = ds.Y[ds.X[:, 0] == g]
        assert abs(np.corrcoef(y[:, 0], y[:, 1])[0, 1]) < 0.1
        assert np.corrcoef(np.abs(y[:, 0]), y[:, 1])[0, 1] > 0.9


def test_csv_round_trip(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x0,y0,y1\n1,2,3\n4,5,6\n")
    ds = load_csv(path, 2)
    assert ds.n == 2 and ds.p == 1 and ds.d == 2
    np.testing.assert_array_equal(ds.Y, [[2, 3], [5, 6]])
    out = tmp_path / "e.csv"
    write_csv(ds, out)
    again = load_csv(out, 2)
    assert again.X.tobytes() == ds.X.tobytes()


def test_csv_header_missing_column(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x0,y0,z\n1,2,3\n")
    with pytest.raises(IngestionError, match="'y1'"):
        load_csv(path, 2)


def test_csv_drops_nan_rows(tmp_path, caplog):
    path = tmp_path / "d.csv"
    path.write_text("x0,y0,y1\n1,2,3\nnan,5,6\n7,8,9\n")
    with caplog.at_level(logging.WARNING):
        ds = load_csv(path, 2)
    assert ds.n == 2 and ds.dropped_rows == 1
    assert "dropped 1 row" in caplog.text


def test_csv_errors(tmp_path):
    with pytest.raises(IngestionError, match="not found"):
        load_csv(tmp_path / "missing.csv", 2)
    bad = tmp_path / "bad.csv"
    bad.write_text("x0,y0,y1\n1,abc,3\n")
    with pytest.raises(IngestionError, match="row 2, column 1"):
        load_csv(bad, 2)


def test_split_sizes_and_seeds():
    ds = generate_synthetic(1000, 0)
    s = split(ds, PAPER_FRACTIONS, seed=0)
    assert tuple(len(i) for i in s.as_tuple()) == (384, 256, 160, 200)
    assert not np.array_equal(s.train, split(ds, PAPER_FRACTIONS, seed=1).train)
    with pytest.raises(ConfigurationError):
        split(ds, (0.5, 0.5, 0.1, 0.1))
    with pytest.raises(ConfigurationError):
        split(generate_synthetic(3, 0), PAPER_FRACTIONS)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(10, 400), seed=st.integers(0, 2**31),
       w=st.lists(st.floats(0.1, 1.0), min_size=4, max_size=4))
def test_split_disjoint_and_exhaustive(n, seed, w):
    fractions = [v / sum(w) for v in w]
    fractions[-1] = 1.0 - sum(fractions[:-1])
    try:
        s = split(generate_synthetic(n, 0), fractions, seed)
    except ConfigurationError:
        assert min(fractions) * n < 1  # a split rounded down to zero rows
        return
    allidx = np.concatenate(s.as_tuple())
    assert len(allidx) == n and len(np.unique(allidx)) == n
    for size, f in zip((len(i) for i in s.as_tuple()), fractions):
        assert abs(size - f * n) < 1


def test_standardization_on_train_and_inverse():
    ds = generate_synthetic(1000, 2)
    s = split(ds, seed=2)
    stats = fit_stats(ds, s.train)
    z = apply_stats(ds, stats)
    tr = z.subset(s.train)
    assert np.all(np.abs(tr.X.mean(0)) <= 1e-9) and np.all(np.abs(tr.Y.mean(0)) <= 1e-9)
    np.testing.assert_allclose(tr.Y.std(0), 1.0, atol=1e-9)
    np.testing.assert_array_equal(z.groups, ds.groups)
    back = invert_stats(z, stats)
    np.testing.assert_allclose(back.Y, ds.Y, atol=1e-10)
    np.testing.assert_allclose(back.X, ds.X, atol=1e-10)


def test_constant_column_floor():
    ds = generate_synthetic(50, 0)
    ds.X[:] = 2.0
    stats = fit_stats(ds, np.arange(50))
    assert stats.x_std[0] == 1e-12
