import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from globalvol.dataingest import (IngestError, filter_universe, ingest_directory,
                                  prices_to_returns, read_price_csv)
from globalvol.series import ReturnSeries, load_universe


def test_hand_example_full_in_sample():
    s = prices_to_returns([100, 110, 100], split=(2, 2))
    np.testing.assert_allclose(s.returns, [9.531017980432493, -9.531017980432493], rtol=1e-12)


def test_constant_prices_give_zero_returns():
    s = prices_to_returns(np.full(30, 42.0))
    assert np.all(s.returns == 0.0)


def test_default_split_and_in_sample_mean_zero():
    rng = np.random.default_rng(0)
    p = 100 * np.exp(np.cumsum(rng.normal(0.001, 0.02, 501)))
    s = prices_to_returns(p)
    assert s.split == (300, 400)
    assert abs(s.train.mean()) < 1e-10


def test_out_of_sample_uses_in_sample_mean():
    rng = np.random.default_rng(1)
    p = 100 * np.exp(np.cumsum(rng.normal(0.0, 0.02, 101)))
    s = prices_to_returns(p)
    r = np.diff(np.log(p))
    m = r[: s.train_end].mean()
    np.testing.assert_allclose(s.returns, 100 * (r - m), rtol=0, atol=1e-12)
    # changing the future leaves the in-sample segment untouched
    p2 = p.copy()
    p2[-10:] *= 3.0
    assert np.array_equal(prices_to_returns(p2).train, s.train)


@settings(max_examples=30, deadline=None)
@given(st.floats(min_value=1e-3, max_value=1e3), st.integers(0, 1000))
def test_rescaling_prices_is_invisible(k, seed):
    p = 50 * np.exp(np.cumsum(np.random.default_rng(seed).normal(0, 0.02, 40)))
    np.testing.assert_allclose(prices_to_returns(p * k).returns, prices_to_returns(p).returns,
                               rtol=0, atol=1e-9)


def test_shifting_log_returns_leaves_in_sample_unchanged():
    rng = np.random.default_rng(2)
    lr = rng.normal(0, 0.01, 60)
    a = prices_to_returns(np.exp(np.concatenate([[0], np.cumsum(lr)])))
    b = prices_to_returns(np.exp(np.concatenate([[0], np.cumsum(lr + 0.05)])))
    np.testing.assert_allclose(a.train, b.train, atol=1e-10)


def test_rejections_name_the_row():
    with pytest.raises(IngestError, match="row 2"):
        prices_to_returns([1.0, 2.0, -1.0])
    with pytest.raises(IngestError, match="missing"):
        prices_to_returns([1.0, np.nan, 2.0])
    with pytest.raises(IngestError):
        prices_to_returns([1.0])


def test_filter_universe():
    mk = lambda n: ReturnSeries(f"s{n}", np.zeros(n * 2), n, n + 1)  # noqa: E731
    drops = []
    kept = filter_universe([mk(1259), mk(1260)], 1260, drops)
    assert [s.id for s in kept] == ["s1260"]
    assert drops[0]["id"] == "s1259" and "1259" in drops[0]["reason"]
    assert filter_universe([], 1260) == []
    both = [mk(3), mk(5)]
    assert filter_universe(both, 0) == both


def write_csv(path, dates, closes):
    with open(path, "w") as fh:
        fh.write("date,close\n")
        for d, c in zip(dates, closes):
            fh.write(f"{d},{c}\n")


def test_read_csv_and_date_splits(tmp_path):
    dates = np.arange(np.datetime64("2019-12-25"), np.datetime64("2020-01-06"))
    closes = np.linspace(10, 12, len(dates))
    write_csv(tmp_path / "A.csv", dates, closes)
    d, c = read_price_csv(tmp_path / "A.csv")
    assert np.array_equal(d, dates) and np.allclose(c, closes)
    s = prices_to_returns(c, "A", dates=d, date_split=("2020-01-01", "2020-01-04"))
    # returns dated 2019-12-26..2019-12-31 are training
    assert s.split == (6, 9)


def test_read_csv_rejects_bad_files(tmp_path):
    (tmp_path / "dup.csv").write_text("date,close\n2020-01-01,1\n2020-01-01,2\n")
    (tmp_path / "order.csv").write_text("date,close\n2020-01-02,1\n2020-01-01,2\n")
    (tmp_path / "hole.csv").write_text("date,close\n2020-01-01,1\n2020-01-02,\n")
    for name, msg in (("dup", "duplicate"), ("order", "ascending"), ("hole", "missing")):
        with pytest.raises(IngestError, match=msg):
            read_price_csv(tmp_path / f"{name}.csv")


def test_ingest_directory_round_trip(tmp_path):
    src = tmp_path / "raw"
    src.mkdir()
    rng = np.random.default_rng(3)
    dates = np.arange(np.datetime64("2014-01-01"), np.datetime64("2014-01-01") + 400)
    for name in ("AAA", "BBB"):
        write_csv(src / f"{name}.csv", dates, 100 * np.exp(np.cumsum(rng.normal(0, 0.01, 400))))
    write_csv(src / "SHORT.csv", dates[:50], np.ones(50))
    (src / "BAD.csv").write_text("date,close\n2020-01-01,1\n2020-01-02,0\n")
    kept, dropped = ingest_directory(src, tmp_path / "u", min_train_obs=100)
    assert [s.id for s in kept] == ["AAA", "BBB"]
    assert {d["id"] for d in dropped} == {"SHORT", "BAD"}
    back = load_universe(tmp_path / "u")
    for a, b in zip(kept, back):
        assert np.array_equal(a.returns, b.returns) and a.split == b.split and b.sigma_true is None
