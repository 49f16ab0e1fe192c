import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusecast.data import (DataError, DomainSampler, eval_batches, load_csv, load_registry, make_windows,
                           sample_batch, split_standard, synthetic_dataset, window_count, write_csv)


def _write(path, text):
    path.write_text(text)
    return path


def test_load_three_channel_file(tmp_path):
    rng = np.random.default_rng(0)
    vals = rng.standard_normal((3, 100))
    write_csv(tmp_path / "a.csv", vals, ["x", "y", "z"])
    ds = load_csv(tmp_path / "a.csv")
    assert ds.channels == 3 and ds.length == 100
    assert ds.channel_names == ("x", "y", "z")
    assert np.max(np.abs(ds.values - vals)) <= 1e-12


def test_load_nan_error_names_location(tmp_path):
    p = _write(tmp_path / "n.csv", "t,a,b\n0,1,2\n1,nan,3\n")
    with pytest.raises(DataError, match=r"row 3, column 'a'"):
        load_csv(p)


def test_load_nan_ffill(tmp_path):
    p = _write(tmp_path / "n.csv", "t,a\n0,1\n1,\n2,5\n")
    assert load_csv(p, nan="ffill").values.tolist() == [[1.0, 1.0, 5.0]]


def test_load_ragged_and_non_numeric(tmp_path):
    with pytest.raises(DataError, match="row 3"):
        load_csv(_write(tmp_path / "r.csv", "t,a,b\n0,1,2\n1,2\n"))
    with pytest.raises(DataError, match="non-numeric"):
        load_csv(_write(tmp_path / "s.csv", "t,a\n0,abc\n"))
    with pytest.raises(DataError, match="no data"):
        load_csv(_write(tmp_path / "e.csv", "t,a\n"))
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "missing.csv")


@pytest.mark.parametrize("n,expect", [(100, (70, 10, 20)), (10, (7, 1, 2)), (2000, (1400, 200, 400))])
def test_split_sizes(n, expect):
    ds = split_standard(synthetic_dataset(n=n))
    sizes = tuple(hi - lo for lo, hi in (ds.splits[s] for s in ("train", "val", "test")))
    assert sizes == expect
    assert split_standard(synthetic_dataset(n=n)).splits == ds.splits


def test_split_ratio_validation():
    with pytest.raises(DataError):
        split_standard(synthetic_dataset(n=50), (0.5, 0.1, 0.1))


@given(n=st.integers(3, 5000), a=st.floats(0.05, 0.9), b=st.floats(0.0, 0.5))
@settings(max_examples=60, deadline=None)
def test_splits_contiguous_disjoint_ordered(n, a, b):
    b = min(b, 1 - a)
    ds = split_standard(synthetic_dataset(n=n), (a, b, 1 - a - b))
    (t0, t1), (v0, v1), (s0, s1) = ds.splits["train"], ds.splits["val"], ds.splits["test"]
    assert t0 == 0 and t1 == v0 and v1 == s0 and s1 == n


def test_window_counts():
    ds = split_standard(synthetic_dataset(n=1000))
    lo, hi = ds.splits["val"]
    L, H = 30, 10
    assert sum(1 for _ in make_windows(ds, "val", L, H)) == window_count(hi - lo, L, H) == 100 - 40 + 1
    from dataclasses import replace
    tight = replace(ds, splits={"train": (0, 40), "val": (40, 89), "test": (89, 1000)})
    assert sum(1 for _ in make_windows(tight, "train", L, H)) == 1
    assert sum(1 for _ in make_windows(tight, "val", L, H)) == 10


def test_too_short_split():
    ds = split_standard(synthetic_dataset(n=100))
    with pytest.raises(DataError):
        list(make_windows(ds, "val", 8, 8))


def test_windows_stay_in_split():
    ds = split_standard(synthetic_dataset(n=600, noise=0.0))
    # tag each time index so windows can be mapped back to positions
    from dataclasses import replace
    tagged = replace(ds, values=np.arange(600, dtype=float)[None].repeat(2, 0))
    for split in ("train", "val", "test"):
        lo, hi = tagged.splits[split]
        for obs, tgt in make_windows(tagged, split, 16, 8):
            assert obs.min() >= lo and tgt.max() < hi
            assert np.all(np.diff(np.concatenate([obs[0], tgt[0]])) == 1)
        rng = np.random.default_rng(0)
        for obs, tgt in make_windows(tagged, split, 16, 8, mode="train", rng=rng, count=50):
            assert obs.min() >= lo and tgt.max() < hi


def test_training_windows_reproducible():
    ds = split_standard(synthetic_dataset())
    a = sample_batch(ds, "train", 96, 24, 8, np.random.default_rng(5))
    b = sample_batch(ds, "train", 96, 24, 8, np.random.default_rng(5))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert a[0].shape == (8, 2, 96) and a[1].shape == (8, 2, 24)


def test_eval_batches_stride():
    ds = split_standard(synthetic_dataset())
    X, Y = eval_batches(ds, "test", 96, 24, stride=10)
    assert X.shape[0] == len(range(0, 400 - 120 + 1, 10))


def test_domain_sampler_zero_weight_excluded():
    s = DomainSampler([1.0, 0.0], np.random.default_rng(0))
    assert all(s.draw() == 0 for _ in range(10_000))


def test_domain_sampler_frequencies_within_binomial_bounds():
    w = np.array([0.5, 0.3, 0.2])
    s = DomainSampler(w, np.random.default_rng(1))
    n = 10_000
    counts = np.bincount([s.draw() for _ in range(n)], minlength=3)
    sigma = np.sqrt(n * w * (1 - w))
    assert np.all(np.abs(counts - n * w) <= 3 * sigma)


def test_domain_sampler_validation():
    with pytest.raises(DataError):
        DomainSampler([], np.random.default_rng(0))
    with pytest.raises(DataError):
        DomainSampler([0.0, 0.0], np.random.default_rng(0))
    with pytest.raises(DataError):
        DomainSampler([-1.0, 2.0], np.random.default_rng(0))


def test_registry_resolves_relative_paths(tmp_path):
    write_csv(tmp_path / "d.csv", np.random.default_rng(0).standard_normal((2, 300)))
    (tmp_path / "reg.yaml").write_text(
        "- {name: real, path: d.csv, weight: 2.0, frequency: h}\n"
        "- {name: syn, synthetic: {n: 500, seed: 3}, weight: 1.0}\n")
    dss = load_registry(tmp_path / "reg.yaml")
    assert [d.name for d in dss] == ["real", "syn"]
    assert dss[0].weight == 2.0 and dss[0].frequency == "h" and dss[0].splits["train"] == (0, 210)
    assert dss[1].length == 500


def test_synthetic_generator_deterministic():
    a, b = synthetic_dataset(seed=4), synthetic_dataset(seed=4)
    assert np.array_equal(a.values, b.values) and a.values.shape == (2, 2000)
