import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frost.errors import ConfigError, EmptySketchError, NumericError
from frost.sketch import KLLSketch, exact_rank_error, sketch_insert, sketch_merge, sketch_query

QS = (0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99)


def exact_lower_quantile(sorted_values, q):
    """Smallest value whose rank reaches q*n (independent of the sketch code)."""
    n = len(sorted_values)
    return sorted_values[max(0, math.ceil(q * n - 1e-9) - 1)]


def test_singleton():
    s = KLLSketch()
    sketch_insert(s, 7.0)
    for q in (0.01, 0.5, 0.99):
        assert sketch_query(s, q) == 7.0


def test_exact_below_capacity():
    rng = np.random.default_rng(0)
    vals = rng.standard_normal(150)
    s = KLLSketch(k=200)
    for v in vals:
        s.insert(v)
    assert len(s.levels) == 1
    srt = np.sort(vals)
    for q in np.linspace(0.01, 0.99, 25):
        assert s.query(q) == exact_lower_quantile(srt, q)


def test_weight_bookkeeping_large_stream():
    rng = np.random.default_rng(1)
    s = KLLSketch(seed=3)
    s.extend(rng.permutation(np.arange(1, 100_001)))
    assert s.n == 100_000
    assert s.total_weight() == 100_000
    assert sum(len(b) << lv for lv, b in enumerate(s.levels)) == 100_000


def test_median_of_1_to_1000():
    s = KLLSketch(k=200, seed=5)
    s.extend(np.random.default_rng(5).permutation(np.arange(1, 1001)))
    v = s.query(0.5)
    assert 500 - 20 <= v <= 500 + 20


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=3000),
    st.floats(0.001, 0.999),
    st.floats(0.001, 0.999),
)
def test_query_monotone(values, q1, q2):
    s = KLLSketch(k=16, seed=1)
    s.extend(values)
    lo, hi = sorted((q1, q2))
    assert s.query(lo) <= s.query(hi)


def test_extend_equals_repeated_insert():
    vals = np.random.default_rng(2).standard_normal(5000)
    a, b = KLLSketch(k=32, seed=9), KLLSketch(k=32, seed=9)
    a.extend(vals)
    for v in vals:
        b.insert(v)
    assert a == b


def test_determinism():
    vals = np.random.default_rng(3).standard_normal(20_000)
    a, b = KLLSketch(seed=4), KLLSketch(seed=4)
    a.extend(vals)
    b.extend(vals)
    assert a.to_dict() == b.to_dict()
    assert a.quantiles(QS) == b.quantiles(QS)


def test_memory_bound():
    for n in (10_000, 100_000, 300_000):
        s = KLLSketch(k=200, seed=n)
        s.extend(np.random.default_rng(n).standard_normal(n))
        assert s.size <= s.memory_bound()
        assert s.size <= 200 * (math.log2(n / 200) + 3)


def test_merge_with_empty_is_identity():
    s = KLLSketch(seed=1)
    s.extend(np.random.default_rng(4).standard_normal(10_000))
    merged = sketch_merge(s, KLLSketch(seed=1))
    assert merged.quantiles(QS) == s.quantiles(QS)
    assert sketch_merge(KLLSketch(seed=1), s).quantiles(QS) == s.quantiles(QS)


@pytest.mark.parametrize("seed", range(5))
def test_merge_matches_concatenation_both_orders(seed):
    rng = np.random.default_rng(seed)
    a_vals, b_vals = rng.standard_normal(30_000), rng.uniform(-1, 3, 20_000)
    a, b = KLLSketch(seed=seed), KLLSketch(seed=seed + 100)
    a.extend(a_vals)
    b.extend(b_vals)
    full = np.sort(np.concatenate([a_vals, b_vals]))
    for merged in (a.merge(b), b.merge(a)):
        assert merged.n == len(full)
        assert merged.total_weight() == len(full)
        assert max(exact_rank_error(merged, full, QS)) <= 0.02


def test_merge_leaves_inputs_untouched():
    a, b = KLLSketch(seed=1), KLLSketch(seed=2)
    a.extend(np.arange(5000.0))
    b.extend(np.arange(5000.0))
    before = (a.to_dict(), b.to_dict())
    a.merge(b)
    assert (a.to_dict(), b.to_dict()) == before


def test_merge_requires_same_k():
    with pytest.raises(ConfigError):
        KLLSketch(k=100).merge(KLLSketch(k=200))


def test_serialization_round_trip():
    s = KLLSketch(k=50, seed=11)
    s.extend(np.random.default_rng(6).standard_normal(10_000))
    back = KLLSketch.from_dict(s.to_dict())
    assert back == s
    # the restored sketch continues identically
    more = np.random.default_rng(7).standard_normal(3000)
    s.extend(more)
    back.extend(more)
    assert back == s


def test_from_dict_rejects_bad_documents():
    with pytest.raises(ConfigError):
        KLLSketch.from_dict({"format": "nope"})
    doc = KLLSketch().to_dict()
    doc["n"] = 5
    with pytest.raises(ConfigError):
        KLLSketch.from_dict(doc)


def test_errors():
    with pytest.raises(EmptySketchError):
        KLLSketch().query(0.5)
    s = KLLSketch()
    s.insert(1.0)
    with pytest.raises(ValueError):
        s.query(0.0)
    with pytest.raises(ValueError):
        s.query(1.0)
    with pytest.raises(NumericError):
        s.insert(float("nan"))
    with pytest.raises(NumericError):
        s.extend([1.0, float("inf")])
    with pytest.raises(ConfigError):
        KLLSketch(k=4)


def test_rank_error_sorted_and_reversed_streams():
    vals = np.arange(100_000, dtype=np.float64)
    for stream in (vals, vals[::-1]):
        s = KLLSketch(seed=2)
        s.extend(stream)
        assert max(exact_rank_error(s, vals, QS)) <= 0.02


def test_exact_rank_error_with_ties():
    s = KLLSketch()
    s.extend([1.0] * 100)
    assert exact_rank_error(s, np.ones(100), QS) == [0.0] * len(QS)


def test_smaller_k_means_larger_error():
    def mean_err(k):
        errs = []
        for seed in range(5):
            vals = np.random.default_rng(seed).standard_normal(20_000)
            s = KLLSketch(k=k, seed=seed)
            s.extend(vals)
            errs.append(max(exact_rank_error(s, np.sort(vals), QS)))
        return np.mean(errs)

    assert mean_err(8) > mean_err(400)
