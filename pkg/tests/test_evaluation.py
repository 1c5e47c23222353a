import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from knndist import nn
from knndist.errors import ValidationError
from knndist.evaluation import (bench, error_report, error_report_arrays, lower_median, mae, mape,
                                precision_recall, to_csv, to_table)

vecs = st.lists(st.floats(0.01, 100), min_size=1, max_size=20)


def test_mae_examples():
    assert mae([1, 2, 3], [1, 2, 3]) == 0
    assert mae([1, 3], [2, 3]) == 0.5
    a, b = np.array([0.0, 4.0]), np.array([1.0, 2.0])
    assert mae(a, b) == nn.l1_loss(a, b)
    with pytest.raises(ValidationError):
        mae([1], [1, 2])


@given(vecs, st.integers(0, 1000))
@settings(max_examples=50)
def test_mae_symmetric_zero_iff_equal(a, seed):
    a = np.array(a)
    b = a + np.random.default_rng(seed).normal(size=a.size)
    assert mae(a, b) == mae(b, a)
    assert mae(a, a) == 0
    assert (mae(a, b) == 0) == np.array_equal(a, b)


def test_mape_examples():
    assert mape([1, 2], [1, 2]) == (0.0, 0)
    assert mape([2], [3]) == (0.5, 0)
    v, skipped = mape([0, 2, 4], [1, 3, 4])
    assert skipped == 1 and v == pytest.approx(0.25)
    with pytest.raises(ValidationError):
        mape([0, 0], [1, 1])


@given(vecs, st.floats(0.1, 100))
@settings(max_examples=50)
def test_mape_scale_invariant(a, s):
    a = np.array(a)
    b = a * 1.3 + 0.5
    assert mape(a * s, b * s)[0] == pytest.approx(mape(a, b)[0], rel=1e-9)


def test_lower_median():
    assert lower_median([3, 1, 2]) == 2
    assert lower_median([4, 1, 3, 2]) == 2
    with pytest.raises(ValidationError):
        lower_median([])


def test_report_single_query_and_buckets():
    E = np.arange(1, 26, dtype=float)[None, :]
    H = E + np.r_[np.ones(10), np.zeros(15)][None, :]
    rep = error_report_arrays(E, H)
    assert rep.mean_mae == rep.median_mae == pytest.approx(10 / 25)
    assert rep.bucket_edges == [(1, 10), (11, 20), (21, 25)]
    np.testing.assert_allclose(rep.bucket_mae, [1.0, 0.0, 0.0])


def test_report_permutation_invariant():
    rng = np.random.default_rng(0)
    E = rng.random((30, 12)) + 0.1
    H = E + rng.normal(0, 0.1, E.shape)
    p = rng.permutation(30)
    a, b = error_report_arrays(E, H).summary(), error_report_arrays(E[p], H[p]).summary()
    for k in a:
        assert a[k] == pytest.approx(b[k], rel=1e-12)


def test_report_with_exact_oracle():
    from knndist.estimators import ExactEstimator
    from knndist.kdtree import build

    rng = np.random.default_rng(1)
    tree = build(rng.random((200, 2)))
    ex = ExactEstimator(tree, 10)
    s = error_report(rng.random((20, 2)), ex, ex).summary()
    assert all(v == 0 for k, v in s.items() if k.startswith("ma"))


def test_precision_recall():
    sc = precision_recall([1, 2], [1, 2])
    assert (sc.precision, sc.recall, sc.precision_defined) == (1.0, 1.0, True)
    sc = precision_recall([1, 2], [3, 4])
    assert (sc.precision, sc.recall) == (0.0, 0.0)
    sc = precision_recall(range(8), range(10))
    assert (sc.precision, sc.recall) == (1.0, 0.8)
    sc = precision_recall([], [])
    assert sc.precision == 1.0 and not sc.precision_defined
    sc = precision_recall([], [1])
    assert sc.precision == 0.0 and sc.recall == 0.0 and not sc.precision_defined


def test_bench_counts_calls():
    calls = []
    lat = bench(calls.append, np.zeros((3, 2)), warmup=5, iters=20)
    assert len(calls) == 25 and lat.iters == 20 and lat.mean_us >= 0
    with pytest.raises(ValidationError):
        bench(calls.append, np.zeros((3, 2)), iters=0)


def test_emitters():
    rows = [{"a": 1, "b": 0.5}, {"a": 22, "b": 1 / 3}]
    assert to_csv(rows, ["a", "b"]) == "a,b\n1,0.5\n22,0.3333333333333333\n"
    t = to_table(rows, ["a", "b"]).splitlines()
    assert t[0].split() == ["a", "b"] and len(t) == 4
