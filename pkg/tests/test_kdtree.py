from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hypercal.kdtree import KDTree, brute_force_knn


def scan(points, q, k):
    """Plain loop oracle: sort all (distance, index) pairs."""
    pairs = sorted((float(((p - q) ** 2).sum()), i) for i, p in enumerate(points))
    return [d for d, _ in pairs[:k]], [i for _, i in pairs[:k]]


@pytest.mark.parametrize("k", [1, 3, 5])
def test_exact_against_scan_32d(k):
    rng = np.random.default_rng(k)
    pts = rng.normal(size=(1000, 32))
    queries = rng.normal(size=(50, 32))
    d, i = KDTree(pts).query(queries, k)
    for row, q in enumerate(queries):
        sd, si = scan(pts, q, k)
        assert i[row].tolist() == si
        assert np.max(np.abs(d[row] - sd)) <= 1e-12


def test_single_key_finds_itself():
    d, i = KDTree([[0.3, 0.4]]).query([[0.3, 0.4]], 1)
    assert d[0, 0] == 0.0 and i[0, 0] == 0


def test_duplicates_come_first_and_padding():
    pts = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 0.0], [0.5, 0.5], [0.0, 0.0]])
    d, i = KDTree(pts, leaf_size=1).query([[0.0, 0.0]], 4)
    assert i[0, :3].tolist() == [0, 2, 4] and np.all(d[0, :3] == 0)
    d, i = KDTree(pts).query([[0.0, 0.0]], 7)
    assert i[0, 5:].tolist() == [-1, -1] and np.all(np.isinf(d[0, 5:]))


@given(arrays(np.float64, st.tuples(st.integers(1, 60), st.integers(1, 4)),
              elements=st.floats(-3, 3).map(lambda x: round(x, 1))),
       st.integers(1, 6), st.integers(1, 8))
def test_matches_brute_force_with_ties(points, k, leaf):
    queries = points[: min(5, len(points))] + 0.05
    d, i = KDTree(points, leaf_size=leaf).query(queries, k)
    bd, bi = brute_force_knn(points, queries, k)
    assert np.array_equal(i, bi)
    assert np.array_equal(d, bd)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        KDTree(np.zeros((3, 2))).query(np.zeros((1, 3)), 1)
