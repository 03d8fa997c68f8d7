"""Exact k-nearest-neighbour search with a bucketed KD-tree.

Distances are squared Euclidean. Results are ordered by ``(distance, index)`` so
that ties (e.g. duplicate keys) resolve the same way a brute-force scan does.
"""

from __future__ import annotations

import numpy as np
from numba import njit

LEAF_SIZE = 16


@njit(cache=True)
def _sqdist(points, i, q):
    d = 0.0
    for j in range(q.size):
        diff = points[i, j] - q[j]
        d += diff * diff
    return d


@njit(cache=True)
def _insert(best_d, best_i, count, k, d, idx):
    """Insert (d, idx) into the sorted buffers if it beats the current k-th entry."""
    if count == k:
        wd, wi = best_d[k - 1], best_i[k - 1]
        if d > wd or (d == wd and idx > wi):
            return count
    else:
        count += 1
    pos = count - 1
    while pos > 0 and (best_d[pos - 1] > d or (best_d[pos - 1] == d and best_i[pos - 1] > idx)):
        best_d[pos] = best_d[pos - 1]
        best_i[pos] = best_i[pos - 1]
        pos -= 1
    best_d[pos] = d
    best_i[pos] = idx
    return count


@njit(cache=True)
def _query(points, perm, split_dim, split_val, left, right, start, end, q, k, best_d, best_i):
    count = 0
    stack = np.empty(128, dtype=np.int64)
    gaps = np.empty(128, dtype=np.float64)
    top = 0
    stack[0] = 0
    gaps[0] = 0.0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        gap = gaps[top]
        if count == k and gap > best_d[k - 1]:
            continue
        d = split_dim[node]
        if d < 0:
            for j in range(start[node], end[node]):
                idx = perm[j]
                count = _insert(best_d, best_i, count, k, _sqdist(points, idx, q), idx)
            continue
        diff = q[d] - split_val[node]
        if diff <= 0.0:
            near, far = left[node], right[node]
        else:
            near, far = right[node], left[node]
        # far child first on the stack so the near side is explored first
        stack[top] = far
        gaps[top] = max(gap, diff * diff)
        top += 1
        stack[top] = near
        gaps[top] = gap
        top += 1
    return count


@njit(cache=True)
def _query_many(points, perm, split_dim, split_val, left, right, start, end, queries, k,
                out_d, out_i):
    for r in range(queries.shape[0]):
        bd = np.full(k, np.inf)
        bi = np.full(k, -1, dtype=np.int64)
        _query(points, perm, split_dim, split_val, left, right, start, end, queries[r], k, bd, bi)
        out_d[r] = bd
        out_i[r] = bi


class KDTree:
    """Median-split KD-tree over the rows of ``points``.

    Internal nodes split on the dimension with the widest spread (lowest index on
    ties) at the median point; leaves hold up to ``leaf_size`` points.
    """

    def __init__(self, points, leaf_size: int = LEAF_SIZE):
        points = np.ascontiguousarray(points, dtype=np.float64)
        if points.ndim != 2 or len(points) == 0:
            raise ValueError("KDTree needs a nonempty 2-D array of points")
        self.points = points
        self.n, self.dim = points.shape
        self.leaf_size = max(1, int(leaf_size))
        self.perm = np.arange(self.n, dtype=np.int64)
        nodes: list[list] = []
        self._build(0, self.n, nodes)
        arr = np.array(nodes, dtype=np.float64).reshape(-1, 6)
        self.split_dim = arr[:, 0].astype(np.int64)
        self.split_val = arr[:, 1].copy()
        self.left = arr[:, 2].astype(np.int64)
        self.right = arr[:, 3].astype(np.int64)
        self.start = arr[:, 4].astype(np.int64)
        self.end = arr[:, 5].astype(np.int64)

    def _build(self, lo: int, hi: int, nodes: list) -> int:
        node = len(nodes)
        nodes.append([-1, 0.0, -1, -1, lo, hi])
        if hi - lo <= self.leaf_size:
            return node
        idx = self.perm[lo:hi]
        sub = self.points[idx]
        spread = sub.max(axis=0) - sub.min(axis=0)
        d = int(np.argmax(spread))
        if spread[d] == 0.0:
            return node  # all points identical: keep as one leaf
        order = np.argsort(sub[:, d], kind="stable")
        self.perm[lo:hi] = idx[order]
        mid = lo + (hi - lo) // 2
        nodes[node][0] = d
        nodes[node][1] = float(self.points[self.perm[mid - 1], d])
        # left holds coordinates <= split value, right >= split value
        nodes[node][2] = self._build(lo, mid, nodes)
        nodes[node][3] = self._build(mid, hi, nodes)
        return node

    def query(self, queries, k: int = 1):
        """Return ``(sq_distances, indices)`` of shape ``(m, k)``; missing entries are ``inf``/-1."""
        q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
        if q.shape[1] != self.dim:
            raise ValueError(f"query dimension {q.shape[1]} does not match tree dimension {self.dim}")
        if k < 1:
            raise ValueError("k must be at least 1")
        out_d = np.empty((len(q), k))
        out_i = np.empty((len(q), k), dtype=np.int64)
        _query_many(self.points, self.perm, self.split_dim, self.split_val, self.left, self.right,
                    self.start, self.end, q, int(k), out_d, out_i)
        return out_d, out_i


def brute_force_knn(points, queries, k: int):
    """Reference scan with the same distance formula and (distance, index) ordering."""
    points = np.asarray(points, dtype=float)
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    out_d = np.full((len(q), k), np.inf)
    out_i = np.full((len(q), k), -1, dtype=np.int64)
    for r, x in enumerate(q):
        d = ((points - x) ** 2).sum(axis=1)
        order = np.lexsort((np.arange(len(points)), d))[:k]
        out_d[r, : len(order)] = d[order]
        out_i[r, : len(order)] = order
    return out_d, out_i
