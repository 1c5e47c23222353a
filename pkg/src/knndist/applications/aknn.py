"""Approximate k-NN search seeded with an estimated k-th NN distance."""

import numpy as np

from ..errors import ValidationError
from ..kdtree import NeighborList


def _check_k(est, k):
    if not 1 <= k <= est.k_max:
        raise ValidationError(f"k={k} out of range [1, {est.k_max}]")


def aknn_search(tree, est, q, k):
    """k-NN search with the pruning radius initialised to the estimate.

    A tight estimate can return fewer than k neighbors; an estimate of 0
    returns none.
    """
    _check_k(est, k)
    tau = float(est.estimate(q)[k - 1])
    if not tau > 0:
        return NeighborList(np.empty(0, np.int64), np.empty(0, np.float64))
    return tree.knn_seeded(q, k, tau)


def aknn_batch(tree, est, queries, k):
    """Batch form; returns ``(indices, distances, counts)`` padded like ``knn_batch``."""
    _check_k(est, k)
    Q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, tree.dim))
    taus = est.estimate_many(Q)[:, k - 1]
    idx = np.full((Q.shape[0], k), -1, np.int64)
    dist = np.full((Q.shape[0], k), np.inf)
    counts = np.zeros(Q.shape[0], np.int64)
    pos = taus > 0
    if pos.any():
        idx[pos], dist[pos], counts[pos] = tree.knn_batch(Q[pos], k, taus[pos])
    return idx, dist, counts


def recall(found, exact):
    """Per-row fraction of exact neighbor indices present in ``found`` (-1 = padding)."""
    found = np.atleast_2d(found)
    exact = np.atleast_2d(exact)
    return np.array([np.intersect1d(f[f >= 0], e).size / e.size for f, e in zip(found, exact)])
