"""Density-peaks clustering and recovery of its cutoff distance.

Local density counts the *other* points within ``d_cut``. Points are ranked
by decreasing density, ties going to the lower index. Each point depends on
its nearest higher-ranked point (distance ties again to the lower index);
the top-ranked point has no dependent and gets the diameter of the data set
as its dependent distance.
"""

from dataclasses import dataclass

import numba as nb
import numpy as np

from ..errors import ValidationError
from ..kdtree import _SLACK, _box_maxd2, _box_mind2, build

NOISE = -1


@nb.njit(cache=True)
def _node_min_rank(rank_sorted, start, end):
    out = np.empty(start.shape[0], np.int64)
    for node in range(start.shape[0]):
        m = rank_sorted[start[node]]
        for p in range(start[node] + 1, end[node]):
            if rank_sorted[p] < m:
                m = rank_sorted[p]
        out[node] = m
    return out


@nb.njit(cache=True)
def _nearest_denser(sp, oidx, start, end, left, right, sdim, sval, blo, bhi, rank_sorted, minrank):
    """Per point (original order): nearest higher-ranked point and its distance."""
    n, d = sp.shape
    dep = np.full(n, -1, np.int64)
    delta = np.full(n, np.inf)
    stack = np.empty(256, np.int64)
    for p0 in range(n):
        r = rank_sorted[p0]
        me = oidx[p0]
        if r == 0:
            continue
        q = sp[p0]
        best = np.inf
        best2 = np.inf
        bi = -1
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if minrank[node] >= r:
                continue
            if _box_mind2(q, blo, bhi, node) > best2:
                continue
            if left[node] < 0:
                for p in range(start[node], end[node]):
                    if rank_sorted[p] >= r:
                        continue
                    s = 0.0
                    for j in range(d):
                        t = sp[p, j] - q[j]
                        s += t * t
                    if s > best2:
                        continue
                    dist = np.sqrt(s)
                    if dist < best or (dist == best and oidx[p] < bi):
                        best = dist
                        bi = oidx[p]
                        best2 = s * (1.0 + _SLACK)
            else:
                if q[sdim[node]] < sval[node]:
                    near = left[node]
                    far = right[node]
                else:
                    near = right[node]
                    far = left[node]
                stack[top] = far
                stack[top + 1] = near
                top += 2
        dep[me] = bi
        delta[me] = best
    return dep, delta


@nb.njit(cache=True)
def _farthest_d2(sp, start, end, left, right, blo, bhi, p0, best2):
    """Largest squared distance from point ``p0`` exceeding ``best2`` (else ``best2``)."""
    q = sp[p0]
    d = sp.shape[1]
    stack = np.empty(256, np.int64)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        if _box_maxd2(q, blo, bhi, node) <= best2:
            continue
        if left[node] < 0:
            for p in range(start[node], end[node]):
                s = 0.0
                for j in range(d):
                    t = sp[p, j] - q[j]
                    s += t * t
                if s > best2:
                    best2 = s
        else:
            a = left[node]
            b = right[node]
            # visit the child with the larger potential first
            if _box_maxd2(q, blo, bhi, a) > _box_maxd2(q, blo, bhi, b):
                a, b = b, a
            stack[top] = a
            stack[top + 1] = b
            top += 2
    return best2


@nb.njit(cache=True)
def _diameter2(sp, start, end, left, right, blo, bhi):
    best2 = _farthest_d2(sp, start, end, left, right, blo, bhi, 0, 0.0)
    for p in range(1, sp.shape[0]):
        best2 = _farthest_d2(sp, start, end, left, right, blo, bhi, p, best2)
    return best2


def diameter(tree):
    """Largest pairwise distance in the tree's point set."""
    d2 = _diameter2(tree.sorted_points, tree.start, tree.end, tree.left, tree.right,
                    tree.box_lo, tree.box_hi)
    return float(np.sqrt(d2))


@dataclass
class DpcResult:
    rho: np.ndarray
    delta: np.ndarray
    dependent: np.ndarray
    labels: np.ndarray
    centers: np.ndarray

    @property
    def n_clusters(self):
        return int(self.centers.size)

    @property
    def n_noise(self):
        return int(np.sum(self.labels == NOISE))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("index,rho,delta,dependent,label\n")
            for i in range(self.rho.size):
                fh.write(f"{i},{self.rho[i]},{self.delta[i]!r},{self.dependent[i]},{self.labels[i]}\n")

    def decision_graph_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("rho,delta\n")
            for r, dl in zip(self.rho, self.delta):
                fh.write(f"{r},{dl!r}\n")


def density_rank(rho):
    """Rank 0 = densest; equal densities ordered by index."""
    order = np.lexsort((np.arange(rho.size), -np.asarray(rho)))
    rank = np.empty(rho.size, np.int64)
    rank[order] = np.arange(rho.size)
    return order, rank


def dpc_cluster(data, d_cut, rho_min, delta_min, tree=None):
    """Density-peaks clustering of a :class:`Dataset`.

    Points with fewer than ``rho_min`` neighbors within ``d_cut`` are noise.
    Non-noise points with dependent distance >= ``delta_min`` are centers;
    every other non-noise point takes its dependent point's label. Cluster
    ids follow the density order of the centers.
    """
    if not d_cut > 0:
        raise ValidationError("d_cut must be positive")
    if rho_min < 1:
        raise ValidationError("rho_min must be >= 1")
    if tree is None:
        tree = build(data)
    n = tree.n
    rho = tree.count_within(data.points, d_cut) - 1
    order, rank = density_rank(rho)
    rank_sorted = np.ascontiguousarray(rank[tree.order])
    minrank = _node_min_rank(rank_sorted, tree.start, tree.end)
    dep, delta = _nearest_denser(tree.sorted_points, tree.order, tree.start, tree.end, tree.left,
                                 tree.right, tree.split_dim, tree.split_value, tree.box_lo,
                                 tree.box_hi, rank_sorted, minrank)
    delta[order[0]] = diameter(tree) if n > 1 else 0.0
    noise = rho < rho_min
    is_center = ~noise & (delta >= delta_min)
    if (~noise).any() and not is_center.any():
        raise ValidationError(
            f"no cluster centers: delta_min={delta_min} exceeds the largest delta {delta[~noise].max()}")
    labels = np.full(n, NOISE, np.int64)
    centers = []
    for i in order:
        if noise[i]:
            continue
        if is_center[i]:
            labels[i] = len(centers)
            centers.append(i)
        else:
            labels[i] = labels[dep[i]]
    return DpcResult(rho, delta, dep, labels, np.array(centers, dtype=np.int64))


def estimate_dcut(source, points, rho_min, m):
    """The m-th largest rho_min-NN distance over ``points``.

    ``source`` is an estimator (or exact estimator with ``exclude_self``).
    """
    P = np.asarray(points, dtype=np.float64)
    if not 1 <= rho_min <= source.k_max:
        raise ValidationError(f"rho_min={rho_min} out of range [1, {source.k_max}]")
    if not 1 <= m <= P.shape[0]:
        raise ValidationError(f"m={m} out of range [1, {P.shape[0]}]")
    dist = source.estimate_many(P)[:, rho_min - 1]
    return float(-np.partition(-dist, m - 1)[m - 1])


def adjusted_rand(labels_a, labels_b):
    """Adjusted Rand Index; noise counts as one more label."""
    from sklearn.metrics import adjusted_rand_score

    return float(adjusted_rand_score(labels_a, labels_b))
