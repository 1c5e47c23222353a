"""Exact k-NN search on a kd-tree with branch-and-bound pruning.

The tree splits at the median of the widest-spread dimension until a node
holds at most ``leaf_size`` points. Points are stored in leaf order for
locality; public results always use the caller's row indices.

Distance comparisons use squared distances accumulated dimension by
dimension. Ties on distance are broken by ascending point index, so results
are identical to a sorted linear scan.
"""

from typing import NamedTuple

import numba as nb
import numpy as np

from .binio import read_container, write_container
from .dataset import Dataset
from .errors import ArtifactError, ValidationError

_STACK = 256
TREE_MAGIC = b"KNNDTREE"
TREE_VERSION = 1
_FIELDS = ("order", "start", "end", "left", "right", "split_dim", "split_value",
           "box_lo", "box_hi", "node_depth")
# relative slack that keeps squared-radius tests conservative before an
# exact sqrt comparison
_SLACK = 1e-12


class NeighborList(NamedTuple):
    indices: np.ndarray
    distances: np.ndarray


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------

@nb.njit(cache=True)
def _select(pts, dim, idx, lo, hi, nth):
    """Three-way quickselect on ``pts[idx[lo:hi], dim]`` placing rank nth."""
    while hi - lo > 1:
        a = pts[idx[lo], dim]
        b = pts[idx[(lo + hi) // 2], dim]
        c = pts[idx[hi - 1], dim]
        if a > b:
            a, b = b, a
        if b > c:
            b = c
        v = a if a > b else b
        lt = lo
        i = lo
        gt = hi
        while i < gt:
            x = pts[idx[i], dim]
            if x < v:
                t = idx[lt]
                idx[lt] = idx[i]
                idx[i] = t
                lt += 1
                i += 1
            elif x > v:
                gt -= 1
                t = idx[gt]
                idx[gt] = idx[i]
                idx[i] = t
            else:
                i += 1
        if nth < lt:
            hi = lt
        elif nth >= gt:
            lo = gt
        else:
            return


@nb.njit(cache=True)
def _build(pts, leaf_size):
    n, d = pts.shape
    cap = 2 * n
    idx = np.arange(n)
    start = np.empty(cap, np.int64)
    end = np.empty(cap, np.int64)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    sdim = np.full(cap, -1, np.int64)
    sval = np.zeros(cap, np.float64)
    blo = np.empty((cap, d), np.float64)
    bhi = np.empty((cap, d), np.float64)
    depth = np.zeros(cap, np.int64)
    start[0] = 0
    end[0] = n
    count = 1
    stack = np.empty(cap, np.int64)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        s = start[node]
        e = end[node]
        for j in range(d):
            mn = pts[idx[s], j]
            mx = mn
            for i in range(s + 1, e):
                v = pts[idx[i], j]
                if v < mn:
                    mn = v
                elif v > mx:
                    mx = v
            blo[node, j] = mn
            bhi[node, j] = mx
        if e - s <= leaf_size:
            continue
        best = 0
        spread = bhi[node, 0] - blo[node, 0]
        for j in range(1, d):
            w = bhi[node, j] - blo[node, j]
            if w > spread:
                spread = w
                best = j
        if spread <= 0.0:
            continue  # all points coincide; cannot split
        mid = s + (e - s) // 2
        _select(pts, best, idx, s, e, mid)
        sdim[node] = best
        sval[node] = pts[idx[mid], best]
        lc = count
        rc = count + 1
        count += 2
        start[lc] = s
        end[lc] = mid
        start[rc] = mid
        end[rc] = e
        depth[lc] = depth[node] + 1
        depth[rc] = depth[node] + 1
        left[node] = lc
        right[node] = rc
        stack[sp] = rc
        stack[sp + 1] = lc
        sp += 2
    return (idx, start[:count].copy(), end[:count].copy(), left[:count].copy(),
            right[:count].copy(), sdim[:count].copy(), sval[:count].copy(),
            blo[:count].copy(), bhi[:count].copy(), depth[:count].copy())


# --------------------------------------------------------------------------
# query kernels
# --------------------------------------------------------------------------

@nb.njit(cache=True, inline="always")
def _inside(d2, r, r2lo, r2hi):
    if d2 <= r2lo:
        return True
    if d2 > r2hi:
        return False
    return np.sqrt(d2) <= r


@nb.njit(cache=True, inline="always")
def _box_mind2(q, blo, bhi, node):
    s = 0.0
    for j in range(q.shape[0]):
        if q[j] < blo[node, j]:
            t = blo[node, j] - q[j]
            s += t * t
        elif q[j] > bhi[node, j]:
            t = q[j] - bhi[node, j]
            s += t * t
    return s


@nb.njit(cache=True, inline="always")
def _box_maxd2(q, blo, bhi, node):
    s = 0.0
    for j in range(q.shape[0]):
        a = q[j] - blo[node, j]
        b = bhi[node, j] - q[j]
        if a < 0.0:
            a = -a
        if b < 0.0:
            b = -b
        t = a if a > b else b
        s += t * t
    return s


@nb.njit(cache=True, inline="always")
def _greater(da, ia, db, ib):
    return da > db or (da == db and ia > ib)


@nb.njit(cache=True)
def _sift_down(hd, hi, size, pos):
    while True:
        l = 2 * pos + 1
        if l >= size:
            return
        big = l
        r = l + 1
        if r < size and _greater(hd[r], hi[r], hd[l], hi[l]):
            big = r
        if _greater(hd[big], hi[big], hd[pos], hi[pos]):
            td = hd[big]
            ti = hi[big]
            hd[big] = hd[pos]
            hi[big] = hi[pos]
            hd[pos] = td
            hi[pos] = ti
            pos = big
        else:
            return


@nb.njit(cache=True)
def _knn_one(sp, oidx, start, end, left, right, sdim, sval, blo, bhi,
             q, k, tau, out_i, out_d):
    """Fill ``out_i``/``out_d`` (length k) and return the neighbor count.

    Points farther than ``tau`` are never admitted; ``tau = inf`` gives the
    exact k-NN.
    """
    hd = np.empty(k, np.float64)
    hi = np.empty(k, np.int64)
    size = 0
    if np.isinf(tau):
        r2lo = np.inf
        r2hi = np.inf
    else:
        r2lo = tau * tau * (1.0 - _SLACK)
        r2hi = tau * tau * (1.0 + _SLACK)
    stack = np.empty(_STACK, np.int64)
    stack[0] = 0
    top = 1
    d = q.shape[0]
    while top > 0:
        top -= 1
        node = stack[top]
        md2 = _box_mind2(q, blo, bhi, node)
        if md2 > r2hi:
            continue
        if size == k and md2 > hd[0]:
            continue
        if left[node] < 0:
            for p in range(start[node], end[node]):
                s = 0.0
                for j in range(d):
                    t = sp[p, j] - q[j]
                    s += t * t
                if size == k:
                    if not _greater(hd[0], hi[0], s, oidx[p]):
                        continue
                if not _inside(s, tau, r2lo, r2hi):
                    continue
                if size < k:
                    # sift up
                    pos = size
                    hd[pos] = s
                    hi[pos] = oidx[p]
                    size += 1
                    while pos > 0:
                        par = (pos - 1) // 2
                        if _greater(hd[pos], hi[pos], hd[par], hi[par]):
                            td = hd[par]
                            ti = hi[par]
                            hd[par] = hd[pos]
                            hi[par] = hi[pos]
                            hd[pos] = td
                            hi[pos] = ti
                            pos = par
                        else:
                            break
                else:
                    hd[0] = s
                    hi[0] = oidx[p]
                    _sift_down(hd, hi, size, 0)
        else:
            dim = sdim[node]
            if q[dim] < sval[node]:
                near = left[node]
                far = right[node]
            else:
                near = right[node]
                far = left[node]
            stack[top] = far
            stack[top + 1] = near
            top += 2
    n_found = size
    # pop the max-heap into ascending order
    while size > 0:
        size -= 1
        out_d[size] = np.sqrt(hd[0])
        out_i[size] = hi[0]
        hd[0] = hd[size]
        hi[0] = hi[size]
        _sift_down(hd, hi, size, 0)
    for t in range(n_found, k):
        out_d[t] = np.inf
        out_i[t] = -1
    return n_found


@nb.njit(cache=True, parallel=True)
def _knn_batch(sp, oidx, start, end, left, right, sdim, sval, blo, bhi, Q, k, taus):
    m = Q.shape[0]
    out_i = np.empty((m, k), np.int64)
    out_d = np.empty((m, k), np.float64)
    counts = np.empty(m, np.int64)
    for t in nb.prange(m):
        counts[t] = _knn_one(sp, oidx, start, end, left, right, sdim, sval, blo, bhi,
                             Q[t], k, taus[t], out_i[t], out_d[t])
    return out_i, out_d, counts


@nb.njit(cache=True)
def _count_one(sp, start, end, left, right, blo, bhi, q, r, r2lo, r2hi):
    stack = np.empty(_STACK, np.int64)
    stack[0] = 0
    top = 1
    total = 0
    d = q.shape[0]
    while top > 0:
        top -= 1
        node = stack[top]
        if _box_mind2(q, blo, bhi, node) > r2hi:
            continue
        if _box_maxd2(q, blo, bhi, node) <= r2lo:
            total += end[node] - start[node]
            continue
        if left[node] < 0:
            for p in range(start[node], end[node]):
                s = 0.0
                for j in range(d):
                    t = sp[p, j] - q[j]
                    s += t * t
                if _inside(s, r, r2lo, r2hi):
                    total += 1
        else:
            stack[top] = left[node]
            stack[top + 1] = right[node]
            top += 2
    return total


@nb.njit(cache=True, parallel=True)
def _count_batch(sp, start, end, left, right, blo, bhi, Q, r):
    m = Q.shape[0]
    out = np.empty(m, np.int64)
    r2lo = r * r * (1.0 - _SLACK)
    r2hi = r * r * (1.0 + _SLACK)
    for t in nb.prange(m):
        out[t] = _count_one(sp, start, end, left, right, blo, bhi, Q[t], r, r2lo, r2hi)
    return out


# --------------------------------------------------------------------------
# public API
# --------------------------------------------------------------------------

class KdTree:
    """Immutable kd-tree over a :class:`Dataset`.

    Build with :func:`build`. All query methods are read-only and may be
    called concurrently.
    """

    def __init__(self, data, leaf_size, arrays):
        (self.order, self.start, self.end, self.left, self.right, self.split_dim,
         self.split_value, self.box_lo, self.box_hi, self.node_depth) = arrays
        self.data = data
        self.leaf_size = leaf_size
        # leaf-ordered copy of the points for cache-friendly scans
        self.sorted_points = np.ascontiguousarray(data.points[self.order])
        for a in (self.sorted_points, *arrays):
            a.setflags(write=False)

    @property
    def n(self):
        return self.data.n

    @property
    def dim(self):
        return self.data.dim

    @property
    def n_nodes(self):
        return self.start.shape[0]

    @property
    def depth(self):
        return int(self.node_depth.max())

    def leaves(self):
        """Yield the original point indices held by each leaf."""
        for node in np.nonzero(self.left < 0)[0]:
            yield self.order[self.start[node]:self.end[node]]

    def _kernel_args(self):
        return (self.sorted_points, self.order, self.start, self.end, self.left, self.right,
                self.split_dim, self.split_value, self.box_lo, self.box_hi)

    def _check_query(self, q):
        q = np.asarray(q, dtype=np.float64)
        if q.ndim != 1 or q.shape[0] != self.dim:
            raise ValidationError(f"query has dimension {q.shape}, tree has d={self.dim}")
        return np.ascontiguousarray(q)

    def _check_k(self, k):
        if not 1 <= k <= self.n:
            raise ValidationError(f"k={k} out of range [1, {self.n}]")
        return int(k)

    def knn(self, q, k):
        """Exact k nearest neighbors of ``q``, ascending by (distance, index)."""
        q = self._check_query(q)
        k = self._check_k(k)
        out_i = np.empty(k, np.int64)
        out_d = np.empty(k, np.float64)
        _knn_one(*self._kernel_args(), q, k, np.inf, out_i, out_d)
        return NeighborList(out_i, out_d)

    def knn_seeded(self, q, k, tau):
        """k-NN search whose pruning radius starts at ``tau`` instead of infinity.

        Only points within distance ``tau`` are admitted, so fewer than k
        neighbors come back when ``tau`` is below the true k-th NN distance.
        The result is always the prefix of the exact answer lying within
        ``tau``.
        """
        q = self._check_query(q)
        k = self._check_k(k)
        if not tau > 0:
            raise ValidationError(f"tau must be positive, got {tau}")
        out_i = np.empty(k, np.int64)
        out_d = np.empty(k, np.float64)
        cnt = _knn_one(*self._kernel_args(), q, k, float(tau), out_i, out_d)
        return NeighborList(out_i[:cnt], out_d[:cnt])

    def knn_batch(self, queries, k, tau=None):
        """Vectorized :meth:`knn` / :meth:`knn_seeded`.

        Returns ``(indices, distances, counts)``; rows with fewer than k
        neighbors are padded with index -1 and distance inf.
        """
        Q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, self.dim))
        k = self._check_k(k)
        if tau is None:
            taus = np.full(Q.shape[0], np.inf)
        else:
            taus = np.broadcast_to(np.asarray(tau, dtype=np.float64), (Q.shape[0],)).copy()
            if not (taus > 0).all():
                raise ValidationError("tau must be positive")
        return _knn_batch(*self._kernel_args(), Q, k, taus)

    def knn_distances(self, queries, k):
        """Exact k-NN distance matrix ``(m, k)`` for a batch of queries."""
        return self.knn_batch(queries, k)[1]

    def count_within(self, queries, r):
        """Number of reference points with distance <= r, per query."""
        Q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, self.dim))
        if not r >= 0:
            raise ValidationError("radius must be non-negative")
        return _count_batch(self.sorted_points, self.start, self.end, self.left, self.right,
                            self.box_lo, self.box_hi, Q, float(r))

    def save(self, path):
        arrays = {"points": self.data.points}
        arrays.update((f, getattr(self, f)) for f in _FIELDS)
        write_container(path, TREE_MAGIC, TREE_VERSION, {"leaf_size": self.leaf_size}, arrays)

    @classmethod
    def load(cls, path):
        meta, a = read_container(path, TREE_MAGIC, TREE_VERSION)
        try:
            arrays = tuple(np.array(a[f]) for f in _FIELDS)
        except KeyError as exc:
            raise ArtifactError(f"{path}: tree file lacks array {exc}") from None
        return cls(Dataset(a["points"]), int(meta["leaf_size"]), arrays)

    def __repr__(self):
        return f"KdTree(n={self.n}, d={self.dim}, nodes={self.n_nodes}, depth={self.depth})"


def build(data, leaf_size=16):
    """Build a kd-tree over ``data`` (a :class:`Dataset` or ``(n, d)`` array)."""
    if not isinstance(data, Dataset):
        data = Dataset(data)
    if leaf_size < 1:
        raise ValidationError("leaf_size must be >= 1")
    arrays = _build(data.points, int(leaf_size))
    return KdTree(data, int(leaf_size), arrays)
