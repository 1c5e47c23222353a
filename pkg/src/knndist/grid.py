"""Uniform pivot grid with precomputed k-NN distance vectors.

Each dimension of the reference bounding box is cut into ``c`` equal,
right-open intervals (the last one closed). Cell ``(i_1, ..., i_d)`` owns a
pivot at its centroid and stores that pivot's exact distances to its
``k_max`` nearest reference points. Cells are flattened row-major.

Stored vectors are float32 rounded *up*, so ``dist(q, p) + v_p[k-1]`` stays
a valid upper bound on the k-th NN distance of ``q``.
"""

import struct
from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import ArtifactError, BudgetError, ValidationError

GRID_MAGIC = b"KNNGRID\x00"
GRID_VERSION = 1
DEFAULT_MEMORY_BUDGET = 4 * 1024**3

# default cells per dimension, by dimensionality
DEFAULT_C = {1: 2048, 2: 2048, 3: 256, 4: 32, 5: 32}


@nb.njit(cache=True, inline="always")
def _cell_index(q, lo, hi, c):
    """Row-major flat index of the cell containing ``q`` (clamped)."""
    flat = 0
    for j in range(q.shape[0]):
        w = hi[j] - lo[j]
        i = 0
        if w > 0.0:
            f = np.floor((q[j] - lo[j]) * c / w)
            if f >= c:
                i = c - 1
            elif f > 0:
                i = int(f)
        flat = flat * c + i
    return flat


@nb.njit(cache=True, inline="always")
def _centroid_dist(q, lo, hi, c, flat):
    """Distance from ``q`` to the centroid of cell ``flat``."""
    d = q.shape[0]
    s = 0.0
    rem = flat
    for j in range(d - 1, -1, -1):
        i = rem % c
        rem //= c
        p = lo[j] + (i + 0.5) * (hi[j] - lo[j]) / c
        t = q[j] - p
        s += t * t
    return np.sqrt(s)


@nb.njit(cache=True)
def _pivot_bounds(Q, lo, hi, c, vectors):
    m = Q.shape[0]
    kmax = vectors.shape[1]
    out = np.empty((m, kmax), np.float64)
    for t in range(m):
        cell = _cell_index(Q[t], lo, hi, c)
        dq = _centroid_dist(Q[t], lo, hi, c, cell)
        for k in range(kmax):
            out[t, k] = dq + vectors[cell, k]
    return out


@nb.njit(cache=True)
def _lookup(Q, lo, hi, c):
    m = Q.shape[0]
    cells = np.empty(m, np.int64)
    dq = np.empty(m, np.float64)
    for t in range(m):
        cells[t] = _cell_index(Q[t], lo, hi, c)
        dq[t] = _centroid_dist(Q[t], lo, hi, c, cells[t])
    return cells, dq


def _round_up_f32(v):
    v = np.asarray(v, dtype=np.float64)
    v32 = v.astype(np.float32)
    low = v32.astype(np.float64) < v
    v32[low] = np.nextafter(v32[low], np.float32(np.inf))
    return v32


@dataclass(frozen=True)
class Pivot:
    cell: tuple
    location: np.ndarray
    knn_distances: np.ndarray


class PivotGrid:
    """Grid of ``c**d`` cell-centroid pivots over a bounding box."""

    def __init__(self, bbox, c, vectors):
        bbox = np.ascontiguousarray(bbox, dtype=np.float64)
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        d = bbox.shape[0]
        if vectors.ndim != 2 or vectors.shape[0] != c**d:
            raise ValidationError(f"expected {c**d} pivot vectors, got array of shape {vectors.shape}")
        self.bbox = bbox
        self.c = int(c)
        self.vectors = vectors
        self.lo = np.ascontiguousarray(bbox[:, 0])
        self.hi = np.ascontiguousarray(bbox[:, 1])
        for a in (self.bbox, self.vectors, self.lo, self.hi):
            a.setflags(write=False)

    @property
    def dim(self):
        return self.bbox.shape[0]

    @property
    def k_max(self):
        return self.vectors.shape[1]

    @property
    def n_pivots(self):
        return self.vectors.shape[0]

    def cell_width(self):
        return (self.hi - self.lo) / self.c

    def cell_of(self, q):
        """Multi-index of the cell holding ``q`` (clamped to the grid)."""
        q = self._check_query(q)
        flat = _cell_index(q, self.lo, self.hi, self.c)
        return self.unflatten(flat)

    def unflatten(self, flat):
        return tuple(int(i) for i in np.unravel_index(flat, (self.c,) * self.dim))

    def centroid(self, cell):
        cell = np.asarray(cell, dtype=np.float64)
        return self.lo + (cell + 0.5) * (self.hi - self.lo) / self.c

    def all_pivot_locations(self):
        """``(c**d, d)`` array of pivot locations in flat cell order."""
        axes = [self.lo[j] + (np.arange(self.c) + 0.5) * (self.hi[j] - self.lo[j]) / self.c
                for j in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])

    def _check_query(self, q):
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValidationError(f"query has shape {q.shape}, grid has d={self.dim}")
        return np.ascontiguousarray(q)

    def locate(self, q):
        """Pivot of the cell containing ``q``; O(1), no data access."""
        q = self._check_query(q)
        flat = _cell_index(q, self.lo, self.hi, self.c)
        cell = self.unflatten(flat)
        return Pivot(cell, self.centroid(cell), self.vectors[flat])

    def lookup(self, queries):
        """Flat cell index and query-to-pivot distance for each query row."""
        Q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, self.dim))
        return _lookup(Q, self.lo, self.hi, self.c)

    def pivot_bound(self, q, k):
        """Triangle-inequality upper bound ``dist(q, p) + dist(p, x_p^k)``."""
        if not 1 <= k <= self.k_max:
            raise ValidationError(f"k={k} out of range [1, {self.k_max}]")
        q = self._check_query(q)
        return float(_pivot_bounds(q[None, :], self.lo, self.hi, self.c, self.vectors)[0, k - 1])

    def pivot_bounds(self, queries):
        """Bound for every k at once; ``(m, k_max)`` array."""
        Q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, self.dim))
        return _pivot_bounds(Q, self.lo, self.hi, self.c, self.vectors)

    # ---------------------------------------------------------------- i/o

    def save(self, path):
        d = self.dim
        with open(path, "wb") as fh:
            fh.write(GRID_MAGIC)
            fh.write(struct.pack("<IIII", GRID_VERSION, d, self.c, self.k_max))
            fh.write(self.bbox.astype("<f8").tobytes())
            fh.write(self.vectors.astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise ArtifactError(f"cannot read grid file {path}: {exc.strerror or exc}") from exc
        if raw[:8] != GRID_MAGIC:
            raise ArtifactError(f"{path}: not a pivot grid file")
        version, d, c, kmax = struct.unpack_from("<IIII", raw, 8)
        if version != GRID_VERSION:
            raise ArtifactError(f"{path}: unsupported grid version {version}")
        off = 24
        nbox = 2 * d * 8
        nvec = (c**d) * kmax * 4
        if len(raw) != off + nbox + nvec:
            raise ArtifactError(f"{path}: size {len(raw)} does not match header (d={d}, c={c}, k_max={kmax})")
        bbox = np.frombuffer(raw, "<f8", 2 * d, off).reshape(d, 2).astype(np.float64)
        vec = np.frombuffer(raw, "<f4", (c**d) * kmax, off + nbox).reshape(c**d, kmax).astype(np.float32)
        return cls(bbox, c, vec)

    def __repr__(self):
        return f"PivotGrid(d={self.dim}, c={self.c}, k_max={self.k_max})"


def required_bytes(d, c, k_max):
    return (c**d) * k_max * 4


def build_grid(data, c, k_max, tree, memory_budget=DEFAULT_MEMORY_BUDGET, chunk=65536):
    """Build the grid over ``data``'s bounding box using exact kd-tree search.

    Raises :class:`BudgetError` if the pivot vectors would need more than
    ``memory_budget`` bytes.
    """
    c = int(c)
    k_max = int(k_max)
    if c < 1:
        raise ValidationError("c must be >= 1")
    if not 1 <= k_max <= data.n:
        raise ValidationError(f"k_max={k_max} out of range [1, {data.n}]")
    if tree.data is not data and tree.n != data.n:
        raise ValidationError("tree was not built over this dataset")
    need = required_bytes(data.dim, c, k_max)
    if need > memory_budget:
        raise BudgetError(
            f"pivot grid needs {need} bytes ({c}^{data.dim} pivots x {k_max} x 4 B), "
            f"budget is {memory_budget} bytes", need, memory_budget)
    shell = PivotGrid(data.bbox, c, np.zeros((c**data.dim, 1), np.float32))
    locs = shell.all_pivot_locations()
    vectors = np.empty((locs.shape[0], k_max), np.float32)
    for s in range(0, locs.shape[0], chunk):
        dist = tree.knn_distances(locs[s:s + chunk], k_max)
        vectors[s:s + chunk] = _round_up_f32(dist)
    return PivotGrid(shell.bbox, c, vectors)
