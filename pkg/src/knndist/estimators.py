"""k-NN distance estimators behind a common ``estimate`` interface.

Kinds
-----
pivot       triangle-inequality bound from the nearest pivot (no model)
querynet    network on the query coordinates only
pivnet      network on [q, dist(q, p), v_p], all k_max outputs at once
pivnet_itr  scalar network on [q, k, dist(q, p), v_p[k-1]], run once per k

Network inference runs in one compiled kernel covering cell lookup, feature
assembly, input scaling, the forward pass, output scaling and clamping, so
the per-query cost does not depend on the size of the reference set.
"""

from dataclasses import dataclass
from pathlib import Path

import numba as nb
import numpy as np

from . import nn
from .binio import sha256_file
from .errors import ArtifactError, ValidationError
from .grid import PivotGrid, _cell_index, _centroid_dist, _pivot_bounds

KINDS = ("pivot", "querynet", "pivnet", "pivnet_itr")
_CODE = {"querynet": 0, "pivnet": 1, "pivnet_itr": 2}
DEFAULT_HIDDEN = (128, 128, 32)
HIDDEN_2D = (64, 64, 32)


def default_hidden(d):
    """Hidden layer sizes by data dimensionality (narrower for 2D data)."""
    return HIDDEN_2D if d == 2 else DEFAULT_HIDDEN


def feature_width(kind, d, k_max):
    if kind == "querynet":
        return d
    if kind == "pivnet":
        return d + 1 + k_max
    if kind == "pivnet_itr":
        return d + 3
    raise ValidationError(f"kind {kind!r} has no feature layout")


def assemble_features(kind, queries, grid=None, k=None):
    """Raw (unscaled) feature rows for a batch of queries.

    For ``pivnet_itr`` pass ``k`` (scalar or per-row array, 1-based).
    Pivot features come from the grid lookup; no neighbor search happens.
    """
    Q = np.asarray(queries, dtype=np.float64)
    single = Q.ndim == 1
    Q = np.atleast_2d(Q)
    if kind == "querynet":
        F = Q.copy()
    elif kind in ("pivnet", "pivnet_itr"):
        if grid is None:
            raise ValidationError(f"{kind} features need a pivot grid")
        if Q.shape[1] != grid.dim:
            raise ValidationError(f"query dimension {Q.shape[1]} != grid dimension {grid.dim}")
        cells, dq = grid.lookup(Q)
        if kind == "pivnet":
            F = np.hstack([Q, dq[:, None], grid.vectors[cells].astype(np.float64)])
        else:
            if k is None:
                raise ValidationError("pivnet_itr features need k")
            kk = np.broadcast_to(np.asarray(k, dtype=np.int64), (Q.shape[0],))
            if kk.min() < 1 or kk.max() > grid.k_max:
                raise ValidationError(f"k out of range [1, {grid.k_max}]")
            vk = grid.vectors[cells, kk - 1].astype(np.float64)
            F = np.column_stack([Q, kk.astype(np.float64), dq, vk])
    else:
        raise ValidationError(f"unknown estimator kind {kind!r}")
    return F[0] if single else F


@dataclass(frozen=True)
class Normalization:
    """Min-max input scaling and max-based target scaling.

    ``scaled = (x - in_offset) / in_scale``; ``y = y_scaled * out_scale``.
    """

    in_offset: np.ndarray
    in_scale: np.ndarray
    out_scale: float

    def __post_init__(self):
        if not (np.all(self.in_scale > 0) and self.out_scale > 0):
            raise ValidationError("normalization scales must be positive")

    def normalize_inputs(self, X):
        return (np.asarray(X, dtype=np.float64) - self.in_offset) / self.in_scale

    def denormalize_inputs(self, Z):
        return np.asarray(Z, dtype=np.float64) * self.in_scale + self.in_offset

    def normalize_targets(self, Y):
        return np.asarray(Y, dtype=np.float64) / self.out_scale

    def denormalize_targets(self, Z):
        return np.asarray(Z, dtype=np.float64) * self.out_scale


def fit_normalization(inputs, targets):
    X = np.asarray(inputs, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if X.size == 0 or Y.size == 0:
        raise ValidationError("cannot fit normalization on empty data")
    lo = X.min(axis=0)
    span = X.max(axis=0) - lo
    span[span <= 0] = 1.0
    top = float(Y.max())
    return Normalization(lo, span, top if top > 0 else 1.0)


# --------------------------------------------------------------------------
# compiled inference
# --------------------------------------------------------------------------

def _flatten(model):
    parts = []
    for w, b in zip(model.weights, model.biases):
        parts += [w.astype(np.float64).ravel(), b.astype(np.float64)]
    return np.concatenate(parts), np.asarray(model.layer_sizes, dtype=np.int64)


@nb.njit(cache=True)
def _mlp(x, params, sizes, a, b):
    """Forward pass of one feature vector; the output ends up in the returned buffer."""
    n_layers = sizes.shape[0] - 1
    src = a
    dst = b
    for t in range(x.shape[0]):
        src[t] = x[t]
    off = 0
    for layer in range(n_layers):
        fin = sizes[layer]
        fout = sizes[layer + 1]
        boff = off + fin * fout
        for j in range(fout):
            dst[j] = params[boff + j]
        for i in range(fin):
            xi = src[i]
            if xi != 0.0:
                row = off + i * fout
                for j in range(fout):
                    dst[j] += xi * params[row + j]
        if layer < n_layers - 1:
            for j in range(fout):
                if dst[j] < 0.0:
                    dst[j] = 0.0
        off = boff + fout
        tmp = src
        src = dst
        dst = tmp
    return src


@nb.njit(cache=True)
def _infer(Q, code, lo, hi, c, vectors, kmax, in_off, in_scale, out_scale,
           params, sizes, isotonic):
    m, d = Q.shape
    width = 0
    for s in sizes:
        if s > width:
            width = s
    a = np.empty(width, np.float64)
    b = np.empty(width, np.float64)
    x = np.empty(sizes[0], np.float64)
    out = np.empty((m, kmax), np.float64)
    for t in range(m):
        q = Q[t]
        for j in range(d):
            x[j] = (q[j] - in_off[j]) / in_scale[j]
        if code == 0:
            y = _mlp(x, params, sizes, a, b)
            for k in range(kmax):
                out[t, k] = y[k] * out_scale
        else:
            cell = _cell_index(q, lo, hi, c)
            dq = _centroid_dist(q, lo, hi, c, cell)
            if code == 1:
                x[d] = (dq - in_off[d]) / in_scale[d]
                for k in range(kmax):
                    x[d + 1 + k] = (vectors[cell, k] - in_off[d + 1 + k]) / in_scale[d + 1 + k]
                y = _mlp(x, params, sizes, a, b)
                for k in range(kmax):
                    out[t, k] = y[k] * out_scale
            else:
                x[d + 1] = (dq - in_off[d + 1]) / in_scale[d + 1]
                for k in range(kmax):
                    x[d] = (k + 1 - in_off[d]) / in_scale[d]
                    x[d + 2] = (vectors[cell, k] - in_off[d + 2]) / in_scale[d + 2]
                    y = _mlp(x, params, sizes, a, b)
                    out[t, k] = y[0] * out_scale
        for k in range(kmax):
            if out[t, k] < 0.0:
                out[t, k] = 0.0
        if isotonic:
            for k in range(1, kmax):
                if out[t, k] < out[t, k - 1]:
                    out[t, k] = out[t, k - 1]
    return out


_EMPTY_GRID = (np.zeros(1), np.ones(1), np.zeros((1, 1), np.float32))

EST_META_VERSION = 1


class Estimator:
    """A constructed, immutable k-NN distance estimator."""

    def __init__(self, kind, k_max, grid=None, model=None, norm=None, isotonic=False):
        if kind not in KINDS:
            raise ValidationError(f"unknown estimator kind {kind!r}; expected one of {KINDS}")
        if kind != "querynet" and grid is None:
            raise ValidationError(f"{kind} requires a pivot grid")
        if kind != "pivot" and (model is None or norm is None):
            raise ValidationError(f"{kind} requires a model and normalization")
        if grid is not None and grid.k_max < k_max:
            raise ValidationError(f"grid k_max {grid.k_max} < estimator k_max {k_max}")
        self.kind = kind
        self.k_max = int(k_max)
        self.grid = grid
        self.model = model
        self.norm = norm
        self.isotonic = bool(isotonic)
        if model is not None:
            sizes = model.layer_sizes
            d = grid.dim if grid is not None else sizes[0]
            if sizes[0] != feature_width(kind, d, k_max):
                raise ValidationError(f"model input size {sizes[0]} does not fit {kind} features")
            want_out = 1 if kind == "pivnet_itr" else k_max
            if sizes[-1] != want_out:
                raise ValidationError(f"model output size {sizes[-1]} != {want_out}")
            self._params, self._sizes = _flatten(model)
            self._in_off = np.ascontiguousarray(norm.in_offset, dtype=np.float64)
            self._in_scale = np.ascontiguousarray(norm.in_scale, dtype=np.float64)
        if grid is not None:
            self._grid_args = (grid.lo, grid.hi, grid.c, grid.vectors)
        else:
            lo, hi, vec = _EMPTY_GRID
            self._grid_args = (lo, hi, 1, vec)

    @property
    def dim(self):
        if self.grid is not None:
            return self.grid.dim
        return self.model.layer_sizes[0]

    def estimate_many(self, queries):
        """``(m, k_max)`` estimated k-NN distances for query rows."""
        Q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, self.dim))
        if self.kind == "pivot":
            out = _pivot_bounds(Q, self.grid.lo, self.grid.hi, self.grid.c, self.grid.vectors)
            out = out[:, :self.k_max]
            return np.maximum.accumulate(out, axis=1) if self.isotonic else out
        lo, hi, c, vec = self._grid_args
        return _infer(Q, _CODE[self.kind], lo, hi, c, vec, self.k_max, self._in_off,
                      self._in_scale, self.norm.out_scale, self._params, self._sizes, self.isotonic)

    def estimate(self, q):
        """Estimated distances to the 1st..k_max-th nearest neighbors of ``q``."""
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValidationError(f"query has shape {q.shape}, estimator expects ({self.dim},)")
        return self.estimate_many(q[None, :])[0]

    # ---------------------------------------------------------------- i/o

    def save(self, path, grid_path=None):
        """Write the estimator; the grid is referenced by path and checksum."""
        meta = {"kind": self.kind, "k_max": self.k_max, "isotonic": self.isotonic,
                "version": EST_META_VERSION}
        if self.grid is not None:
            if grid_path is None:
                raise ValidationError("grid_path is required for estimators that use a grid")
            path = Path(path)
            gp = Path(grid_path)
            try:
                ref = str(gp.resolve().relative_to(path.resolve().parent))
            except ValueError:
                ref = str(gp.resolve())
            meta["grid_path"] = ref
            meta["grid_sha256"] = sha256_file(gp)
        model = self.model if self.model is not None else nn.MlpModel([np.zeros((1, 1), np.float32)],
                                                                      [np.zeros(1, np.float32)])
        arrays = {}
        if self.norm is not None:
            arrays = {"in_offset": self.norm.in_offset, "in_scale": self.norm.in_scale,
                      "out_scale": np.array([self.norm.out_scale])}
        nn.save_model(model, path, meta=meta, arrays=arrays)

    @classmethod
    def load(cls, path, verify=True):
        path = Path(path)
        model, meta, arrays = nn.load_model(path)
        kind = meta.get("kind")
        if kind not in KINDS:
            raise ArtifactError(f"{path}: unknown estimator kind {kind!r}")
        grid = None
        if "grid_path" in meta:
            gp = Path(meta["grid_path"])
            if not gp.is_absolute():
                gp = path.parent / gp
            if not gp.exists():
                raise ArtifactError(f"{path}: referenced grid {gp} is missing")
            if verify and sha256_file(gp) != meta["grid_sha256"]:
                raise ArtifactError(f"{path}: checksum mismatch for grid {gp}")
            grid = PivotGrid.load(gp)
        norm = None
        if kind == "pivot":
            model = None
        else:
            norm = Normalization(arrays["in_offset"], arrays["in_scale"], float(arrays["out_scale"][0]))
        return cls(kind, meta["k_max"], grid=grid, model=model, norm=norm,
                   isotonic=meta.get("isotonic", False))

    def __repr__(self):
        shape = self.model.layer_sizes if self.model is not None else None
        return f"Estimator(kind={self.kind!r}, k_max={self.k_max}, layers={shape})"


class ExactEstimator:
    """Exact k-NN distances from a kd-tree, with the estimator interface.

    With ``exclude_self=True`` the queries are assumed to be members of the
    indexed set and one zero-distance hit (the point itself) is dropped, so
    entry k is the distance to the k-th *other* point.
    """

    kind = "exact"
    isotonic = False

    def __init__(self, tree, k_max, exclude_self=False):
        extra = 1 if exclude_self else 0
        if not 1 <= k_max <= tree.n - extra:
            raise ValidationError(f"k_max={k_max} out of range for |X|={tree.n}")
        self.tree = tree
        self.k_max = int(k_max)
        self.exclude_self = bool(exclude_self)

    @property
    def dim(self):
        return self.tree.dim

    def estimate_many(self, queries):
        if self.exclude_self:
            return self.tree.knn_distances(queries, self.k_max + 1)[:, 1:]
        return self.tree.knn_distances(queries, self.k_max)

    def estimate(self, q):
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValidationError(f"query has shape {q.shape}, estimator expects ({self.dim},)")
        return self.estimate_many(q[None, :])[0]


def pivot_estimator(grid, k_max=None, isotonic=False):
    return Estimator("pivot", k_max or grid.k_max, grid=grid, isotonic=isotonic)
