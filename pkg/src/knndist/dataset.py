"""Point sets: CSV ingestion, train/test partitioning and synthetic data.

Points are rows of a float64 ``(n, d)`` array. A single point is a length-d
1-D array.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class Dataset:
    """A non-empty set of finite d-dimensional points."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] == 0:
            raise ValidationError(f"dataset must be a non-empty (n, d) array, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValidationError("dataset contains NaN or infinite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def bbox(self):
        """``(d, 2)`` array of per-dimension ``(min, max)``."""
        return np.column_stack([self.points.min(axis=0), self.points.max(axis=0)])

    def __len__(self):
        return self.n


def load_csv(path, has_header=False, drop_invalid=False):
    """Read one point per row from a comma-separated file.

    Rows with empty, NaN or infinite cells are rejected unless
    ``drop_invalid`` is set, in which case they are skipped. Errors name the
    1-based row number in the file.
    """
    rows = []
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for rowno, row in enumerate(reader, start=1):
            if rowno == 1 and has_header:
                continue
            if not row or (len(row) == 1 and row[0].strip() == ""):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ValidationError(f"row {rowno}: expected {width} columns, got {len(row)}")
            vals = []
            bad = False
            for col, cell in enumerate(row, start=1):
                cell = cell.strip()
                if cell == "":
                    bad = True
                    break
                try:
                    v = float(cell)
                except ValueError:
                    raise ValidationError(
                        f"row {rowno}, column {col}: non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    bad = True
                    break
                vals.append(v)
            if bad:
                if drop_invalid:
                    continue
                raise ValidationError(
                    f"row {rowno}: missing or non-finite value (use drop_invalid to skip such rows)")
            rows.append(vals)
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    return Dataset(np.array(rows, dtype=np.float64))


def write_csv(data, path):
    """Write points with shortest round-trip float formatting."""
    pts = data.points if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        for row in pts:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


@dataclass(frozen=True)
class Partition:
    """Disjoint split of a source dataset into reference set and queries.

    Index arrays refer to rows of ``source``. The reference indices are kept
    in ascending order so the reference set preserves source row order.
    """

    source: Dataset
    reference_idx: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    reference_set: Dataset = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "reference_set", Dataset(self.source.points[self.reference_idx]))

    @property
    def train_queries(self):
        return self.source.points[self.train_idx]

    @property
    def test_queries(self):
        return self.source.points[self.test_idx]


def partition(data, n_train, n_test, seed):
    """Sample train and test queries without replacement; the rest is X."""
    n_train, n_test = int(n_train), int(n_test)
    if n_train < 0 or n_test < 0:
        raise ValidationError("query counts must be non-negative")
    if n_train + n_test >= data.n:
        raise ValidationError(
            f"n_train + n_test = {n_train + n_test} leaves no reference points (|data| = {data.n})")
    perm = np.random.default_rng(seed).permutation(data.n)
    train = perm[:n_train]
    test = perm[n_train:n_train + n_test]
    ref = np.sort(perm[n_train + n_test:])
    return Partition(data, ref, train, test)


def _check_bbox(bbox):
    bbox = np.asarray(bbox, dtype=np.float64)
    if bbox.ndim != 2 or bbox.shape[1] != 2 or bbox.shape[0] == 0:
        raise ValidationError(f"bbox must be a (d, 2) array of (min, max), got shape {bbox.shape}")
    if not np.isfinite(bbox).all():
        raise ValidationError("bbox must be finite")
    bad = np.nonzero(bbox[:, 0] > bbox[:, 1])[0]
    if bad.size:
        j = int(bad[0])
        raise ValidationError(f"bbox dimension {j} is inverted: min {bbox[j, 0]} > max {bbox[j, 1]}")
    return bbox


def augment_uniform(bbox, count, seed):
    """``count`` points i.i.d. uniform in the closed box."""
    bbox = _check_bbox(bbox)
    if count < 0:
        raise ValidationError("count must be non-negative")
    lo, hi = bbox[:, 0], bbox[:, 1]
    pts = np.random.default_rng(seed).uniform(lo, hi, size=(int(count), bbox.shape[0]))
    return np.clip(pts, lo, hi)


def gen_random_walk_clusters(n_clusters, points_per_cluster, step_scale, seed,
                             box=(0.0, 100_000.0), dim=2, return_labels=False):
    """Clusters traced by Gaussian random walks.

    Each walk starts at a location drawn uniformly from ``box`` (applied to
    every dimension) and takes isotropic Gaussian steps with standard
    deviation ``step_scale``; every visited location is a point. Points are
    emitted cluster by cluster.
    """
    if n_clusters < 1 or points_per_cluster < 1:
        raise ValidationError("n_clusters and points_per_cluster must be >= 1")
    if not step_scale >= 0:
        raise ValidationError("step_scale must be non-negative")
    rng = np.random.default_rng(seed)
    starts = rng.uniform(box[0], box[1], size=(n_clusters, dim))
    chunks = []
    for start in starts:
        steps = rng.normal(0.0, step_scale, size=(points_per_cluster, dim))
        steps[0] = 0.0
        chunks.append(start + np.cumsum(steps, axis=0))
    data = Dataset(np.vstack(chunks))
    if return_labels:
        return data, np.repeat(np.arange(n_clusters), points_per_cluster)
    return data


def gen_gaussian_mixture(n_points, n_components, seed, dim=2, spread=(0.02, 0.08),
                         n_outliers=0, return_labels=False):
    """Gaussian blobs in the unit cube, optionally with planted outliers.

    Component means are uniform in [0.15, 0.85]^d, per-component standard
    deviations uniform in ``spread``, and mixture weights Dirichlet(2).
    Outliers are drawn uniformly from the unit cube and labelled -1; they
    come after the inliers.
    """
    if n_points < 1 or n_components < 1 or n_outliers < 0:
        raise ValidationError("n_points and n_components must be >= 1, n_outliers >= 0")
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.15, 0.85, size=(n_components, dim))
    sigmas = rng.uniform(spread[0], spread[1], size=n_components)
    weights = rng.dirichlet(np.full(n_components, 2.0))
    comp = rng.choice(n_components, size=n_points, p=weights)
    pts = means[comp] + rng.standard_normal((n_points, dim)) * sigmas[comp, None]
    labels = comp
    if n_outliers:
        pts = np.vstack([pts, rng.uniform(0.0, 1.0, size=(n_outliers, dim))])
        labels = np.concatenate([comp, np.full(n_outliers, -1)])
    data = Dataset(pts)
    if return_labels:
        return data, labels
    return data
