"""k-NN density estimation over a pixel grid."""

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError

PERCENTILES = (20, 60, 90)
# bin colours for the heatmap, low to high density
_PALETTE = np.array([[49, 54, 149], [116, 173, 209], [253, 174, 97], [215, 48, 39]], np.uint8)


def unit_ball_volume(d):
    """Volume of the d-dimensional unit ball."""
    if d < 1:
        raise ValidationError("dimension must be >= 1")
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def knn_density(dv, k, n, d):
    """Density estimate at a query from its first ``k`` NN distances.

    ``(1 / (n V_d)) * (sum_j j^(d/2) / sum_j dist_j^d) ^ (d/2)`` for
    ``j = 1..k``. Returns ``inf`` when any of those distances is zero.
    """
    dv = np.asarray(dv, dtype=np.float64)
    if not 1 <= k <= dv.shape[-1]:
        raise ValidationError(f"k={k} out of range [1, {dv.shape[-1]}]")
    return float(knn_density_many(dv.reshape(1, -1), k, n, d)[0])


def knn_density_many(D, k, n, d):
    """Row-wise :func:`knn_density` for an ``(m, >=k)`` distance matrix."""
    D = np.asarray(D, dtype=np.float64)[:, :k]
    num = np.sum(np.arange(1, k + 1, dtype=np.float64) ** (d / 2))
    den = np.sum(D ** d, axis=1)
    out = np.full(D.shape[0], np.inf)
    ok = ~(D == 0).any(axis=1)
    out[ok] = (num / den[ok]) ** (d / 2) / (n * unit_ball_volume(d))
    return out


def contour_bins(values):
    """Bin index 0..3 per value from the 20/60/90 percentiles of the finite values.

    A value equal to a threshold goes to the upper bin; ``inf`` goes to the top bin.
    """
    v = np.asarray(values, dtype=np.float64)
    fin = v[np.isfinite(v)]
    if fin.size == 0:
        return np.full(v.shape, len(PERCENTILES), np.int64), np.full(len(PERCENTILES), np.inf)
    thr = np.percentile(fin, PERCENTILES)
    bins = np.searchsorted(thr, v, side="right").astype(np.int64)
    bins[np.isposinf(v)] = len(PERCENTILES)
    return bins, thr


@dataclass
class DensityGrid:
    """Densities at pixel centroids; arrays are indexed ``[y, x]``."""

    bbox: np.ndarray
    resolution: tuple
    k: int
    density: np.ndarray
    bins: np.ndarray
    thresholds: np.ndarray

    def centroids(self):
        W, H = self.resolution
        xs = self.bbox[0, 0] + (np.arange(W) + 0.5) * (self.bbox[0, 1] - self.bbox[0, 0]) / W
        ys = self.bbox[1, 0] + (np.arange(H) + 0.5) * (self.bbox[1, 1] - self.bbox[1, 0]) / H
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def agreement(self, other):
        """Fraction of pixels sharing a contour bin with ``other``."""
        if self.bins.shape != other.bins.shape:
            raise ValidationError("density grids have different resolutions")
        return float(np.mean(self.bins == other.bins))

    def to_csv(self, path):
        H, W = self.density.shape
        with open(path, "w", newline="") as fh:
            fh.write("pixel_x,pixel_y,density,bin\n")
            for y in range(H):
                for x in range(W):
                    fh.write(f"{x},{y},{self.density[y, x]!r},{self.bins[y, x]}\n")

    def to_ppm(self, path):
        """Binary PPM heatmap; row 0 of the image is the top (largest y)."""
        H, W = self.density.shape
        img = _PALETTE[self.bins[::-1]]
        with open(path, "wb") as fh:
            fh.write(f"P6\n{W} {H}\n255\n".encode())
            fh.write(img.tobytes())


def density_grid(source, resolution, k, n, bbox):
    """Density at every pixel centroid of a ``W x H`` grid over a 2D ``bbox``.

    ``source`` supplies k-NN distance vectors via ``estimate_many`` (a trained
    estimator, or an exact estimator for the reference result). ``n`` is the
    reference set size used in the density formula.
    """
    bbox = np.asarray(bbox, dtype=np.float64)
    if bbox.shape != (2, 2):
        raise ValidationError(f"density grids need 2D data, got bbox of shape {bbox.shape}")
    if getattr(source, "dim", 2) != 2:
        raise ValidationError("density grids need a 2D distance source")
    W, H = (int(r) for r in resolution)
    if W < 1 or H < 1:
        raise ValidationError("resolution must be positive")
    if not 1 <= k <= source.k_max:
        raise ValidationError(f"k={k} out of range [1, {source.k_max}]")
    shell = DensityGrid(bbox, (W, H), k, None, None, None)
    D = source.estimate_many(shell.centroids())
    dens = knn_density_many(D, k, n, 2)
    bins, thr = contour_bins(dens)
    return DensityGrid(bbox, (W, H), k, dens.reshape(H, W), bins.reshape(H, W), thr)
