"""Distance-based outlier detection from k-th NN distances."""

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError


@dataclass(frozen=True)
class DodParams:
    """``variant`` is ``"rk"`` (radius r) or ``"nk"`` (top N)."""

    variant: str
    k: int
    r: float = None
    n: int = None

    def __post_init__(self):
        if self.variant not in ("rk", "nk"):
            raise ValidationError(f"unknown outlier variant {self.variant!r}")
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if self.variant == "rk" and not (self.r is not None and self.r > 0):
            raise ValidationError("the (r,k) variant needs r > 0")
        if self.variant == "nk" and not (self.n is not None and self.n >= 1):
            raise ValidationError("the (N,k) variant needs N >= 1")


def kth_distances(points, source, k):
    """Distance from each point to its k-th nearest *other* point.

    ``source`` is an estimator or an exact estimator built with
    ``exclude_self=True``. A trained estimator is used as is: its training
    queries were never part of the reference set, so entry k already
    approximates the self-excluded distance.
    """
    if not 1 <= k <= source.k_max:
        raise ValidationError(f"k={k} out of range [1, {source.k_max}]")
    return source.estimate_many(points)[:, k - 1]


def select_outliers(kdist, params):
    kdist = np.asarray(kdist, dtype=np.float64)
    if params.variant == "rk":
        return np.nonzero(kdist > params.r)[0]
    if params.n > kdist.size:
        raise ValidationError(f"N={params.n} exceeds |X|={kdist.size}")
    order = np.lexsort((np.arange(kdist.size), -kdist))
    return np.sort(order[:params.n])


def detect_outliers(points, source, params):
    """Sorted indices of the outliers among ``points``."""
    return select_outliers(kth_distances(points, source, params.k), params)


def radius_for_count(kdist, n):
    """A radius r flagging exactly the ``n`` largest values of ``kdist``.

    Picks the midpoint between the n-th and (n+1)-th largest values, so the
    count is exact whenever those two differ.
    """
    v = np.asarray(kdist, dtype=np.float64)
    if not 1 <= n < v.size:
        raise ValidationError(f"N={n} must lie in [1, {v.size - 1}]")
    top = -np.partition(-v, [n - 1, n])[[n - 1, n]]
    return float((top[0] + top[1]) / 2)
