"""Case studies built on k-NN distance estimates."""

from .aknn import aknn_batch, aknn_search, recall
from .density import DensityGrid, density_grid, knn_density, unit_ball_volume
from .dpc import DpcResult, adjusted_rand, dpc_cluster, estimate_dcut
from .outliers import DodParams, detect_outliers, kth_distances, radius_for_count

__all__ = [
    "DensityGrid", "DodParams", "DpcResult", "adjusted_rand", "aknn_batch", "aknn_search",
    "density_grid", "detect_outliers", "dpc_cluster", "estimate_dcut", "knn_density",
    "kth_distances", "radius_for_count", "recall", "unit_ball_volume",
]
