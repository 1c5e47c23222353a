"""Learned k-NN distance estimation."""

import os

import numba

# prefer OpenMP over TBB, whose version check warns on some installs
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

__version__ = "0.1.0"
