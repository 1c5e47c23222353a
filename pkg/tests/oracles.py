"""Brute-force reference implementations used across the tests."""

import numpy as np


def pairwise(X, Y=None):
    Y = X if Y is None else Y
    return np.sqrt(((X[:, None, :] - Y[None, :, :]) ** 2).sum(-1))


def linear_knn(X, q, k):
    """k nearest rows of X to q by (distance, index)."""
    d = np.sqrt(((X - q) ** 2).sum(-1))
    order = np.lexsort((np.arange(len(X)), d))[:k]
    return order, d[order]


def kth_excl_self(X, k):
    D = pairwise(X)
    np.fill_diagonal(D, np.inf)
    return np.sort(D, axis=1)[:, k - 1]


def density_formula(dv, k, n, d):
    """The density estimate written out term by term with math only."""
    import math

    num = 0.0
    den = 0.0
    for j in range(1, k + 1):
        num += j ** (d / 2)
        den += float(dv[j - 1]) ** d
    vol = math.pi ** (d / 2) / math.gamma(d / 2 + 1)
    return (1.0 / (n * vol)) * (num / den) ** (d / 2)


def dpc_bruteforce(X, d_cut, rho_min, delta_min):
    n = len(X)
    D = pairwise(X)
    rho = (D <= d_cut).sum(1) - 1
    order = sorted(range(n), key=lambda i: (-rho[i], i))
    rank = np.empty(n, int)
    rank[order] = np.arange(n)
    dep = np.full(n, -1)
    delta = np.zeros(n)
    for i in range(n):
        denser = [j for j in range(n) if rank[j] < rank[i]]
        if not denser:
            delta[i] = D.max()
            continue
        j = min(denser, key=lambda j: (D[i, j], j))
        dep[i] = j
        delta[i] = D[i, j]
    labels = np.full(n, -1)
    nxt = 0
    for i in order:
        if rho[i] < rho_min:
            continue
        if delta[i] >= delta_min:
            labels[i] = nxt
            nxt += 1
        else:
            labels[i] = labels[dep[i]]
    return rho, delta, dep, labels
