"""Deliberately slow loop implementations used as test oracles."""
import math

import numpy as np


def naive_distances(x):
    n = len(x)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            d[i, j] = math.sqrt(sum((x[i][k] - x[j][k]) ** 2 for k in range(3)))
    return d


def naive_recon(y, x):
    dy, dx = naive_distances(y), naive_distances(x)
    total = 0.0
    for i in range(len(x)):
        for j in range(len(x)):
            total += (dy[i, j] - dx[i, j]) ** 2
    return total


def naive_pmd(y, x):
    return sum(sum((y[i][k] - x[i][k]) ** 2 for k in range(3)) for i in range(len(x))) / len(x)


def _directed(a, b):
    total = 0.0
    for p in a:
        total += min(sum((p[k] - q[k]) ** 2 for k in range(3)) for q in b)
    return total / len(a)


def naive_chamfer(y, x):
    return 0.5 * (_directed(y, x) + _directed(x, y))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def ols(masks, y):
    A = np.hstack([np.ones((len(masks), 1)), np.asarray(masks, dtype=float)])
    beta, *_ = np.linalg.lstsq(A, y, rcond=None)
    return beta
