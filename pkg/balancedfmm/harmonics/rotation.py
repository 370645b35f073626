"""Wigner small-d matrices by recurrence in the degree.

d^n is built from d^(n-1) and d^1 by coupling degree n-1 with degree 1 to
the stretched degree n. Only the three stretched Clebsch-Gordan columns
appear and all of them are non-negative, so every step is a convex-like
combination of bounded entries and stays stable up to high degree.
"""
import math
from typing import List

import numpy as np


def _stretched_cg(n: int):
    """<n-1, m-mu; 1, mu | n, m> for mu = -1, 0, +1 and m = -n..n."""
    j = n - 1
    m = np.arange(-n, n + 1)
    wide = (2 * j + 1) * (2 * j + 2)
    return {
        -1: np.sqrt(np.maximum((j - m) * (j - m + 1), 0) / wide),
        0: np.sqrt(np.maximum((j - m + 1) * (j + m + 1), 0) / ((2 * j + 1) * (j + 1))),
        1: np.sqrt(np.maximum((j + m) * (j + m + 1), 0) / wide),
    }


def wigner_d1(beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    c, s = np.cos(beta), np.sin(beta) / math.sqrt(2.0)
    d = np.empty((len(beta), 3, 3))
    d[:, 0, 0], d[:, 0, 1], d[:, 0, 2] = (1 + c) / 2, s, (1 - c) / 2
    d[:, 1, 0], d[:, 1, 1], d[:, 1, 2] = -s, c, s
    d[:, 2, 0], d[:, 2, 1], d[:, 2, 2] = (1 - c) / 2, -s, (1 + c) / 2
    return d


def wigner_small_d(beta, order: int) -> List[np.ndarray]:
    """d[n][b, m' + n, m + n] = d^n_{m' m}(beta[b]) for n = 0..order."""
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    batch = len(beta)
    out = [np.ones((batch, 1, 1))]
    if order == 0:
        return out
    d1 = wigner_d1(beta)
    out.append(d1)
    for n in range(2, order + 1):
        width = 2 * n + 1
        cg = _stretched_cg(n)
        padded = np.zeros((batch, width + 2, width + 2))
        padded[:, 2:width, 2:width] = out[-1]
        dn = np.zeros((batch, width, width))
        for mu_row in (-1, 0, 1):
            r = 1 - mu_row
            for mu_col in (-1, 0, 1):
                c = 1 - mu_col
                weight = np.outer(cg[mu_row], cg[mu_col])
                dn += weight[None] * d1[:, mu_row + 1, mu_col + 1][:, None, None] * padded[:, r:r + width, c:c + width]
        out.append(dn)
    return out


def direction_angles(vectors):
    """Polar angle, azimuth and length of each translation vector."""
    vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, 3)
    dist = np.sqrt(np.sum(vectors ** 2, axis=1))
    beta = np.arccos(np.clip(vectors[:, 2] / dist, -1.0, 1.0))
    phi = np.arctan2(vectors[:, 1], vectors[:, 0])
    return beta, phi, dist
