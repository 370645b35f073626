"""Semi-normalized solid harmonics with the Condon-Shortley phase.

Coefficients of degree n and order m live at index n*n + n + m, so a
truncation of order Q holds (Q+1)**2 values.

    S_n^m(x) = r^n Y_n^m(x/r)           regular
    T_n^m(x) = Y_n^m(x/r) / r^(n+1)     irregular

with 1/|x - y| = sum_nm conj(S_n^m(y)) T_n^m(x) for |y| < |x|.
"""
import math
from functools import lru_cache

import numpy as np


def index(n: int, m: int) -> int:
    return n * n + n + m


def n_coefficients(order: int) -> int:
    return (order + 1) ** 2


@lru_cache(maxsize=None)
def degrees(order: int) -> np.ndarray:
    """Degree n of every coefficient slot."""
    return np.repeat(np.arange(order + 1), 2 * np.arange(order + 1) + 1)


@lru_cache(maxsize=None)
def orders(order: int) -> np.ndarray:
    """Order m of every coefficient slot."""
    return np.concatenate([np.arange(-n, n + 1) for n in range(order + 1)])


@lru_cache(maxsize=None)
def binomial_table(nmax: int) -> np.ndarray:
    """B[a, b] = C(a, b) as correctly rounded floats, zero outside 0 <= b <= a."""
    table = np.zeros((nmax + 1, nmax + 1))
    for a in range(nmax + 1):
        for b in range(a + 1):
            table[a, b] = float(math.comb(a, b))
    table.setflags(write=False)
    return table


def regular_harmonics(points, order: int) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    r2 = x * x + y * y + z * z
    xy = x + 1j * y
    out = np.zeros((len(points), n_coefficients(order)), dtype=np.complex128)
    out[:, 0] = 1.0
    for n in range(1, order + 1):
        base, prev = index(n, 0), index(n - 1, 0)
        m = np.arange(n)
        norm = np.sqrt((n + m) * (n - m))
        a = (2 * n - 1) / norm
        b = np.sqrt((n + m - 1) * (n - m - 1)) / norm
        below = np.zeros((len(points), n), dtype=np.complex128)
        if n >= 2:
            below[:, :n - 1] = out[:, index(n - 2, 0):index(n - 2, 0) + n - 1]
        out[:, base:base + n] = a * z[:, None] * out[:, prev:prev + n] - b * r2[:, None] * below
        out[:, base + n] = -xy * math.sqrt((2 * n - 1) / (2 * n)) * out[:, prev + n - 1]
        # S_n^-m = (-1)^m conj(S_n^m)
        positive = out[:, base + 1:base + n + 1][:, ::-1]
        sign = (-1.0) ** np.arange(n, 0, -1)
        out[:, n * n:base] = sign * np.conj(positive)
    return out


def irregular_harmonics(points, order: int) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    r = np.sqrt(np.sum(points ** 2, axis=1))
    y = regular_harmonics(points / r[:, None], order)
    return y / r[:, None] ** (degrees(order)[None, :] + 1)
