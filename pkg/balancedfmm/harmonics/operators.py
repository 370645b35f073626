"""Expansion types and the P2M, M2M, M2L, L2L, L2P, M2P operators.

Coefficients are stored scaled by the expansion radius rho:

    multipole  M~_n^m = sum_q q conj(S_n^m((x_q - c) / rho))
               phi(x) = (1/rho) sum M~_n^m T_n^m((x - c) / rho)
    local      phi(c + y) = Re sum L~_n^m conj(S_n^m(y / rho))

Every batched operator takes (B, (Q+1)**2) coefficient arrays.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np

from balancedfmm.errors import GeometryError
from balancedfmm.harmonics.rotation import direction_angles, wigner_small_d
from balancedfmm.harmonics.solid import (
    binomial_table,
    degrees,
    index,
    irregular_harmonics,
    n_coefficients,
    orders,
    regular_harmonics,
)

logger = logging.getLogger(__name__)

M2L_METHODS = ("rotation", "direct")
POINT_CHUNK = 4096
ROTATION_BUDGET = 2_000_000
DIRECT_BUDGET = 2_000_000


@dataclass(eq=False)
class Expansion:
    order: int
    coefficients: np.ndarray
    center: np.ndarray
    scale: float

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.complex128).reshape(-1)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.scale = float(self.scale)
        if len(self.coefficients) != n_coefficients(self.order):
            raise ValueError(
                f"order {self.order} needs {n_coefficients(self.order)} coefficients, got {len(self.coefficients)}"
            )
        if not self.scale > 0:
            raise GeometryError(f"expansion scale must be positive, got {self.scale}")

    @classmethod
    def zeros(cls, order: int, center, scale: float):
        return cls(order, np.zeros(n_coefficients(order), dtype=np.complex128), center, scale)

    def coefficient(self, n: int, m: int) -> complex:
        return complex(self.coefficients[index(n, m)])

    def conjugate_symmetry_error(self) -> float:
        return float(symmetry_residual(self.coefficients[None, :], self.order)[0])


class MultipoleExpansion(Expansion):
    pass


class LocalExpansion(Expansion):
    pass


@lru_cache(maxsize=None)
def _mirror(order: int):
    deg, ordm = degrees(order), orders(order)
    positive = np.flatnonzero(ordm > 0)
    negative = deg[positive] ** 2 + deg[positive] - ordm[positive]
    sign = (-1.0) ** ordm[positive]
    return positive, negative, sign


def symmetry_residual(coefficients: np.ndarray, order: int) -> np.ndarray:
    """max |c_n^-m - (-1)^m conj(c_n^m)| relative to max |c|, per row."""
    positive, negative, sign = _mirror(order)
    scale = np.max(np.abs(coefficients), axis=1)
    scale = np.where(scale > 0, scale, 1.0)
    if len(positive) == 0:
        return np.zeros(len(coefficients))
    gap = np.abs(coefficients[:, negative] - sign * np.conj(coefficients[:, positive]))
    return np.max(gap, axis=1) / scale


def _chunks(total: int, size: int) -> Iterator[slice]:
    size = max(int(size), 1)
    for start in range(0, total, size):
        yield slice(start, min(start + size, total))


@lru_cache(maxsize=None)
def _m2m_terms(order: int):
    deg, ordm = degrees(order), orders(order)
    binom = binomial_table(2 * order)
    terms = []
    for k in range(order + 1):
        for l in range(-k, k + 1):
            keep = (deg >= k) & (np.abs(ordm - l) <= deg - k)
            n, m = deg[keep], ordm[keep]
            source = (n - k) ** 2 + (n - k) + (m - l)
            coef = np.sqrt(binom[n + m, k + l] * binom[n - m, k - l])
            terms.append((index(k, l), np.flatnonzero(keep), source, coef))
    return tuple(terms)


@lru_cache(maxsize=None)
def _l2l_terms(order: int):
    deg, ordm = degrees(order), orders(order)
    binom = binomial_table(2 * order)
    terms = []
    for j in range(order + 1):
        for i in range(-j, j + 1):
            keep = deg <= order - j
            a, b = deg[keep], ordm[keep]
            source = (a + j) ** 2 + (a + j) + (b + i)
            coef = np.sqrt(binom[a + j + b + i, j + i] * binom[a + j - b - i, j - i])
            terms.append((index(j, i), np.flatnonzero(keep), source, coef))
    return tuple(terms)


@lru_cache(maxsize=None)
def _m2l_direct_terms(order: int):
    n, m = degrees(order), orders(order)
    binom = binomial_table(4 * order)
    terms = []
    for k in range(order + 1):
        for l in range(-k, k + 1):
            harmonic = (n + k) ** 2 + (n + k) + (m + l)
            coef = np.sqrt(binom[n + k + m + l, n + m] * binom[n + k - m - l, n - m])
            terms.append((index(k, l), harmonic, coef))
    return tuple(terms)


@lru_cache(maxsize=None)
def _m2l_axial_terms(order: int):
    binom = binomial_table(2 * order)
    terms = []
    for l in range(-order, order + 1):
        ns = np.arange(abs(l), order + 1)
        k, n = ns[:, None], ns[None, :]
        gain = np.sqrt(binom[n + k, n - l] * binom[n + k, n + l])
        terms.append((ns * ns + ns - l, ns * ns + ns + l, gain))
    return tuple(terms)


def warm_tables(order: int, method: str = "rotation") -> None:
    """Build the cached translation tables for `order` ahead of timed work."""
    _mirror(order)
    _m2m_terms(order)
    _l2l_terms(order)
    if method == "direct":
        _m2l_direct_terms(order)
    else:
        _m2l_axial_terms(order)
        _quarter_turn(order)


def p2m_coefficients(positions, masses, center, scale: float, order: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    masses = np.asarray(masses, dtype=np.float64).reshape(-1)
    out = np.zeros(n_coefficients(order), dtype=np.complex128)
    for part in _chunks(len(positions), POINT_CHUNK):
        harmonics = regular_harmonics((positions[part] - center) / scale, order)
        out += masses[part] @ np.conj(harmonics)
    return out


def m2p_values(coefficients, center, scale: float, order: int, points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(points))
    for part in _chunks(len(points), POINT_CHUNK):
        out[part] = (irregular_harmonics((points[part] - center) / scale, order) @ coefficients).real / scale
    return out


def l2p_complex(coefficients, center, scale: float, order: int, points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(points), dtype=np.complex128)
    for part in _chunks(len(points), POINT_CHUNK):
        out[part] = np.conj(regular_harmonics((points[part] - center) / scale, order)) @ coefficients
    return out


def m2m_batch(coefficients, child_centers, child_scales, parent_centers, parent_scales, order: int) -> np.ndarray:
    coefficients = np.asarray(coefficients, dtype=np.complex128).reshape(-1, n_coefficients(order))
    child_scales = np.asarray(child_scales, dtype=np.float64).reshape(-1)
    parent_scales = np.asarray(parent_scales, dtype=np.float64).reshape(-1)
    ratio = child_scales / parent_scales
    source = coefficients * ratio[:, None] ** degrees(order)[None, :]
    shift = np.conj(regular_harmonics((np.asarray(child_centers) - parent_centers) / parent_scales[:, None], order))
    out = np.zeros_like(source)
    for kl, target, src, coef in _m2m_terms(order):
        out[:, target] += coef[None, :] * shift[:, kl:kl + 1] * source[:, src]
    return out


def l2l_batch(coefficients, parent_centers, parent_scales, child_centers, child_scales, order: int) -> np.ndarray:
    coefficients = np.asarray(coefficients, dtype=np.complex128).reshape(-1, n_coefficients(order))
    child_scales = np.asarray(child_scales, dtype=np.float64).reshape(-1)
    parent_scales = np.asarray(parent_scales, dtype=np.float64).reshape(-1)
    shift = np.conj(regular_harmonics((np.asarray(child_centers) - parent_centers) / parent_scales[:, None], order))
    out = np.zeros_like(coefficients)
    for ji, target, src, coef in _l2l_terms(order):
        out[:, target] += coef[None, :] * shift[:, ji:ji + 1] * coefficients[:, src]
    return out * (child_scales / parent_scales)[:, None] ** degrees(order)[None, :]


def _m2l_axial(coefficients, alpha_source, alpha_target, dist, order: int) -> np.ndarray:
    deg = degrees(order)
    source = coefficients * alpha_source[:, None] ** deg[None, :]
    out = np.zeros_like(source)
    for src, target, gain in _m2l_axial_terms(order):
        out[:, target] = source[:, src] @ gain.T
    return out * ((-1.0) ** deg[None, :] * alpha_target[:, None] ** deg[None, :]) / dist[:, None]


@lru_cache(maxsize=None)
def _quarter_turn(order: int):
    """(d^n(pi/2), (-i)^m) for n = 0..order.

    With S = diag((-i)^m) and T = diag(exp(-i m beta)),
    d^n(beta) = S d^n(pi/2) T d^n(pi/2)^T conj(S), so a tilt by any beta
    costs two products with a fixed matrix.
    """
    quarter = wigner_small_d(np.array([0.5 * np.pi]), order)
    spins = np.array([1.0, -1j, -1.0, 1j])
    return tuple(
        (quarter[n][0].astype(np.complex128), spins[np.arange(-n, n + 1) % 4])
        for n in range(order + 1)
    )


def _tilt(rows, delta, spin, tilt) -> np.ndarray:
    """rows @ (S delta T delta^T conj(S)) with S = diag(spin) and T = diag(tilt) per row."""
    return (((rows * spin) @ delta) * tilt) @ delta.T * np.conj(spin)


def _m2l_rotation_chunk(coefficients, source_scales, vectors, target_scales, order: int) -> np.ndarray:
    beta, phi, dist = direction_angles(vectors)
    m = np.arange(-order, order + 1)
    phases = np.exp(1j * m[None, :] * phi[:, None])
    tilts = np.exp(-1j * m[None, :] * beta[:, None])
    quarter = _quarter_turn(order)
    rotated = np.empty_like(coefficients)
    for n, (delta, spin) in enumerate(quarter):
        block, band = slice(n * n, (n + 1) * (n + 1)), slice(order - n, order + n + 1)
        rotated[:, block] = _tilt(coefficients[:, block] * phases[:, band], delta, spin, tilts[:, band])
    axial = _m2l_axial(rotated, source_scales / dist, target_scales / dist, dist, order)
    out = np.empty_like(axial)
    for n, (delta, spin) in enumerate(quarter):
        block, band = slice(n * n, (n + 1) * (n + 1)), slice(order - n, order + n + 1)
        out[:, block] = phases[:, band] * _tilt(axial[:, block], delta, np.conj(spin), tilts[:, band])
    return out


def _m2l_direct_chunk(coefficients, source_scales, vectors, target_scales, order: int) -> np.ndarray:
    dist = np.sqrt(np.sum(vectors ** 2, axis=1))
    harmonics = regular_harmonics(vectors / dist[:, None], 2 * order)
    deg = degrees(order)
    source = coefficients * (source_scales / dist)[:, None] ** deg[None, :]
    out = np.empty_like(source)
    for kl, harmonic, coef in _m2l_direct_terms(order):
        out[:, kl] = (source * harmonics[:, harmonic]) @ coef
    return out * ((-1.0) ** deg[None, :] * (target_scales / dist)[:, None] ** deg[None, :]) / dist[:, None]


def m2l_batch(coefficients, source_centers, source_scales, target_centers, target_scales, order: int,
              method: str = "rotation") -> np.ndarray:
    coefficients = np.asarray(coefficients, dtype=np.complex128).reshape(-1, n_coefficients(order))
    batch = len(coefficients)
    vectors = np.broadcast_to(np.asarray(target_centers, dtype=np.float64) - source_centers, (batch, 3))
    source_scales = np.broadcast_to(np.asarray(source_scales, dtype=np.float64), (batch,))
    target_scales = np.broadcast_to(np.asarray(target_scales, dtype=np.float64), (batch,))
    if batch and np.any(np.sum(vectors ** 2, axis=1) == 0.0):
        raise GeometryError("m2l needs a nonzero translation vector")
    if method == "rotation":
        chunk, kernel = ROTATION_BUDGET // n_coefficients(order), _m2l_rotation_chunk
    elif method == "direct":
        chunk, kernel = DIRECT_BUDGET // n_coefficients(2 * order), _m2l_direct_chunk
    else:
        raise ValueError(f"unknown m2l method {method!r}, expected one of {M2L_METHODS}")
    out = np.empty_like(coefficients)
    for part in _chunks(batch, chunk):
        out[part] = kernel(coefficients[part], source_scales[part], vectors[part], target_scales[part], order)
    return out


def p2m(positions, masses, center, scale: float, order: int) -> MultipoleExpansion:
    return MultipoleExpansion(order, p2m_coefficients(positions, masses, center, scale, order), center, scale)


def m2m(child: MultipoleExpansion, new_center, new_scale: float = None) -> MultipoleExpansion:
    new_scale = child.scale if new_scale is None else new_scale
    coefficients = m2m_batch(child.coefficients, child.center[None], [child.scale], np.asarray(new_center)[None],
                             [new_scale], child.order)
    return MultipoleExpansion(child.order, coefficients[0], new_center, new_scale)


def m2l(source: MultipoleExpansion, target_center, target_scale: float = None,
        method: str = "rotation") -> LocalExpansion:
    target_scale = source.scale if target_scale is None else target_scale
    coefficients = m2l_batch(source.coefficients, source.center[None], [source.scale],
                             np.asarray(target_center, dtype=np.float64)[None], [target_scale], source.order, method)
    return LocalExpansion(source.order, coefficients[0], target_center, target_scale)


def l2l(parent: LocalExpansion, child_center, child_scale: float = None) -> LocalExpansion:
    child_scale = parent.scale if child_scale is None else child_scale
    coefficients = l2l_batch(parent.coefficients, parent.center[None], [parent.scale], np.asarray(child_center)[None],
                             [child_scale], parent.order)
    return LocalExpansion(parent.order, coefficients[0], child_center, child_scale)


def l2p(local: LocalExpansion, points) -> np.ndarray:
    return l2p_complex(local.coefficients, local.center, local.scale, local.order, points).real


def m2p(multipole: MultipoleExpansion, points) -> np.ndarray:
    return m2p_values(multipole.coefficients, multipole.center, multipole.scale, multipole.order, points)
