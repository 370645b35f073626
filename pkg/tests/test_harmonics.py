import numpy as np
import pytest

from balancedfmm.errors import GeometryError
from balancedfmm.harmonics import (
    Q_MAX,
    LocalExpansion,
    PrecisionPolicy,
    index,
    irregular_harmonics,
    l2l,
    l2p,
    m2l,
    m2l_batch,
    m2m,
    m2p,
    n_coefficients,
    order_and_cap,
    p2m,
    regular_harmonics,
    symmetry_residual,
    truncation_bound,
    wigner_small_d,
)


def direct_potential(targets, positions, masses):
    dist = np.linalg.norm(targets[:, None, :] - positions[None, :, :], axis=2)
    return (masses[None, :] / dist).sum(axis=1)


def cluster(rng, center, n=50, half=0.5):
    positions = np.asarray(center) + rng.uniform(-half, half, (n, 3))
    return positions, rng.uniform(0.5, 1.5, n)


def test_coefficient_layout():
    assert index(0, 0) == 0
    assert index(1, -1) == 1
    assert index(2, 2) == 8
    assert n_coefficients(3) == 16


def test_addition_theorem():
    x = np.array([[1.0, 0.5, 0.8]])
    y = np.array([[0.1, 0.2, -0.1]])
    series = np.sum(np.conj(regular_harmonics(y, 30)) * irregular_harmonics(x, 30)).real
    assert series == pytest.approx(1.0 / np.linalg.norm(x - y), rel=1e-12)


def test_multipole_coefficients_are_conjugate_symmetric(rng):
    positions, masses = cluster(rng, [0, 0, 0])
    expansion = p2m(positions, masses, np.zeros(3), 0.866, 12)
    assert expansion.conjugate_symmetry_error() < 1e-13
    assert symmetry_residual(expansion.coefficients[None, :], 12)[0] < 1e-13


def test_multipole_matches_direct_sum_far_away(rng):
    positions, masses = cluster(rng, [0, 0, 0])
    expansion = p2m(positions, masses, np.zeros(3), np.sqrt(3) / 2, 12)
    targets = rng.normal(size=(20, 3))
    targets *= 4.0 / np.linalg.norm(targets, axis=1)[:, None]
    exact = direct_potential(targets, positions, masses)
    assert np.max(np.abs(m2p(expansion, targets) - exact) / exact) < 1e-6


def test_multipole_at_ten_radii_is_within_policy_bound(rng):
    positions, masses = cluster(rng, [0, 0, 0])
    radius = np.sqrt(3) / 2
    policy = PrecisionPolicy(1e-6, 0.5)
    expansion = p2m(positions, masses, np.zeros(3), radius, policy.order)
    targets = np.array([[10 * radius, 0, 0], [0, -10 * radius, 0], [6 * radius, 6 * radius, 5 * radius]])
    exact = direct_potential(targets, positions, masses)
    assert np.max(np.abs(m2p(expansion, targets) - exact) / exact) <= policy.bound


def test_m2m_shift_keeps_far_field(rng):
    positions, masses = cluster(rng, [0.25, 0.25, 0.25], half=0.25)
    child = p2m(positions, masses, np.array([0.25, 0.25, 0.25]), np.sqrt(3) / 4, 14)
    parent = m2m(child, np.zeros(3), np.sqrt(3) / 2)
    targets = np.array([[6.0, 0.0, 0.0], [0.0, 5.0, 3.0], [-4.0, -4.0, 2.0]])
    exact = direct_potential(targets, positions, masses)
    assert np.max(np.abs(m2p(parent, targets) - exact) / exact) < 1e-7


@pytest.mark.parametrize("vector", [[8.0, 0.0, 0.0], [0.0, 0.0, 6.0], [0.0, 0.0, -6.0], [3.0, -4.0, 5.0]])
def test_rotation_m2l_equals_direct_m2l(rng, vector):
    positions, masses = cluster(rng, [0, 0, 0])
    source = p2m(positions, masses, np.zeros(3), 0.9, 10)
    rotated = m2l(source, np.array(vector), 0.7, method="rotation")
    direct = m2l(source, np.array(vector), 0.7, method="direct")
    scale = np.max(np.abs(direct.coefficients))
    assert np.max(np.abs(rotated.coefficients - direct.coefficients)) / scale < 1e-12


@pytest.mark.parametrize("order", [4, 10, 20])
def test_rotation_m2l_on_random_admissible_pairs(rng, order):
    pairs = 100
    source_scales = rng.uniform(0.5, 1.0, pairs)
    target_scales = rng.uniform(0.5, 1.0, pairs)
    theta = rng.uniform(0.3, 0.7, pairs)
    directions = rng.normal(size=(pairs, 3))
    directions /= np.linalg.norm(directions, axis=1)[:, None]
    source_centers = rng.uniform(-4.0, 4.0, (pairs, 3))
    distance = (source_scales + target_scales) / theta * rng.uniform(1.0, 2.0, pairs)
    target_centers = source_centers + directions * distance[:, None]
    coefficients = np.stack([
        p2m(*cluster(rng, c, n=20, half=s / np.sqrt(3)), c, s, order).coefficients
        for c, s in zip(source_centers, source_scales)
    ])
    args = (coefficients, source_centers, source_scales, target_centers, target_scales, order)
    rotated = m2l_batch(*args, method="rotation")
    direct = m2l_batch(*args, method="direct")
    gap = np.linalg.norm(rotated - direct, axis=1) / np.linalg.norm(direct, axis=1)
    assert np.max(gap) < 1e-12


@pytest.mark.parametrize("method", ["rotation", "direct"])
def test_local_expansion_matches_direct_sum(rng, method):
    positions, masses = cluster(rng, [8.0, 0.0, 0.0])
    source = p2m(positions, masses, np.array([8.0, 0.0, 0.0]), np.sqrt(3) / 2, 12)
    local = m2l(source, np.zeros(3), np.sqrt(3) / 2, method=method)
    targets = rng.uniform(-0.5, 0.5, (30, 3))
    exact = direct_potential(targets, positions, masses)
    assert np.max(np.abs(l2p(local, targets) - exact) / exact) < 1e-6


def test_single_far_mass_through_m2l():
    source = p2m(np.array([[0.0, 0.0, 10.0]]), np.array([1.0]), np.array([0.0, 0.0, 10.0]), 0.5, 8)
    local = m2l(source, np.zeros(3), 0.5)
    assert l2p(local, np.zeros((1, 3)))[0] == pytest.approx(0.1, rel=1e-12)


def test_l2l_is_exact_for_a_truncated_expansion(rng):
    coefficients = rng.normal(size=n_coefficients(6)) + 1j * rng.normal(size=n_coefficients(6))
    parent = LocalExpansion(6, coefficients, np.zeros(3), 1.0)
    child = l2l(parent, np.array([0.25, -0.25, 0.25]), 0.5)
    points = np.array([0.25, -0.25, 0.25]) + rng.uniform(-0.25, 0.25, (20, 3))
    expected = l2p(parent, points)
    assert np.max(np.abs(l2p(child, points) - expected)) < 1e-11 * np.max(np.abs(expected))


def test_m2m_of_one_point_is_p2m_at_the_new_center():
    point, mass = np.array([[0.1, -0.2, 0.15]]), np.array([2.0])
    child = p2m(point, mass, np.array([0.25, -0.25, 0.25]), np.sqrt(3) / 4, 12)
    parent = m2m(child, np.zeros(3), np.sqrt(3) / 2)
    expected = p2m(point, mass, np.zeros(3), np.sqrt(3) / 2, 12)
    assert np.allclose(parent.coefficients, expected.coefficients, rtol=0.0, atol=1e-13)


def test_l2l_translations_compose(rng):
    coefficients = rng.normal(size=n_coefficients(8)) + 1j * rng.normal(size=n_coefficients(8))
    parent = LocalExpansion(8, coefficients, np.zeros(3), 1.0)
    middle = np.array([0.25, 0.25, -0.25])
    child = np.array([0.375, 0.125, -0.125])
    two_steps = l2l(l2l(parent, middle, 0.5), child, 0.25)
    one_step = l2l(parent, child, 0.25)
    scale = np.max(np.abs(one_step.coefficients))
    assert np.max(np.abs(two_steps.coefficients - one_step.coefficients)) < 1e-12 * scale


def test_m2l_rejects_zero_translation(rng):
    positions, masses = cluster(rng, [0, 0, 0])
    source = p2m(positions, masses, np.zeros(3), 0.9, 4)
    with pytest.raises(GeometryError):
        m2l(source, np.zeros(3))


def test_wigner_matrices_are_orthogonal():
    for n, d in enumerate(wigner_small_d([0.0, 0.7, 2.9], 20)):
        identity = np.eye(2 * n + 1)
        assert np.allclose(d[0], identity, atol=1e-14)
        for b in (1, 2):
            assert np.max(np.abs(d[b] @ d[b].T - identity)) < 1e-12


def test_order_from_tolerance():
    order, capped = order_and_cap(1e-6, 0.5)
    assert (order, capped) == (21, False)
    assert truncation_bound(0.5, order) <= 1e-6 < truncation_bound(0.5, order - 1)


def test_order_cap():
    order, capped = order_and_cap(1e-30, 0.9)
    assert order == Q_MAX
    assert capped
    policy = PrecisionPolicy(1e-30, 0.9)
    assert policy.capped and policy.bound > 1e-30


def test_smaller_theta_never_needs_a_higher_order():
    orders = [order_and_cap(1e-8, theta)[0] for theta in (0.7, 0.6, 0.5, 0.4, 0.3)]
    assert orders == sorted(orders, reverse=True)


@pytest.mark.parametrize("tol", [0.0, 1.0, 2.0])
def test_tolerance_must_be_in_open_unit_interval(tol):
    with pytest.raises(GeometryError):
        order_and_cap(tol, 0.5)
