import numpy as np
import pytest

from balancedfmm.errors import GeometryError, PartitionError
from balancedfmm.geometry import (
    Box,
    Source,
    SourceSet,
    bounding_box,
    check_theta,
    partition_sources,
    theta_criterion,
    theta_criterion_arrays,
)


def unit_box_at(x: float) -> Box:
    return Box.from_center([x, 0.0, 0.0], [0.5, 0.5, 0.5])


@pytest.mark.parametrize("distance, weak", [(3.0, True), (2.0, False), (2.6, True), (2.5, False)])
def test_theta_criterion_unit_boxes(distance, weak):
    # R + theta r <= theta d with R = r = sqrt(3)/2 and theta = 0.5 needs d >= 2.598
    assert theta_criterion(unit_box_at(0.0), unit_box_at(distance), 0.5) is weak


def test_theta_criterion_box_with_itself_is_never_weak():
    box = unit_box_at(0.0)
    assert not theta_criterion(box, box, 0.9)


def test_theta_criterion_arrays_agrees_with_scalar(rng):
    centers_a = rng.uniform(-5, 5, (50, 3))
    centers_b = rng.uniform(-5, 5, (50, 3))
    radii_a = rng.uniform(0.1, 1.0, 50)
    radii_b = rng.uniform(0.1, 1.0, 50)
    vector = theta_criterion_arrays(centers_a, radii_a, centers_b, radii_b, 0.5)
    for k in range(50):
        a = Box.from_center(centers_a[k], np.full(3, radii_a[k] / np.sqrt(3)))
        b = Box.from_center(centers_b[k], np.full(3, radii_b[k] / np.sqrt(3)))
        assert vector[k] == theta_criterion(a, b, 0.5)


@pytest.mark.parametrize("theta", [0.0, 1.0, -0.2, 1.5])
def test_theta_outside_open_interval_is_rejected(theta):
    with pytest.raises(GeometryError):
        check_theta(theta)


def test_box_needs_positive_extent():
    with pytest.raises(GeometryError):
        Box([0, 0, 0], [1, 0, 1])


def test_source_validation():
    with pytest.raises(GeometryError):
        Source((0.0, 0.0, 0.0), 0.0, 1)
    with pytest.raises(GeometryError):
        Source((0.0, np.nan, 0.0), 1.0, 1)
    with pytest.raises(GeometryError):
        SourceSet(np.zeros((2, 3)), [1.0, -1.0], [0, 1])


def test_source_set_round_trips_through_records():
    sources = [Source((0.0, 1.0, 2.0), 1.5, 4), Source((3.0, 4.0, 5.0), 2.0, 9)]
    assert SourceSet.from_sources(sources).to_sources() == sources


def test_bounding_box_contains_every_point(uniform_sources):
    sources = uniform_sources(500)
    box = bounding_box(sources)
    assert box.contains(sources.positions).all()


def test_bounding_box_without_margin_still_contains_the_hi_face():
    points = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [0.5, 2.0, 1.0]])
    box = bounding_box(points, margin=0.0)
    assert box.contains(points).all()
    assert np.all(box.hi == np.nextafter(points.max(axis=0), np.inf))


def test_bounding_box_of_coplanar_points_has_volume():
    points = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [2.0, 0.5, 0.0]])
    box = bounding_box(points)
    assert np.all(box.hi > box.lo)
    assert box.contains(points).all()


@pytest.mark.parametrize("ranks, scheme", [(1, "cubic"), (8, "cubic"), (27, "cubic"), (4, "orb"), (8, "orb")])
def test_partition_assigns_every_source_once(uniform_sources, ranks, scheme):
    sources = uniform_sources(2000)
    partition = partition_sources(sources, ranks, scheme)
    assert partition.ranks == ranks
    ids = np.concatenate([part.ids for part in partition.sources])
    assert np.array_equal(np.sort(ids), np.sort(sources.ids))
    for box, part in zip(partition.boxes, partition.sources):
        assert box.contains(part.positions).all()


def test_orb_with_median_split_balances_counts(uniform_sources):
    partition = partition_sources(uniform_sources(4096), 8, "orb", eta=1.0)
    counts = [len(part) for part in partition.sources]
    assert max(counts) - min(counts) <= 1


@pytest.mark.parametrize("ranks, scheme", [(6, "cubic"), (6, "orb"), (0, "cubic")])
def test_partition_rejects_unsupported_rank_counts(uniform_sources, ranks, scheme):
    with pytest.raises(PartitionError):
        partition_sources(uniform_sources(100), ranks, scheme)


def test_partition_places_targets_with_their_box(uniform_sources):
    sources = uniform_sources(300)
    targets = uniform_sources(200, seed=3).as_targets()
    partition = partition_sources(sources, 8, "cubic", targets=targets)
    assert sum(len(t) for t in partition.targets) == 200
    for box, part in zip(partition.boxes, partition.targets):
        assert box.contains(part.positions).all()
