import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np

from balancedfmm.errors import GeometryError, PartitionError

logger = logging.getLogger(__name__)

BOX_MARGIN = 1e-6
HALF_WIDTH_FLOOR = 1e-12


class Connection(IntEnum):
    UNCONNECTED = 0
    STRONG = 1
    WEAK = 2


@dataclass(frozen=True)
class Source:
    position: tuple
    mass: float
    global_id: int

    def __post_init__(self):
        if len(self.position) != 3 or not np.all(np.isfinite(self.position)):
            raise GeometryError(f"Source {self.global_id} has a non-finite or non-3D position {self.position}")
        if not self.mass > 0:
            raise GeometryError(f"Source {self.global_id} has non-positive mass {self.mass}")


@dataclass(frozen=True)
class TargetPoint:
    position: tuple
    global_id: int

    def __post_init__(self):
        if len(self.position) != 3 or not np.all(np.isfinite(self.position)):
            raise GeometryError(f"Target {self.global_id} has a non-finite or non-3D position {self.position}")


def _as_positions(positions) -> np.ndarray:
    positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(positions)):
        raise GeometryError("positions must be finite")
    return positions


@dataclass(eq=False)
class SourceSet:
    """Structure-of-arrays view of a list of sources."""
    positions: np.ndarray
    masses: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.positions = _as_positions(self.positions)
        self.masses = np.ascontiguousarray(self.masses, dtype=np.float64).reshape(-1)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64).reshape(-1)
        n = len(self.positions)
        if len(self.masses) != n or len(self.ids) != n:
            raise GeometryError(
                f"SourceSet arrays disagree in length: {n} positions, {len(self.masses)} masses, {len(self.ids)} ids"
            )
        if n and not np.all(self.masses > 0):
            bad = self.ids[~(self.masses > 0)][0]
            raise GeometryError(f"Source {bad} has non-positive mass")

    def __len__(self):
        return len(self.ids)

    @classmethod
    def empty(cls) -> "SourceSet":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_sources(cls, sources: Iterable[Source]) -> "SourceSet":
        sources = list(sources)
        if not sources:
            return cls.empty()
        return cls(
            np.array([s.position for s in sources], dtype=np.float64),
            np.array([s.mass for s in sources], dtype=np.float64),
            np.array([s.global_id for s in sources], dtype=np.int64),
        )

    @classmethod
    def concatenate(cls, parts: Sequence["SourceSet"]) -> "SourceSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.masses for p in parts]),
            np.concatenate([p.ids for p in parts]),
        )

    def to_sources(self) -> List[Source]:
        return [Source(tuple(p), float(m), int(i)) for p, m, i in zip(self.positions, self.masses, self.ids)]

    def take(self, index) -> "SourceSet":
        return SourceSet(self.positions[index], self.masses[index], self.ids[index])

    def sorted_by_id(self) -> "SourceSet":
        return self.take(np.argsort(self.ids, kind="stable"))

    def as_targets(self) -> "TargetSet":
        return TargetSet(self.positions, self.ids)


@dataclass(eq=False)
class TargetSet:
    positions: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.positions = _as_positions(self.positions)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64).reshape(-1)
        if len(self.ids) != len(self.positions):
            raise GeometryError("TargetSet arrays disagree in length")

    def __len__(self):
        return len(self.ids)

    @classmethod
    def empty(cls) -> "TargetSet":
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_targets(cls, targets: Iterable[TargetPoint]) -> "TargetSet":
        targets = list(targets)
        if not targets:
            return cls.empty()
        return cls(
            np.array([t.position for t in targets], dtype=np.float64),
            np.array([t.global_id for t in targets], dtype=np.int64),
        )

    @classmethod
    def concatenate(cls, parts: Sequence["TargetSet"]) -> "TargetSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(np.concatenate([p.positions for p in parts]), np.concatenate([p.ids for p in parts]))

    def take(self, index) -> "TargetSet":
        return TargetSet(self.positions[index], self.ids[index])

    def sorted_by_id(self) -> "TargetSet":
        return self.take(np.argsort(self.ids, kind="stable"))


@dataclass(eq=False)
class Box:
    """Axis-aligned box stored by its bounds; containment is half-open [lo, hi)."""
    lo: np.ndarray
    hi: np.ndarray
    center: np.ndarray = field(init=False)
    half_widths: np.ndarray = field(init=False)
    radius: float = field(init=False)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if not np.all(self.hi > self.lo):
            raise GeometryError(f"Box bounds must satisfy lo < hi, got lo={self.lo} hi={self.hi}")
        self.center = 0.5 * (self.lo + self.hi)
        self.half_widths = 0.5 * (self.hi - self.lo)
        self.radius = float(np.sqrt(np.sum(self.half_widths ** 2)))

    @classmethod
    def from_center(cls, center, half_widths) -> "Box":
        center = np.asarray(center, dtype=np.float64)
        half_widths = np.asarray(half_widths, dtype=np.float64)
        return cls(center - half_widths, center + half_widths)

    def contains(self, positions) -> np.ndarray:
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        return np.all((positions >= self.lo) & (positions < self.hi), axis=1)

    def __repr__(self):
        return f"Box(center={self.center.tolist()}, half_widths={self.half_widths.tolist()})"


@dataclass(eq=False)
class BoxArray:
    """A level's worth of boxes as parallel (n, 3) bound arrays."""
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.ascontiguousarray(self.lo, dtype=np.float64).reshape(-1, 3)
        self.hi = np.ascontiguousarray(self.hi, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.lo)

    @classmethod
    def from_boxes(cls, boxes: Sequence[Box]) -> "BoxArray":
        return cls(np.array([b.lo for b in boxes]).reshape(-1, 3), np.array([b.hi for b in boxes]).reshape(-1, 3))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def half_widths(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    @property
    def radius(self) -> np.ndarray:
        return np.sqrt(np.sum(self.half_widths ** 2, axis=1))

    def box(self, j: int) -> Box:
        return Box(self.lo[j], self.hi[j])


def check_theta(theta: float) -> float:
    if not 0.0 < theta < 1.0:
        raise GeometryError(f"theta must lie in (0, 1), got {theta}")
    return float(theta)


def theta_criterion(a: Box, b: Box, theta: float) -> bool:
    """True when the pair is weakly connected: R + theta r <= theta d."""
    check_theta(theta)
    d = float(np.linalg.norm(a.center - b.center))
    if d == 0.0:
        return False
    big, small = max(a.radius, b.radius), min(a.radius, b.radius)
    return big + theta * small <= theta * d


def theta_criterion_arrays(center_a, radius_a, center_b, radius_b, theta: float) -> np.ndarray:
    """Vectorized theta_criterion over aligned arrays of box pairs."""
    check_theta(theta)
    d = np.sqrt(np.sum((np.asarray(center_a) - np.asarray(center_b)) ** 2, axis=-1))
    big = np.maximum(radius_a, radius_b)
    small = np.minimum(radius_a, radius_b)
    return (d > 0.0) & (big + theta * small <= theta * d)


PointsLike = Union[SourceSet, TargetSet, np.ndarray, Sequence[Source]]


def _positions_of(points: PointsLike) -> np.ndarray:
    if isinstance(points, (SourceSet, TargetSet)):
        return points.positions
    if isinstance(points, np.ndarray):
        return _as_positions(points)
    points = list(points)
    if points and isinstance(points[0], (Source, TargetPoint)):
        return _as_positions([p.position for p in points])
    return _as_positions(points)


def bounding_box(points: PointsLike, margin: float = BOX_MARGIN) -> Box:
    positions = _positions_of(points)
    if len(positions) == 0:
        raise GeometryError("bounding_box needs at least one point")
    lo = positions.min(axis=0)
    hi = positions.max(axis=0)
    pad = max(margin, 0.0) * float(np.max(hi - lo))
    # at least one ulp past the extreme points: boxes are half-open on the hi face
    lo = np.minimum(lo - pad, np.nextafter(lo, -np.inf))
    hi = np.maximum(hi + pad, np.nextafter(hi, np.inf))
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    scale = max(float(np.sqrt(np.sum(half ** 2))), float(np.max(np.abs(center))), 1.0)
    floor = HALF_WIDTH_FLOOR * scale
    if np.any(half < floor):
        logger.debug(f"bounding box extent collapsed in some axis, applying half-width floor {floor:.3e}")
        half = np.maximum(half, floor)
        lo, hi = center - half, center + half
    return Box(lo, hi)


@dataclass(eq=False)
class Partition:
    boxes: List[Box]
    sources: List[SourceSet]
    targets: Optional[List[TargetSet]] = None
    scheme: str = "cubic"

    @property
    def ranks(self) -> int:
        return len(self.boxes)


def _assign_by_containment(positions: np.ndarray, boxes: Sequence[Box]) -> np.ndarray:
    owner = np.full(len(positions), -1, dtype=np.int64)
    for rank, box in enumerate(boxes):
        owner[(owner < 0) & box.contains(positions)] = rank
    if np.any(owner < 0):
        raise GeometryError(f"{int(np.sum(owner < 0))} points fall outside every rank box")
    return owner


def _cubic_boxes(root: Box, ranks: int) -> List[Box]:
    k = int(round(ranks ** (1.0 / 3.0)))
    if k ** 3 != ranks:
        raise PartitionError(f"cubic-grid partition needs a cube number of ranks, got {ranks}")
    edges = []
    for axis in range(3):
        e = root.lo[axis] + (root.hi[axis] - root.lo[axis]) * np.arange(k + 1) / k
        e[0], e[-1] = root.lo[axis], root.hi[axis]
        edges.append(e)
    boxes = []
    for ix in range(k):
        for iy in range(k):
            for iz in range(k):
                lo = [edges[0][ix], edges[1][iy], edges[2][iz]]
                hi = [edges[0][ix + 1], edges[1][iy + 1], edges[2][iz + 1]]
                boxes.append(Box(lo, hi))
    return boxes


def _bisection_boxes(root: Box, positions: np.ndarray, ranks: int, eta: float) -> List[Box]:
    from balancedfmm.treebuild import split_plane

    if ranks < 1 or ranks & (ranks - 1):
        raise PartitionError(f"recursive-bisection partition needs a power of 2 ranks, got {ranks}")
    cells = [(root, np.arange(len(positions)))]
    depth = 0
    while len(cells) < ranks:
        axis = depth % 3
        next_cells = []
        for box, index in cells:
            coords = positions[index, axis]
            plane = split_plane(coords, box.lo[axis], box.hi[axis], eta)
            lower_hi = box.hi.copy()
            lower_hi[axis] = plane
            upper_lo = box.lo.copy()
            upper_lo[axis] = plane
            below = coords < plane
            next_cells.append((Box(box.lo, lower_hi), index[below]))
            next_cells.append((Box(upper_lo, box.hi), index[~below]))
        cells = next_cells
        depth += 1
    return [box for box, _ in cells]


def partition_sources(
    sources: SourceSet,
    ranks: int,
    scheme: str = "cubic",
    eta: float = 0.5,
    targets: Optional[TargetSet] = None,
    root: Optional[Box] = None,
) -> Partition:
    """Split sources (and optional external targets) over `ranks` level-1 boxes."""
    if isinstance(sources, (list, tuple)):
        sources = SourceSet.from_sources(sources)
    if ranks < 1:
        raise PartitionError(f"rank count must be >= 1, got {ranks}")
    if root is None:
        everything = sources.positions if targets is None else np.concatenate([sources.positions, targets.positions])
        root = bounding_box(everything)

    if ranks == 1:
        boxes = [root]
    elif scheme == "cubic":
        boxes = _cubic_boxes(root, ranks)
    elif scheme == "orb":
        boxes = _bisection_boxes(root, sources.positions, ranks, eta)
    else:
        raise PartitionError(f"unknown partition scheme {scheme!r}")

    owner = _assign_by_containment(sources.positions, boxes)
    parts = [sources.take(np.flatnonzero(owner == rank)) for rank in range(ranks)]
    target_parts = None
    if targets is not None:
        target_owner = _assign_by_containment(targets.positions, boxes)
        target_parts = [targets.take(np.flatnonzero(target_owner == rank)) for rank in range(ranks)]
    logger.debug(f"partitioned {len(sources)} sources over {ranks} ranks ({scheme}): {[len(p) for p in parts]}")
    return Partition(boxes=boxes, sources=parts, targets=target_parts, scheme=scheme)
