"""Reproducible point distributions and the point file formats.

Every generator draws from a Philox counter-based stream keyed by the seed
and a stage number, so the same GeneratorSpec yields the same points on any
platform and every recursion stage of the galaxy model has its own stream.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from balancedfmm.errors import DatasetError
from balancedfmm.geometry import SourceSet, TargetSet

logger = logging.getLogger(__name__)

KINDS = ("uniform", "gaussian", "shell", "helix", "galaxy")
ALIASES = {"uniform-cube": "uniform", "random": "uniform"}
POINTS_MAGIC = b"FMM3"
POINT_FILE_RECORD = np.dtype([("position", "<f8", (3,)), ("mass", "<f8")])
SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str
    n: int
    seed: int = 0
    id_offset: int = 0
    sigma: float = 0.25
    shell_radius: float = 1.0
    shell_jitter: float = 0.01
    helix_turns: float = 3.0
    helix_radius: float = 1.0
    helix_height: float = 4.0
    helix_jitter: float = 0.02
    galaxy_depth: int = 3
    r_inner: float = 6000.0
    r_outer: float = 18000.0
    recursion_factor: int = 10
    shrink: float = 2.0 / 3.0
    axis_ratio: float = 0.1

    def __post_init__(self):
        kind = ALIASES.get(self.kind, self.kind)
        if kind not in KINDS:
            raise DatasetError(f"unknown distribution {self.kind!r}, expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        if self.n < 1:
            raise DatasetError(f"point count must be >= 1, got {self.n}")

    @property
    def major_axis(self) -> float:
        """Semi-major axis of the first recursion stage, R_outer / 20."""
        return self.r_outer / 20.0

    @property
    def galaxy_seeds(self) -> int:
        per_seed = self.recursion_factor ** self.galaxy_depth
        if self.n % per_seed:
            raise DatasetError(
                f"galaxy needs N = s * {self.recursion_factor}^{self.galaxy_depth}, got N={self.n}"
            )
        return self.n // per_seed


def _rng(seed: int, stage: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=(stage << 64) | (seed & SEED_MASK)))


def _unit_ball(rng: np.random.Generator, n: int) -> np.ndarray:
    direction = rng.standard_normal((n, 3))
    direction /= np.linalg.norm(direction, axis=1)[:, None]
    return direction * np.cbrt(rng.random(n))[:, None]


def _uniform(spec: GeneratorSpec, rng) -> np.ndarray:
    return rng.random((spec.n, 3))


def _gaussian(spec: GeneratorSpec, rng) -> np.ndarray:
    return rng.normal(0.0, spec.sigma, (spec.n, 3))


def _shell(spec: GeneratorSpec, rng) -> np.ndarray:
    direction = rng.standard_normal((spec.n, 3))
    direction /= np.linalg.norm(direction, axis=1)[:, None]
    radius = spec.shell_radius + rng.uniform(-spec.shell_jitter, spec.shell_jitter, spec.n)
    return direction * radius[:, None]


def _helix(spec: GeneratorSpec, rng) -> np.ndarray:
    t = rng.random(spec.n)
    angle = 2.0 * math.pi * spec.helix_turns * t
    curve = np.column_stack([
        spec.helix_radius * np.cos(angle),
        spec.helix_radius * np.sin(angle),
        spec.helix_height * t,
    ])
    return curve + rng.uniform(-spec.helix_jitter, spec.helix_jitter, (spec.n, 3))


def torus_seeds(spec: GeneratorSpec, count: int) -> np.ndarray:
    """Uniform angle and planar radius in [R_inner, R_outer], vertical jitter within +-r_0."""
    rng = _rng(spec.seed, 0)
    angle = rng.uniform(0.0, 2.0 * math.pi, count)
    radius = rng.uniform(spec.r_inner, spec.r_outer, count)
    height = rng.uniform(-1.0, 1.0, count) * spec.major_axis * spec.axis_ratio
    return np.column_stack([radius * np.cos(angle), radius * np.sin(angle), height])


def generate_galaxy(spec: GeneratorSpec) -> SourceSet:
    """Seeds on a torus, then `galaxy_depth` rounds of ellipsoidal offspring around every point.

    Random streams are keyed per stage, not per point: the seeds use stage 0
    and recursion round k uses stage k + 1, each drawn in one call in point
    order. A `GeneratorSpec` therefore reproduces bit for bit, but changing the seed
    count or the recursion factor reshuffles every later stage.
    """
    if spec.kind != "galaxy":
        spec = replace(spec, kind="galaxy")
    points = torus_seeds(spec, spec.galaxy_seeds)
    for stage in range(spec.galaxy_depth):
        rng = _rng(spec.seed, stage + 1)
        major = spec.major_axis * spec.shrink ** stage
        axes = np.array([major, major, major * spec.axis_ratio])
        offsets = _unit_ball(rng, len(points) * spec.recursion_factor) * axes
        points = np.repeat(points, spec.recursion_factor, axis=0) + offsets
    logger.debug(f"galaxy: {spec.galaxy_seeds} seeds, {spec.galaxy_depth} stages, {len(points)} points")
    return SourceSet(points, np.ones(len(points)), spec.id_offset + np.arange(len(points), dtype=np.int64))


GENERATORS = {"uniform": _uniform, "gaussian": _gaussian, "shell": _shell, "helix": _helix}


def generate(spec: GeneratorSpec) -> SourceSet:
    if spec.kind == "galaxy":
        return generate_galaxy(spec)
    positions = GENERATORS[spec.kind](spec, _rng(spec.seed))
    return SourceSet(positions, np.ones(spec.n), spec.id_offset + np.arange(spec.n, dtype=np.int64))


def generate_targets(spec: GeneratorSpec, after: Optional[SourceSet] = None) -> TargetSet:
    """Massless evaluation points; ids continue past `after` so they never clash with source ids."""
    offset = spec.id_offset
    if after is not None and len(after):
        offset = max(offset, int(after.ids.max()) + 1)
    return generate(replace(spec, id_offset=offset)).as_targets()


def write_points(path, points: SourceSet) -> None:
    rec = np.empty(len(points), dtype=POINT_FILE_RECORD)
    rec["position"] = points.positions
    rec["mass"] = points.masses
    with open(path, "wb") as f:
        f.write(POINTS_MAGIC)
        f.write(np.array([len(points)], dtype="<u8").tobytes())
        f.write(rec.tobytes())


def read_points(path, id_offset: int = 0) -> SourceSet:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != POINTS_MAGIC:
        raise DatasetError(f"{path} is not a point file (bad magic {data[:4]!r})")
    n = int(np.frombuffer(data[4:12], dtype="<u8")[0])
    body = data[12:]
    if len(body) != n * POINT_FILE_RECORD.itemsize:
        raise DatasetError(f"{path} declares {n} points but holds {len(body)} bytes of records")
    rec = np.frombuffer(body, dtype=POINT_FILE_RECORD)
    return SourceSet(np.array(rec["position"]), np.array(rec["mass"]), id_offset + np.arange(n, dtype=np.int64))


def write_points_csv(path, points: SourceSet) -> None:
    table = np.column_stack([points.positions, points.masses])
    np.savetxt(path, table, delimiter=",", header="x,y,z,mass", comments="", fmt="%.17g")


def read_points_csv(path, id_offset: int = 0) -> SourceSet:
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if table.shape[1] not in (3, 4):
        raise DatasetError(f"{path}: expected columns x,y,z[,mass], got {table.shape[1]}")
    masses = table[:, 3] if table.shape[1] == 4 else np.ones(len(table))
    return SourceSet(table[:, :3], masses, id_offset + np.arange(len(table), dtype=np.int64))


def load_points(path, id_offset: int = 0) -> SourceSet:
    if str(path).lower().endswith(".csv"):
        return read_points_csv(path, id_offset)
    return read_points(path, id_offset)
