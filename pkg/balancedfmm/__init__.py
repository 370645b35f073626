from .core import (
    FmmConfig,
    FmmEngine,
    audit_pair_coverage,
    count_connections,
    run_memory,
    run_serial,
    run_serial_forest,
)
from .datasets import GeneratorSpec, generate, generate_targets
from .direct import PotentialVector, brute_force
from .errors import (
    CoincidentPointsError,
    ConfigMismatchError,
    DatasetError,
    DeadlockError,
    FmmError,
    GeometryError,
    PartitionError,
    ProtocolError,
    TransportError,
)
from .geometry import Source, SourceSet, TargetPoint, TargetSet
from .parse_args import parse_args

__all__ = [
    "FmmEngine",
    "FmmConfig",
    "run_memory",
    "run_serial",
    "run_serial_forest",
    "count_connections",
    "audit_pair_coverage",
    "GeneratorSpec",
    "generate",
    "generate_targets",
    "PotentialVector",
    "brute_force",
    "Source",
    "SourceSet",
    "TargetPoint",
    "TargetSet",
    "parse_args",
    "FmmError",
    "GeometryError",
    "PartitionError",
    "CoincidentPointsError",
    "DatasetError",
    "ConfigMismatchError",
    "TransportError",
    "ProtocolError",
    "DeadlockError",
]
