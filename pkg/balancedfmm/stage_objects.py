import json
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from balancedfmm.direct import PotentialVector

STAGES = ("Alloc", "Tree", "P2M", "M2M", "M2Lh", "M2L", "L2L", "L2P", "P2P")


def _zero_times() -> Dict[str, float]:
    return {stage: 0.0 for stage in STAGES}


@dataclass
class StageReport:
    rank: int
    times: Dict[str, float] = field(default_factory=_zero_times)
    n_near: int = 0
    n_far: int = 0
    order: int = 0
    levels: int = 0
    n_sources: int = 0
    n_targets: int = 0
    n_leaves: int = 0
    leaf_points: Dict[str, Any] = field(default_factory=dict)
    messages: Dict[str, Any] = field(default_factory=dict)
    tree: Dict[str, Any] = field(default_factory=dict)

    @contextmanager
    def timed(self, stage: str):
        if stage not in self.times:
            raise KeyError(f"unknown stage {stage!r}")
        start = time.perf_counter()
        try:
            yield
        finally:
            self.times[stage] += time.perf_counter() - start

    @property
    def total(self) -> float:
        return sum(self.times.values())

    @property
    def points_per_leaf(self) -> float:
        return self.n_sources / self.n_leaves if self.n_leaves else 0.0

    @property
    def balance_ratio(self) -> float:
        """(N/M)^2 / Q^3, held roughly constant when M2L and P2P are balanced."""
        return self.points_per_leaf ** 2 / max(self.order, 1) ** 3

    def to_dict(self) -> dict:
        out = asdict(self)
        out["total"] = self.total
        out["points_per_leaf"] = self.points_per_leaf
        out["balance_ratio"] = self.balance_ratio
        return out


@dataclass
class P2PVariance:
    times: List[float]

    @property
    def value(self) -> float:
        """(max - min) / mean of per-rank P2P times."""
        if not self.times:
            return 0.0
        mean = float(np.mean(self.times))
        if mean == 0.0:
            return 0.0
        return (max(self.times) - min(self.times)) / mean


@dataclass(eq=False)
class RankResult:
    rank: int
    potentials: PotentialVector
    report: StageReport
    tree: Any = None
    connectivity: Any = None
    halos: Any = None


@dataclass(eq=False)
class FmmRun:
    config: Any
    backend: str
    potentials: PotentialVector
    reports: List[StageReport]
    error: Optional[float] = None
    results: List[RankResult] = field(default_factory=list)

    @property
    def ranks(self) -> int:
        return len(self.reports)

    @property
    def n_near(self) -> int:
        return sum(r.n_near for r in self.reports)

    @property
    def n_far(self) -> int:
        return sum(r.n_far for r in self.reports)

    def stage_times(self, stage: str) -> List[float]:
        return [r.times[stage] for r in self.reports]

    def stage_max(self, stage: str) -> float:
        return max(self.stage_times(stage), default=0.0)

    @property
    def total(self) -> float:
        return max((r.total for r in self.reports), default=0.0)

    @property
    def p2p_variance(self) -> P2PVariance:
        return P2PVariance(self.stage_times("P2P"))

    def to_dict(self) -> dict:
        config = self.config.to_dict() if hasattr(self.config, "to_dict") else dict(self.config or {})
        return {
            "config": config,
            "backend": self.backend,
            "ranks": self.ranks,
            "n_points": int(len(self.potentials)),
            "stages": {stage: self.stage_times(stage) for stage in STAGES},
            "total": self.total,
            "n_near": self.n_near,
            "n_far": self.n_far,
            "p2p_variance": self.p2p_variance.value,
            "max_relative_error": self.error,
            "reports": [r.to_dict() for r in self.reports],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


@dataclass
class SweepPoint:
    parameter: str
    value: Any
    totals: List[float]
    stage_means: Dict[str, float] = field(default_factory=dict)
    error: Optional[float] = None
    c_near: Optional[float] = None
    c_far: Optional[float] = None
    p2p_variance: Optional[float] = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.totals))

    @property
    def min(self) -> float:
        return float(np.min(self.totals))

    @property
    def max(self) -> float:
        return float(np.max(self.totals))

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(mean=self.mean, min=self.min, max=self.max)
        return out
