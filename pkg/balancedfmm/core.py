import asyncio
import hashlib
import json
import logging
from argparse import Namespace
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from balancedfmm import wire
from balancedfmm.config import FMM_BACKEND, FMM_WATCHDOG_TIMEOUT
from balancedfmm.direct import PotentialVector
from balancedfmm.errors import GeometryError, PartitionError, TransportError
from balancedfmm.geometry import Connection, Partition, SourceSet, TargetSet, check_theta, partition_sources
from balancedfmm.harmonics.operators import M2L_METHODS
from balancedfmm.harmonics.precision import PrecisionPolicy
from balancedfmm.rank_processor import RankProcessor
from balancedfmm.stage_objects import FmmRun, RankResult, StageReport
from balancedfmm.transport.base import Endpoint, Stage, Tag
from balancedfmm.transport.memory import MemoryFabric
from balancedfmm.transport.tcp import TcpEndpoint
from balancedfmm.treebuild import SplitParams, build_connectivity, build_halos, build_local_tree, levels_for_leaf_size
from balancedfmm.warmup import warm_operators

logger = logging.getLogger(__name__)

PARTITIONS = ("cubic", "orb")
HALO_WAITS = ("rank", "any")
BACKENDS = ("memory", "tcp", "serial")


@dataclass
class FmmConfig:
    theta: float = 0.5
    eta: float = 0.5
    levels: Union[int, str] = 3
    tol: float = 1e-6
    order: Optional[int] = None
    bound_constant: float = 1.0
    ranks: int = 1
    partition: str = "cubic"
    halo_wait: str = "rank"
    m2l: str = "rotation"
    watchdog_timeout: float = 60.0
    leaf_target: int = 100

    def __post_init__(self):
        self.theta = check_theta(self.theta)
        if not 0.0 <= self.eta <= 1.0:
            raise GeometryError(f"eta must lie in [0, 1], got {self.eta}")
        if self.levels != "auto":
            self.levels = int(self.levels)
            if self.levels < 1:
                raise GeometryError(f"levels must be >= 1 or 'auto', got {self.levels}")
        if self.order is not None and self.order < 0:
            raise GeometryError(f"expansion order must be >= 0, got {self.order}")
        if self.order is None:
            PrecisionPolicy(self.tol, self.theta, self.bound_constant)
        if self.ranks < 1:
            raise PartitionError(f"rank count must be >= 1, got {self.ranks}")
        if self.partition not in PARTITIONS:
            raise PartitionError(f"unknown partition scheme {self.partition!r}, expected one of {PARTITIONS}")
        if self.halo_wait not in HALO_WAITS:
            raise ValueError(f"unknown halo wait mode {self.halo_wait!r}, expected one of {HALO_WAITS}")
        if self.m2l not in M2L_METHODS:
            raise ValueError(f"unknown m2l form {self.m2l!r}, expected one of {M2L_METHODS}")
        if self.leaf_target < 1:
            raise GeometryError(f"leaf target must be >= 1, got {self.leaf_target}")

    @property
    def precision(self) -> PrecisionPolicy:
        return PrecisionPolicy(self.tol, self.theta, self.bound_constant)

    @property
    def expansion_order(self) -> int:
        return self.order if self.order is not None else self.precision.order

    def resolved(self, n_points: int) -> "FmmConfig":
        """Copy with `levels='auto'` replaced by the level count for `n_points`."""
        if self.levels != "auto":
            return self
        levels = levels_for_leaf_size(n_points, self.ranks, self.leaf_target)
        logger.info(f"levels=auto chose L={levels} for {n_points} points on {self.ranks} rank(s)")
        return replace(self, levels=levels)

    def checksum(self) -> int:
        if self.levels == "auto":
            raise GeometryError("resolve levels before computing the config checksum")
        shared = (self.theta, self.eta, self.levels, self.expansion_order, self.ranks, self.partition, self.m2l)
        digest = hashlib.blake2b(repr(shared).encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["expansion_order"] = self.expansion_order
        return out


async def _gather_ranks(coroutines) -> list:
    tasks = [asyncio.create_task(c) for c in coroutines]
    try:
        return await asyncio.gather(*tasks)
    except Exception:
        for task in tasks:
            if not task.done():
                task.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        raise


async def run_distributed(sources: SourceSet, roots, config: FmmConfig, endpoint: Endpoint,
                          targets: Optional[TargetSet] = None, keep_state: bool = False) -> RankResult:
    """Collective: one call per rank, each with its own endpoint."""
    return await RankProcessor(config, endpoint, sources, roots, targets, keep_state).run()


def _partition(sources: SourceSet, targets: Optional[TargetSet], config: FmmConfig) -> Partition:
    return partition_sources(sources, config.ranks, config.partition, config.eta, targets)


async def run_memory(sources: SourceSet, targets: Optional[TargetSet] = None, config: Optional[FmmConfig] = None,
                     keep_state: bool = False, delays: Optional[Dict[int, float]] = None) -> FmmRun:
    """All ranks as tasks in this event loop, connected by the in-memory fabric."""
    config = (config or FmmConfig()).resolved(len(sources))
    partition = _partition(sources, targets, config)
    fabric = MemoryFabric(config.ranks, config.watchdog_timeout, delays)
    results = await _gather_ranks(
        run_distributed(
            partition.sources[r], [partition.boxes[r]], config, fabric.endpoint(r),
            None if targets is None else partition.targets[r], keep_state,
        )
        for r in range(config.ranks)
    )
    return FmmRun(
        config=config,
        backend="memory",
        potentials=PotentialVector.merge([r.potentials for r in results]),
        reports=[r.report for r in results],
        results=list(results),
    )


def run_serial(sources: SourceSet, targets: Optional[TargetSet] = None, config: Optional[FmmConfig] = None,
               keep_state: bool = False) -> FmmRun:
    config = config or FmmConfig()
    if config.ranks != 1:
        raise PartitionError(f"run_serial needs ranks=1, got {config.ranks}; use run_serial_forest")
    run = asyncio.run(run_memory(sources, targets, config, keep_state))
    run.backend = "serial"
    return run


async def run_forest(sources: SourceSet, targets: Optional[TargetSet] = None, config: Optional[FmmConfig] = None,
                     keep_state: bool = False) -> FmmRun:
    """One rank owning every level-1 box of the P-way partition."""
    config = (config or FmmConfig()).resolved(len(sources))
    partition = _partition(sources, targets, config)
    fabric = MemoryFabric(1, config.watchdog_timeout)
    result = await run_distributed(sources, partition.boxes, config, fabric.endpoint(0), targets, keep_state)
    return FmmRun(config=config, backend="serial", potentials=result.potentials, reports=[result.report],
                  results=[result])


def run_serial_forest(sources: SourceSet, targets: Optional[TargetSet] = None, config: Optional[FmmConfig] = None,
                      keep_state: bool = False) -> FmmRun:
    return asyncio.run(run_forest(sources, targets, config, keep_state))


async def run_tcp_rank(sources: SourceSet, targets: Optional[TargetSet], config: FmmConfig, rank: int,
                       roster: Sequence) -> Optional[FmmRun]:
    """One rank of a socket run. Every rank holds the full input and keeps its share.

    Rank 0 gathers the partial potentials and reports and returns the run;
    the other ranks return None.
    """
    config = config.resolved(len(sources))
    if len(roster) != config.ranks:
        raise PartitionError(f"roster lists {len(roster)} ranks but the config asks for {config.ranks}")
    partition = _partition(sources, targets, config)
    endpoint = TcpEndpoint(rank, roster, config.watchdog_timeout)
    await endpoint.start()
    try:
        result = await run_distributed(
            partition.sources[rank], [partition.boxes[rank]], config, endpoint,
            None if targets is None else partition.targets[rank],
        )
        potentials_tag, report_tag = Tag(Stage.GATHER, 0, 0), Tag(Stage.GATHER, 0, 1)
        run = None
        if rank == 0:
            parts, reports = [result.potentials], [result.report]
            for q in range(1, endpoint.size):
                ids, values = wire.decode_potentials(await endpoint.wait(endpoint.recv_nb(q, potentials_tag)))
                parts.append(PotentialVector(ids, values))
                reports.append(StageReport(**_report_fields(await endpoint.wait(endpoint.recv_nb(q, report_tag)))))
            run = FmmRun(config=config, backend="tcp", potentials=PotentialVector.merge(parts), reports=reports)
        else:
            sends = [
                endpoint.send_nb(0, potentials_tag, wire.encode_potentials(result.potentials.ids,
                                                                           result.potentials.values)),
                endpoint.send_nb(0, report_tag, json.dumps(result.report.to_dict()).encode("utf-8")),
            ]
            for token in sends:
                await endpoint.wait(token)
        await endpoint.barrier()
        return run
    finally:
        await endpoint.close()


def _report_fields(payload: bytes) -> dict:
    data = json.loads(payload.decode("utf-8"))
    names = {f.name for f in fields(StageReport)}
    return {k: v for k, v in data.items() if k in names}


@dataclass
class ConnectionCounts:
    ranks: int
    n_near: int
    n_far: int
    near_per_rank: List[int] = field(default_factory=list)
    far_per_rank: List[int] = field(default_factory=list)


def _count(tree, connectivity, halos):
    levels = tree.n_levels
    near = connectivity.count(levels, Connection.STRONG) + halos.count(levels, Connection.STRONG)
    far = sum(connectivity.count(l, Connection.WEAK) + halos.count(l, Connection.WEAK) for l in range(1, levels + 1))
    return near, far


async def count_connections(sources: SourceSet, config: FmmConfig) -> ConnectionCounts:
    """Tree, connectivity and halos on every rank, without any expansion work."""
    config = config.resolved(len(sources))
    partition = _partition(sources, None, config)
    fabric = MemoryFabric(config.ranks, config.watchdog_timeout)
    params = SplitParams(config.eta, config.levels)

    async def one_rank(r: int):
        tree = build_local_tree(partition.sources[r], [partition.boxes[r]], params, r)
        connectivity = build_connectivity(tree, config.theta)
        halos = await build_halos(tree, fabric.endpoint(r), config.theta, config.halo_wait)
        return _count(tree, connectivity, halos)

    counts = await _gather_ranks(one_rank(r) for r in range(config.ranks))
    near = [c[0] for c in counts]
    far = [c[1] for c in counts]
    return ConnectionCounts(config.ranks, sum(near), sum(far), near, far)


def connection_factors(counts: ConnectionCounts, reference: ConnectionCounts):
    """C_near, C_far: connection totals per rank relative to the single-rank reference (weak scaling)."""
    if reference.n_near == 0 or reference.n_far == 0:
        return float("nan"), float("nan")
    scale = counts.ranks / reference.ranks
    return counts.n_near / (scale * reference.n_near), counts.n_far / (scale * reference.n_far)


def audit_pair_coverage(results: Sequence[RankResult]) -> Dict[str, int]:
    """How many times every ordered source pair is covered by a weak pair or a strong leaf pair.

    Needs rank results kept with `keep_state=True`. A correct near/far
    split covers every pair exactly once.
    """
    results = sorted(results, key=lambda r: r.rank)
    if any(r.tree is None for r in results):
        raise ValueError("pair coverage needs rank results run with keep_state=True")
    levels = results[0].tree.n_levels
    base: Dict[tuple, int] = {}
    total = 0
    for r in results:
        for level in range(1, levels + 1):
            base[(r.rank, level)] = total
            total += len(r.tree.levels[level - 1])

    point_ids, point_boxes = [], [[] for _ in range(levels)]
    for r in results:
        point_ids.append(r.tree.sources.ids)
        for level in range(1, levels + 1):
            boxes = np.repeat(np.arange(len(r.tree.levels[level - 1])), r.tree.counts(level))
            point_boxes[level - 1].append(boxes + base[(r.rank, level)])
    point_ids = np.concatenate(point_ids)
    point_boxes = [np.concatenate(b) for b in point_boxes]

    def relation(level: int, kind: Connection) -> np.ndarray:
        codes = []
        for r in results:
            sources, targets = r.connectivity.pairs(level, kind)
            own = base[(r.rank, level)]
            codes.append((targets + own) * total + (sources + own))
            for q in r.halos.peers(level):
                block = r.halos.block(level, q)
                local, foreign = block.strong_pairs() if kind == Connection.STRONG else block.weak_pairs()
                codes.append((local + own) * total + (foreign + base[(q, level)]))
        return np.unique(np.concatenate(codes)) if codes else np.zeros(0, dtype=np.int64)

    n = len(point_ids)
    t, s = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    off_diagonal = t != s
    t, s = t[off_diagonal], s[off_diagonal]
    coverage = np.zeros(len(t), dtype=np.int64)
    for level in range(1, levels + 1):
        keys = point_boxes[level - 1]
        coverage += np.isin(keys[t] * total + keys[s], relation(level, Connection.WEAK))
    keys = point_boxes[-1]
    coverage += np.isin(keys[t] * total + keys[s], relation(levels, Connection.STRONG))
    report = {
        "pairs": int(len(coverage)),
        "covered_once": int(np.sum(coverage == 1)),
        "uncovered": int(np.sum(coverage == 0)),
        "multiply_covered": int(np.sum(coverage > 1)),
    }
    if report["uncovered"] or report["multiply_covered"]:
        logger.warning(f"pair coverage audit failed: {report}")
    return report


class FmmEngine:
    """Entry point for library users: keyword configuration, then `evaluate`."""

    def __init__(self, **kwargs):
        defaults = {
            "theta": 0.5,
            "eta": 0.5,
            "levels": 3,
            "tol": 1e-6,
            "order": None,
            "bound_constant": 1.0,
            "ranks": 1,
            "partition": "cubic",
            "halo_wait": "rank",
            "m2l": "rotation",
            "watchdog_timeout": FMM_WATCHDOG_TIMEOUT,
            "leaf_target": 100,
            "backend": FMM_BACKEND,
            "rank": None,
            "roster": None,
            "warmup": True,
            "keep_state": False,
        }

        config_dict = {**defaults, **kwargs}
        if "p" in kwargs:
            config_dict["ranks"] = kwargs["p"]
        config_dict.pop("p", None)

        self.args = Namespace(**config_dict)
        self.config = FmmConfig(**{f.name: config_dict[f.name] for f in fields(FmmConfig)})
        if self.args.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.args.backend!r}, expected one of {BACKENDS}")

    def evaluate(self, sources: SourceSet, targets: Optional[TargetSet] = None) -> Optional[FmmRun]:
        config = self.config.resolved(len(sources))
        if self.args.warmup:
            warm_operators(config.expansion_order, config.m2l)
        backend = self.args.backend
        logger.info(
            f"evaluating {len(sources)} sources on {config.ranks} rank(s), backend={backend}, "
            f"L={config.levels} Q={config.expansion_order} theta={config.theta} eta={config.eta}"
        )
        if backend == "serial":
            if config.ranks == 1:
                return run_serial(sources, targets, config, self.args.keep_state)
            return run_serial_forest(sources, targets, config, self.args.keep_state)
        if backend == "memory":
            return asyncio.run(run_memory(sources, targets, config, self.args.keep_state))
        if self.args.rank is None or self.args.roster is None:
            raise TransportError("the tcp backend needs a rank id and a roster")
        return asyncio.run(run_tcp_rank(sources, targets, config, int(self.args.rank), self.args.roster))
