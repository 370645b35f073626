import logging
import traceback
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from balancedfmm import wire
from balancedfmm.direct import PotentialVector, p2p_asymmetric, p2p_symmetric
from balancedfmm.errors import ConfigMismatchError, ProtocolError
from balancedfmm.geometry import Box, Connection, SourceSet, TargetSet
from balancedfmm.harmonics.operators import POINT_CHUNK, l2l_batch, m2l_batch, m2m_batch
from balancedfmm.harmonics.solid import n_coefficients, regular_harmonics
from balancedfmm.stage_objects import RankResult, StageReport
from balancedfmm.transport.base import Endpoint, SendToken, Stage, Tag
from balancedfmm.treebuild import (
    CHILDREN,
    SplitParams,
    bin_targets,
    build_connectivity,
    build_halos,
    build_local_tree,
    tree_statistics,
)

logger = logging.getLogger(__name__)


class RankProcessor:
    """Runs the whole pipeline for one rank: tree, upward pass, downward pass, evaluation.

    The rank owns one level-1 box in a distributed run, or every level-1
    box of the partition when it is the only rank of a serial forest.
    Foreign contributions are staged per source rank and reduced in
    ascending rank order after the local ones, so the result does not
    depend on message arrival order.
    """

    def __init__(self, config, endpoint: Endpoint, sources: SourceSet, roots: Sequence[Box],
                 targets: Optional[TargetSet] = None, keep_state: bool = False):
        self.config = config
        self.endpoint = endpoint
        self.rank = endpoint.rank
        self.sources = sources
        self.targets = targets
        self.roots = list(roots)
        self.keep_state = keep_state

        self.levels = int(config.levels)
        self.order = config.expansion_order
        self.report = StageReport(
            rank=self.rank,
            order=self.order,
            levels=self.levels,
            n_sources=len(sources),
            n_targets=len(sources) if targets is None else len(targets),
        )

        self.tree = None
        self.binning = None
        self.connectivity = None
        self.halos = None
        self.multipoles: List[np.ndarray] = []
        self.locals: List[np.ndarray] = []
        self.source_counts: List[np.ndarray] = []
        self.target_counts: List[np.ndarray] = []
        self._sends: List[SendToken] = []

    async def run(self) -> RankResult:
        try:
            with self.report.timed("Alloc"):
                self._allocate()
            await self._handshake()
            with self.report.timed("Tree"):
                await self._build_tree()
            with self.report.timed("P2M"):
                self.p2m()
            with self.report.timed("M2M"):
                self.m2m()
            await self.downward_pass()
            potentials = await self.evaluation_pass()
            await self._finish()
        except Exception:
            logger.error(f"rank {self.rank}: pipeline failed\n{traceback.format_exc()}")
            raise
        logger.debug(f"rank {self.rank}: done in {self.report.total:.3f}s")
        result = RankResult(rank=self.rank, potentials=potentials, report=self.report)
        if self.keep_state:
            result.tree, result.connectivity, result.halos = self.tree, self.connectivity, self.halos
        return result

    def _allocate(self):
        size = n_coefficients(self.order)
        n_roots = len(self.roots)
        for level in range(1, self.levels + 1):
            boxes = n_roots * CHILDREN ** (level - 1)
            self.multipoles.append(np.zeros((boxes, size), dtype=np.complex128))
            self.locals.append(np.zeros((boxes, size), dtype=np.complex128))

    async def _handshake(self):
        peers = [q for q in range(self.endpoint.size) if q != self.rank]
        if not peers:
            return
        mine = self.config.checksum()
        tag = Tag(Stage.HANDSHAKE, 0, 0)
        sends = [self.endpoint.send_nb(q, tag, wire.encode_u64(mine)) for q in peers]
        for q in peers:
            theirs = wire.decode_u64(await self.endpoint.wait(self.endpoint.recv_nb(q, tag)))
            if theirs != mine:
                raise ConfigMismatchError(
                    f"rank {self.rank} config checksum {mine:#018x} differs from rank {q}'s {theirs:#018x}"
                )
        for token in sends:
            await self.endpoint.wait(token)

    async def _build_tree(self):
        theta = self.config.theta
        self.tree = build_local_tree(self.sources, self.roots, SplitParams(self.config.eta, self.levels), self.rank)
        self.binning = bin_targets(self.tree, self.targets)
        self.source_counts = [self.tree.counts(level) for level in range(1, self.levels + 1)]
        counts = self.binning.counts()
        self.target_counts = [counts]
        for _ in range(self.levels - 1):
            counts = counts.reshape(-1, CHILDREN).sum(axis=1)
            self.target_counts.insert(0, counts)

        self.connectivity = build_connectivity(self.tree, theta)
        self.halos = await build_halos(self.tree, self.endpoint, theta, self.config.halo_wait, self.target_counts)

        leaf = self.source_counts[-1]
        self.report.n_leaves = self.tree.n_leaves
        self.report.leaf_points = {
            "min": int(leaf.min()),
            "max": int(leaf.max()),
            "mean": float(leaf.mean()),
            "empty": int(np.sum(leaf == 0)),
        }
        self.report.n_near = self.connectivity.count(self.levels, Connection.STRONG) + \
            self.halos.count(self.levels, Connection.STRONG)
        self.report.n_far = sum(
            self.connectivity.count(level, Connection.WEAK) + self.halos.count(level, Connection.WEAK)
            for level in range(1, self.levels + 1)
        )
        self.report.tree = tree_statistics(self.tree, self.connectivity, self.halos)
        logger.debug(f"rank {self.rank}: tree ready, near={self.report.n_near} far={self.report.n_far}")

    def _geometry(self, level: int) -> Tuple[np.ndarray, np.ndarray]:
        boxes = self.tree.levels[level - 1]
        return boxes.center, boxes.radius

    def p2m(self):
        sources = self.tree.sources
        leaf_of = np.repeat(np.arange(self.tree.n_leaves), self.source_counts[-1])
        centers, scales = self._geometry(self.levels)
        multipoles = self.multipoles[-1]
        for start in range(0, len(sources), POINT_CHUNK):
            part = slice(start, start + POINT_CHUNK)
            leaf = leaf_of[part]
            relative = (sources.positions[part] - centers[leaf]) / scales[leaf][:, None]
            weighted = np.conj(regular_harmonics(relative, self.order)) * sources.masses[part][:, None]
            boxes, first = np.unique(leaf, return_index=True)
            multipoles[boxes] += np.add.reduceat(weighted, first, axis=0)

    def m2m(self):
        for level in range(self.levels, 1, -1):
            child = self.multipoles[level - 1]
            filled = np.flatnonzero(self.source_counts[level - 1] > 0)
            parents = filled // CHILDREN
            child_centers, child_scales = self._geometry(level)
            parent_centers, parent_scales = self._geometry(level - 1)
            shifted = np.zeros_like(child)
            if len(filled):
                shifted[filled] = m2m_batch(
                    child[filled], child_centers[filled], child_scales[filled],
                    parent_centers[parents], parent_scales[parents], self.order,
                )
            self.multipoles[level - 2] += shifted.reshape(-1, CHILDREN, shifted.shape[1]).sum(axis=1)

    def _local_m2l(self, level: int):
        sources, targets = self.connectivity.pairs(level, Connection.WEAK)
        keep = (self.source_counts[level - 1][sources] > 0) & (self.target_counts[level - 1][targets] > 0)
        sources, targets = sources[keep], targets[keep]
        if not len(sources):
            return
        centers, scales = self._geometry(level)
        shifted = m2l_batch(
            self.multipoles[level - 1][sources], centers[sources], scales[sources],
            centers[targets], scales[targets], self.order, self.config.m2l,
        )
        np.add.at(self.locals[level - 1], targets, shifted)

    def _outgoing(self, block, pairs) -> np.ndarray:
        """Local boxes of `pairs` that hold sources and face a foreign box holding targets."""
        local, foreign = pairs
        keep = (self.source_counts[block.level - 1][local] > 0) & (block.foreign_counts(foreign, "targets") > 0)
        return np.unique(local[keep])

    def _incoming(self, block, pairs) -> Tuple[np.ndarray, np.ndarray]:
        """The pairs of `pairs` whose local box holds targets and whose foreign box holds sources."""
        local, foreign = pairs
        keep = (self.target_counts[block.level - 1][local] > 0) & (block.foreign_counts(foreign, "sources") > 0)
        return local[keep], foreign[keep]

    def _foreign_m2l(self, level: int, peer: int, payload: bytes):
        levels, boxes, f_centers, f_scales, coefficients = wire.decode_expansions(self.order, payload)
        if len(levels) and np.any(levels != level):
            raise ProtocolError(f"rank {self.rank}: expansion payload from rank {peer} mixes levels {np.unique(levels)}")
        block = self.halos.block(level, peer)
        local, foreign = self._incoming(block, block.weak_pairs())
        pos = np.minimum(np.searchsorted(boxes, foreign), max(len(boxes) - 1, 0))
        if len(foreign) and (len(boxes) == 0 or np.any(boxes[pos] != foreign)):
            raise ProtocolError(f"rank {self.rank}: rank {peer} did not send every weakly connected box at level {level}")
        if not len(local):
            return local, np.zeros((0, coefficients.shape[1]), dtype=np.complex128)
        centers, scales = self._geometry(level)
        shifted = m2l_batch(
            coefficients[pos], f_centers[pos], f_scales[pos],
            centers[local], scales[local], self.order, self.config.m2l,
        )
        return local, shifted

    async def _drain(self, pending: Dict, handle):
        """Feed completed receives to `handle` in rank order or in completion order."""
        if self.config.halo_wait == "rank":
            for token in sorted(pending, key=lambda t: pending[t]):
                handle(pending[token], await self.endpoint.wait(token))
        else:
            pending = dict(pending)
            while pending:
                token = await self.endpoint.wait_any(list(pending))
                handle(pending.pop(token), token.payload)

    async def downward_pass(self):
        endpoint = self.endpoint
        pending = {}
        with self.report.timed("M2Lh"):
            for level in range(1, self.levels + 1):
                centers, scales = self._geometry(level)
                tag = Tag(Stage.M2L, level, 0)
                for q in self.halos.peers(level):
                    block = self.halos.block(level, q)
                    if block.n_weak == 0:
                        continue
                    pairs = block.weak_pairs()
                    boxes = self._outgoing(block, pairs)
                    if len(boxes):
                        payload = wire.encode_expansions(
                            self.order, level, boxes, centers[boxes], scales[boxes], self.multipoles[level - 1][boxes],
                        )
                        self._sends.append(endpoint.send_nb(q, tag, payload))
                    if len(self._incoming(block, pairs)[0]):
                        pending[endpoint.recv_nb(q, tag)] = (q, level)

        with self.report.timed("M2L"):
            for level in range(1, self.levels + 1):
                self._local_m2l(level)

        staged: Dict[int, List] = {}

        def handle(key, payload):
            q, level = key
            staged.setdefault(q, []).append((level, *self._foreign_m2l(level, q, payload)))

        with self.report.timed("M2Lh"):
            await self._drain(pending, handle)
            for q in sorted(staged):
                for level, local, shifted in sorted(staged[q], key=lambda item: item[0]):
                    np.add.at(self.locals[level - 1], local, shifted)

        with self.report.timed("L2L"):
            for level in range(1, self.levels):
                children = np.flatnonzero(self.target_counts[level] > 0)
                if not len(children):
                    continue
                parents = children // CHILDREN
                parent_centers, parent_scales = self._geometry(level)
                child_centers, child_scales = self._geometry(level + 1)
                self.locals[level][children] += l2l_batch(
                    self.locals[level - 1][parents], parent_centers[parents], parent_scales[parents],
                    child_centers[children], child_scales[children], self.order,
                )
        return self.locals

    def _l2p(self) -> np.ndarray:
        targets = self.binning.targets
        leaf_of = np.repeat(np.arange(self.tree.n_leaves), self.target_counts[-1])
        centers, scales = self._geometry(self.levels)
        coefficients = self.locals[-1]
        far = np.zeros(len(targets))
        for start in range(0, len(targets), POINT_CHUNK):
            part = slice(start, start + POINT_CHUNK)
            leaf = leaf_of[part]
            relative = (targets.positions[part] - centers[leaf]) / scales[leaf][:, None]
            harmonics = np.conj(regular_harmonics(relative, self.order))
            far[part] = np.einsum("ij,ij->i", harmonics, coefficients[leaf]).real
        return far

    def _points_payload(self, boxes: np.ndarray) -> bytes:
        offsets = self.tree.offsets[-1]
        counts = offsets[boxes + 1] - offsets[boxes]
        index = np.concatenate([np.arange(offsets[b], offsets[b + 1]) for b in boxes]) if len(boxes) else \
            np.zeros(0, dtype=np.int64)
        points = self.tree.sources.take(index)
        return wire.encode_points(np.repeat(boxes, counts), points.positions, points.masses, points.ids)

    def _foreign_p2p(self, peer: int, payload: bytes) -> np.ndarray:
        boxes, positions, masses, ids = wire.decode_points(payload)
        foreign = {}
        if len(boxes):
            starts = np.flatnonzero(np.r_[True, boxes[1:] != boxes[:-1]])
            ends = np.r_[starts[1:], len(boxes)]
            for s, e in zip(starts, ends):
                foreign[int(boxes[s])] = SourceSet(positions[s:e], masses[s:e], ids[s:e])
        block = self.halos.block(self.levels, peer)
        pairs = self._incoming(block, block.strong_pairs())
        missing = np.setdiff1d(pairs[1], np.fromiter(foreign, dtype=np.int64, count=len(foreign)))
        if len(missing):
            raise ProtocolError(f"rank {self.rank}: rank {peer} did not send points for leaves {missing[:5].tolist()}")
        return p2p_asymmetric(self.binning.targets, self.binning.offsets, foreign, pairs)

    async def evaluation_pass(self) -> PotentialVector:
        endpoint = self.endpoint
        level = self.levels
        pending = {}
        with self.report.timed("P2P"):
            tag = Tag(Stage.P2P, level, 0)
            for q in self.halos.peers(level):
                block = self.halos.block(level, q)
                if block.n_strong == 0:
                    continue
                pairs = block.strong_pairs()
                boxes = self._outgoing(block, pairs)
                if len(boxes):
                    self._sends.append(endpoint.send_nb(q, tag, self._points_payload(boxes)))
                if len(self._incoming(block, pairs)[0]):
                    pending[endpoint.recv_nb(q, tag)] = q

        with self.report.timed("L2P"):
            far = self._l2p()

        with self.report.timed("P2P"):
            near = p2p_symmetric(
                self.tree.sources, self.tree.offsets[-1], self.connectivity.upper_pairs(level, Connection.STRONG),
                self.binning.targets, self.binning.offsets, self.binning.are_sources,
            )
            staged: Dict[int, np.ndarray] = {}

            def handle(q, payload):
                staged[q] = self._foreign_p2p(q, payload)

            await self._drain(pending, handle)
            phi = far + near
            for q in sorted(staged):
                phi += staged[q]
        return PotentialVector(self.binning.targets.ids, phi)

    async def _finish(self):
        for token in self._sends:
            await self.endpoint.wait(token)
        self._sends.clear()
        await self.endpoint.barrier()
        leftover = self.endpoint.check_drained()
        if leftover:
            raise ProtocolError(leftover)
        self.report.messages = self.endpoint.stats.to_dict()
