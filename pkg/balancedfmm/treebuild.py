import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from balancedfmm.errors import GeometryError, ProtocolError
from balancedfmm.geometry import (
    Box,
    BoxArray,
    Connection,
    SourceSet,
    TargetSet,
    check_theta,
    theta_criterion_arrays,
)

logger = logging.getLogger(__name__)

CHILDREN = 8


@dataclass(frozen=True)
class SplitParams:
    eta: float = 0.5
    levels: int = 3

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise GeometryError(f"eta must lie in [0, 1], got {self.eta}")
        if self.levels < 1:
            raise GeometryError(f"level count must be >= 1, got {self.levels}")


def levels_for_leaf_size(n_points: int, ranks: int = 1, leaf_target: int = 100) -> int:
    """Level count whose balanced tree gives roughly `leaf_target` points per leaf."""
    per_rank = max(n_points / max(ranks, 1), 1.0)
    if per_rank <= leaf_target:
        return 1
    return max(1, int(round(math.log(per_rank / leaf_target, 8))) + 1)


def split_plane(coords, lo: float, hi: float, eta: float) -> float:
    """Blend of the geometric midpoint and the point median, kept strictly inside (lo, hi)."""
    if not lo < hi:
        raise GeometryError(f"split_plane needs lo < hi, got [{lo}, {hi}]")
    coords = np.asarray(coords, dtype=np.float64)
    middle = 0.5 * (lo + hi)
    n = len(coords)
    if n == 0:
        plane = middle
    else:
        k = n // 2
        if n % 2:
            median = np.partition(coords, k)[k]
        else:
            part = np.partition(coords, [k - 1, k])
            median = 0.5 * (part[k - 1] + part[k])
        plane = (1.0 - eta) * middle + eta * median
    return float(np.clip(plane, np.nextafter(lo, hi), np.nextafter(hi, lo)))


def split_box(parent: Box, positions: np.ndarray, eta: float) -> Tuple[List[Box], np.ndarray, np.ndarray]:
    """Split along x, then y in each x-half, then z in each quadrant.

    Returns the 8 children (index 4*ix + 2*iy + iz), a stable ordering of
    `positions` grouped by child, and the per-child counts.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    lo, hi = parent.lo, parent.hi
    code = np.zeros(len(positions), dtype=np.int64)
    children: List[Optional[Box]] = [None] * CHILDREN

    px = split_plane(positions[:, 0], lo[0], hi[0], eta)
    upper_x = positions[:, 0] >= px
    for a, (x0, x1) in enumerate(((lo[0], px), (px, hi[0]))):
        in_x = upper_x == bool(a)
        py = split_plane(positions[in_x, 1], lo[1], hi[1], eta)
        upper_y = positions[:, 1] >= py
        for b, (y0, y1) in enumerate(((lo[1], py), (py, hi[1]))):
            in_xy = in_x & (upper_y == bool(b))
            pz = split_plane(positions[in_xy, 2], lo[2], hi[2], eta)
            upper_z = positions[:, 2] >= pz
            for c, (z0, z1) in enumerate(((lo[2], pz), (pz, hi[2]))):
                child = 4 * a + 2 * b + c
                code[in_xy & (upper_z == bool(c))] = child
                children[child] = Box([x0, y0, z0], [x1, y1, z1])

    order = np.argsort(code, kind="stable")
    counts = np.bincount(code, minlength=CHILDREN)
    return children, order, counts


@dataclass(eq=False)
class LocalTree:
    """Balanced pyramid: level l (1-based) holds n_roots * 8**(l-1) boxes.

    Box j at level l has children 8*j .. 8*j+7 at level l+1. `sources` is the
    rank's source set in leaf-sorted order, `offsets[l-1][j]:offsets[l-1][j+1]`
    its range for box j at level l.
    """
    rank: int
    levels: List[BoxArray]
    offsets: List[np.ndarray]
    sources: SourceSet
    point_permutation: np.ndarray
    params: SplitParams = field(default_factory=SplitParams)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def n_roots(self) -> int:
        return len(self.levels[0])

    @property
    def n_leaves(self) -> int:
        return len(self.levels[-1])

    @property
    def leaf_ranges(self) -> np.ndarray:
        leaf = self.offsets[-1]
        return np.stack([leaf[:-1], leaf[1:]], axis=1)

    def counts(self, level: int) -> np.ndarray:
        return np.diff(self.offsets[level - 1])

    def box_points(self, level: int, j: int) -> slice:
        o = self.offsets[level - 1]
        return slice(int(o[j]), int(o[j + 1]))


def build_local_tree(
    sources: SourceSet,
    roots: Union[Box, Sequence[Box]],
    params: SplitParams,
    rank: int = 0,
) -> LocalTree:
    if isinstance(roots, Box):
        roots = [roots]
    roots = list(roots)
    positions = sources.positions

    owner = np.full(len(sources), -1, dtype=np.int64)
    for r, box in enumerate(roots):
        owner[(owner < 0) & box.contains(positions)] = r
    if np.any(owner < 0):
        missing = sources.ids[owner < 0][:5].tolist()
        raise GeometryError(f"rank {rank}: sources {missing} lie outside the level-1 boxes")

    perm = np.argsort(owner, kind="stable")
    offsets = [np.concatenate([[0], np.cumsum(np.bincount(owner, minlength=len(roots)))])]
    levels = [BoxArray.from_boxes(roots)]

    for level in range(1, params.levels):
        parent_boxes = levels[-1]
        parent_offsets = offsets[-1]
        child_lo = np.empty((len(parent_boxes) * CHILDREN, 3))
        child_hi = np.empty_like(child_lo)
        child_offsets = np.empty(len(parent_boxes) * CHILDREN + 1, dtype=np.int64)
        child_offsets[0] = 0
        for j in range(len(parent_boxes)):
            start, end = int(parent_offsets[j]), int(parent_offsets[j + 1])
            members = perm[start:end]
            children, order, counts = split_box(parent_boxes.box(j), positions[members], params.eta)
            perm[start:end] = members[order]
            for c, child in enumerate(children):
                child_lo[CHILDREN * j + c] = child.lo
                child_hi[CHILDREN * j + c] = child.hi
            child_offsets[CHILDREN * j + 1:CHILDREN * j + 1 + CHILDREN] = start + np.cumsum(counts)
        levels.append(BoxArray(child_lo, child_hi))
        offsets.append(child_offsets)

    # ascending global id inside each leaf fixes the P2P accumulation order
    leaf = offsets[-1]
    for j in range(len(leaf) - 1):
        start, end = int(leaf[j]), int(leaf[j + 1])
        if end - start > 1:
            members = perm[start:end]
            perm[start:end] = members[np.argsort(sources.ids[members], kind="stable")]

    logger.debug(f"rank {rank}: built {params.levels}-level tree over {len(roots)} root(s), {len(sources)} sources")
    return LocalTree(
        rank=rank,
        levels=levels,
        offsets=offsets,
        sources=sources.take(perm),
        point_permutation=perm,
        params=params,
    )


@dataclass(eq=False)
class TargetBinning:
    """Evaluation points grouped by leaf, ascending id inside each leaf."""
    targets: TargetSet
    offsets: np.ndarray
    permutation: np.ndarray
    are_sources: bool = False

    def leaf(self, j: int) -> slice:
        return slice(int(self.offsets[j]), int(self.offsets[j + 1]))

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)


def bin_targets(tree: LocalTree, targets: Optional[TargetSet] = None) -> TargetBinning:
    if targets is None:
        return TargetBinning(
            targets=tree.sources.as_targets(),
            offsets=tree.offsets[-1].copy(),
            permutation=tree.point_permutation.copy(),
            are_sources=True,
        )
    positions = targets.positions
    n = len(targets)
    box = np.full(n, -1, dtype=np.int64)
    roots = tree.levels[0]
    for r in range(len(roots)):
        box[(box < 0) & roots.box(r).contains(positions)] = r
    if np.any(box < 0):
        raise GeometryError(f"rank {tree.rank}: {int(np.sum(box < 0))} targets lie outside the level-1 boxes")
    for level in range(1, tree.n_levels):
        boxes = tree.levels[level]
        kids = CHILDREN * box[:, None] + np.arange(CHILDREN)[None, :]
        inside = np.all((positions[:, None, :] >= boxes.lo[kids]) & (positions[:, None, :] < boxes.hi[kids]), axis=2)
        box = kids[np.arange(n), np.argmax(inside, axis=1)]
    order = np.lexsort((targets.ids, box))
    counts = np.bincount(box, minlength=tree.n_leaves)
    return TargetBinning(
        targets=targets.take(order),
        offsets=np.concatenate([[0], np.cumsum(counts)]),
        permutation=order,
    )


@dataclass(eq=False)
class ConnectivityMatrix:
    """Per-level same-rank box-pair relation in compressed column storage."""
    levels: List[sparse.csc_matrix]

    def pairs(self, level: int, kind: Connection) -> Tuple[np.ndarray, np.ndarray]:
        coo = self.levels[level - 1].tocoo()
        keep = coo.data == int(kind)
        rows, cols = coo.row[keep].astype(np.int64), coo.col[keep].astype(np.int64)
        order = np.lexsort((cols, rows))
        return rows[order], cols[order]

    def upper_pairs(self, level: int, kind: Connection) -> Tuple[np.ndarray, np.ndarray]:
        rows, cols = self.pairs(level, kind)
        keep = rows <= cols
        return rows[keep], cols[keep]

    def count(self, level: int, kind: Connection) -> int:
        return int(np.count_nonzero(self.levels[level - 1].data == int(kind)))


def _classify(centers_i, radii_i, centers_j, radii_j, same, theta) -> np.ndarray:
    weak = theta_criterion_arrays(centers_i, radii_i, centers_j, radii_j, theta) & ~same
    return np.where(weak, int(Connection.WEAK), int(Connection.STRONG)).astype(np.int8)


def _child_pairs(parent_i: np.ndarray, parent_j: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    kids = np.arange(CHILDREN)
    rows = CHILDREN * parent_i[:, None, None] + kids[None, :, None]
    cols = CHILDREN * parent_j[:, None, None] + kids[None, None, :]
    rows, cols = np.broadcast_arrays(rows, cols)
    return rows.reshape(-1), cols.reshape(-1)


def build_connectivity(tree: LocalTree, theta: float) -> ConnectivityMatrix:
    check_theta(theta)
    roots = tree.levels[0]
    n = len(roots)
    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    rows, cols = rows.reshape(-1), cols.reshape(-1)
    centers, radii = roots.center, roots.radius
    values = _classify(centers[rows], radii[rows], centers[cols], radii[cols], rows == cols, theta)
    matrices = [sparse.csc_matrix((values, (rows, cols)), shape=(n, n), dtype=np.int8)]

    for level in range(1, tree.n_levels):
        strong = values == int(Connection.STRONG)
        rows, cols = _child_pairs(rows[strong], cols[strong])
        boxes = tree.levels[level]
        centers, radii = boxes.center, boxes.radius
        values = _classify(centers[rows], radii[rows], centers[cols], radii[cols], rows == cols, theta)
        n = len(boxes)
        matrices.append(sparse.csc_matrix((values, (rows, cols)), shape=(n, n), dtype=np.int8))
    return ConnectivityMatrix(matrices)


@dataclass(eq=False)
class HaloBlock:
    """Cross-rank pairs between local boxes (ibox) and boxes of `peer` (jbox) at one level.

    Strong pairs are packed from the front, weak pairs from the back; the
    slots in between stay unused (-1).
    """
    level: int
    peer: int
    ibox: np.ndarray
    jbox: np.ndarray
    n_strong: int
    n_weak: int
    foreign_index: np.ndarray
    foreign_center: np.ndarray
    foreign_radius: np.ndarray
    foreign_sources: Optional[np.ndarray] = None
    foreign_targets: Optional[np.ndarray] = None

    @property
    def ncon(self) -> int:
        return len(self.ibox)

    def strong_pairs(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.ibox[:self.n_strong], self.jbox[:self.n_strong]

    def weak_pairs(self) -> Tuple[np.ndarray, np.ndarray]:
        start = self.ncon - self.n_weak
        return self.ibox[start:], self.jbox[start:]

    def pair_set(self, kind: Connection) -> set:
        i, j = self.strong_pairs() if kind == Connection.STRONG else self.weak_pairs()
        return set(zip(i.tolist(), j.tolist()))

    def foreign_counts(self, boxes: np.ndarray, kind: str = "sources") -> np.ndarray:
        """Point counts the peer reported for its boxes `boxes` (`kind` is sources or targets)."""
        counts = self.foreign_sources if kind == "sources" else self.foreign_targets
        if counts is None:
            return np.ones(len(boxes), dtype=np.int64)
        return counts[np.searchsorted(self.foreign_index, boxes)]


@dataclass(eq=False)
class HaloMatrix:
    rank: int
    size: int
    blocks: Dict[Tuple[int, int], HaloBlock] = field(default_factory=dict)

    def block(self, level: int, peer: int) -> Optional[HaloBlock]:
        return self.blocks.get((level, peer))

    def peers(self, level: int) -> List[int]:
        return sorted(q for (l, q) in self.blocks if l == level)

    def count(self, level: int, kind: Connection) -> int:
        total = 0
        for (l, _), block in self.blocks.items():
            if l == level:
                total += block.n_strong if kind == Connection.STRONG else block.n_weak
        return total


def pack_halo_block(level, peer, local_idx, local_centers, local_radii, foreign_idx, foreign_centers, foreign_radii,
                    theta, foreign_index, foreign_center, foreign_radius, foreign_sources=None,
                    foreign_targets=None) -> HaloBlock:
    """Classify candidate pairs and pack them strong-forward / weak-backward."""
    ncon = len(local_idx)
    ibox = np.full(ncon, -1, dtype=np.int64)
    jbox = np.full(ncon, -1, dtype=np.int64)
    weak = theta_criterion_arrays(local_centers, local_radii, foreign_centers, foreign_radii, theta)
    strong_k = np.flatnonzero(~weak)
    weak_k = np.flatnonzero(weak)
    # fwd fills 0, 1, ... and bwd fills ncon-1, ncon-2, ... in candidate order
    fwd = len(strong_k)
    bwd = ncon - 1 - len(weak_k)
    ibox[:fwd], jbox[:fwd] = local_idx[strong_k], foreign_idx[strong_k]
    back = ncon - 1 - np.arange(len(weak_k))
    ibox[back], jbox[back] = local_idx[weak_k], foreign_idx[weak_k]
    return HaloBlock(
        level=level,
        peer=peer,
        ibox=ibox,
        jbox=jbox,
        n_strong=fwd,
        n_weak=ncon - 1 - bwd,
        foreign_index=foreign_index,
        foreign_center=foreign_center,
        foreign_radius=foreign_radius,
        foreign_sources=foreign_sources,
        foreign_targets=foreign_targets,
    )


def _lookup(index: np.ndarray, wanted: np.ndarray, peer: int, level: int) -> np.ndarray:
    pos = np.searchsorted(index, wanted)
    pos = np.minimum(pos, max(len(index) - 1, 0))
    if len(wanted) and (len(index) == 0 or np.any(index[pos] != wanted)):
        raise ProtocolError(f"rank {peer} did not send geometry for every strongly connected child at level {level}")
    return pos


async def build_halos(tree: LocalTree, endpoint, theta: float, wait_mode: str = "rank",
                      target_counts: Optional[Sequence[np.ndarray]] = None) -> HaloMatrix:
    """Collective construction of the cross-rank halos, level by level.

    Every geometry record carries the box's source and target counts, so
    both ends of a halo agree on which pairs carry no work. `target_counts`
    defaults to the source counts (targets are the sources).
    """
    from balancedfmm import wire
    from balancedfmm.transport.base import Stage, Tag

    check_theta(theta)
    rank, size = endpoint.rank, endpoint.size
    halos = HaloMatrix(rank=rank, size=size)
    peers = [q for q in range(size) if q != rank]
    if not peers:
        return halos

    for level in range(1, tree.n_levels + 1):
        boxes = tree.levels[level - 1]
        centers, radii = boxes.center, boxes.radius
        tag = Tag(Stage.TREE, level, 0)
        n_sources = tree.counts(level)
        n_targets = n_sources if target_counts is None else np.asarray(target_counts[level - 1])

        outgoing: Dict[int, np.ndarray] = {}
        for q in peers:
            if level == 1:
                outgoing[q] = np.arange(len(boxes))
            else:
                parent = halos.block(level - 1, q)
                strong_local = np.unique(parent.strong_pairs()[0])
                outgoing[q] = (CHILDREN * strong_local[:, None] + np.arange(CHILDREN)[None, :]).reshape(-1)

        sends = [
            endpoint.send_nb(q, tag, wire.encode_geometry(
                outgoing[q], centers[outgoing[q]], radii[outgoing[q]], n_sources[outgoing[q]], n_targets[outgoing[q]],
            ))
            for q in peers
        ]
        recvs = {q: endpoint.recv_nb(q, tag) for q in peers}

        def classify(q: int, payload: bytes):
            f_index, f_center, f_radius, f_sources, f_targets = wire.decode_geometry(payload)
            if level == 1:
                li, fj = np.meshgrid(np.arange(len(boxes)), f_index, indexing="ij")
                local_idx, foreign_idx = li.reshape(-1), fj.reshape(-1)
            else:
                local_idx, foreign_idx = _child_pairs(*halos.block(level - 1, q).strong_pairs())
            pos = _lookup(f_index, foreign_idx, q, level)
            halos.blocks[(level, q)] = pack_halo_block(
                level, q, local_idx, centers[local_idx], radii[local_idx], foreign_idx,
                f_center[pos], f_radius[pos], theta, f_index, f_center, f_radius, f_sources, f_targets,
            )

        if wait_mode == "rank":
            for q in peers:
                classify(q, await endpoint.wait(recvs[q]))
        else:
            pending = {token: q for q, token in recvs.items()}
            while pending:
                token = await endpoint.wait_any(list(pending))
                classify(pending.pop(token), token.payload)
        for token in sends:
            await endpoint.wait(token)
        logger.debug(
            f"rank {rank}: level {level} halos, {halos.count(level, Connection.STRONG)} strong, "
            f"{halos.count(level, Connection.WEAK)} weak"
        )
    return halos


def tree_statistics(tree: LocalTree, connectivity: ConnectivityMatrix, halos: Optional[HaloMatrix] = None) -> dict:
    counts = tree.counts(tree.n_levels)
    stats = {
        "boxes_per_level": [len(b) for b in tree.levels],
        "strong_per_level": [connectivity.count(l, Connection.STRONG) for l in range(1, tree.n_levels + 1)],
        "weak_per_level": [connectivity.count(l, Connection.WEAK) for l in range(1, tree.n_levels + 1)],
        "points_per_leaf": {
            "min": int(counts.min()) if len(counts) else 0,
            "max": int(counts.max()) if len(counts) else 0,
            "mean": float(counts.mean()) if len(counts) else 0.0,
            "empty": int(np.sum(counts == 0)),
            "histogram": np.bincount(counts).tolist() if len(counts) else [],
        },
    }
    if halos is not None:
        stats["halo_strong_per_level"] = [halos.count(l, Connection.STRONG) for l in range(1, tree.n_levels + 1)]
        stats["halo_weak_per_level"] = [halos.count(l, Connection.WEAK) for l in range(1, tree.n_levels + 1)]
    return stats
