import logging
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from balancedfmm.errors import CoincidentPointsError, DatasetError
from balancedfmm.geometry import SourceSet, TargetSet

logger = logging.getLogger(__name__)

ROW_BLOCK = 1024
POTENTIAL_MAGIC = b"FMMP"


@dataclass(eq=False)
class PotentialVector:
    """Potentials keyed by evaluation-point id, kept in ascending id order."""
    ids: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64).reshape(-1)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        if len(self.ids) != len(self.values):
            raise ValueError("PotentialVector ids and values differ in length")
        if len(self.ids) > 1 and np.any(np.diff(self.ids) <= 0):
            order = np.argsort(self.ids, kind="stable")
            self.ids, self.values = self.ids[order], self.values[order]
        if not np.all(np.isfinite(self.values)):
            raise ValueError("PotentialVector holds non-finite values")

    def __len__(self):
        return len(self.ids)

    @property
    def covered_ids(self) -> np.ndarray:
        return self.ids

    @classmethod
    def merge(cls, parts: Sequence["PotentialVector"]) -> "PotentialVector":
        if not parts:
            return cls(np.zeros(0, dtype=np.int64), np.zeros(0))
        return cls(np.concatenate([p.ids for p in parts]), np.concatenate([p.values for p in parts]))

    def relative_error(self, reference: "PotentialVector") -> float:
        """max |phi - phi_ref| / max |phi_ref| over the shared ids."""
        if not np.array_equal(self.ids, reference.ids):
            raise ValueError("potential vectors cover different ids")
        norm = float(np.max(np.abs(reference.values))) if len(reference) else 0.0
        if norm == 0.0:
            return float(np.max(np.abs(self.values))) if len(self) else 0.0
        return float(np.max(np.abs(self.values - reference.values)) / norm)


def interaction_matrix(target_pos, target_ids, source_pos, source_ids) -> np.ndarray:
    """1/|t - s| with the t.id == s.id self-terms set to zero."""
    diff = target_pos[:, None, :] - source_pos[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    same = target_ids[:, None] == source_ids[None, :]
    clash = (dist == 0.0) & ~same
    if np.any(clash):
        t, s = np.argwhere(clash)[0]
        raise CoincidentPointsError(target_ids[t], source_ids[s])
    with np.errstate(divide="ignore"):
        inverse = 1.0 / dist
    inverse[same] = 0.0
    return inverse


def potential_block(target_pos, target_ids, source_pos, source_masses, source_ids) -> np.ndarray:
    out = np.zeros(len(target_ids))
    if len(source_ids) == 0:
        return out
    for start in range(0, len(target_ids), ROW_BLOCK):
        rows = slice(start, start + ROW_BLOCK)
        inverse = interaction_matrix(target_pos[rows], target_ids[rows], source_pos, source_ids)
        out[rows] = (inverse * source_masses[None, :]).sum(axis=1)
    return out


def _leaf_groups(leaves: np.ndarray, partners: np.ndarray) -> Iterator[Tuple[int, np.ndarray]]:
    """(leaf, partners) per distinct leaf, partners in their original order."""
    order = np.argsort(leaves, kind="stable")
    leaves, partners = leaves[order], partners[order]
    starts = np.flatnonzero(np.r_[True, leaves[1:] != leaves[:-1]]) if len(leaves) else np.zeros(0, dtype=np.int64)
    ends = np.r_[starts[1:], len(leaves)]
    for s, e in zip(starts, ends):
        yield int(leaves[s]), partners[s:e]


def p2p_symmetric(
    sources: SourceSet,
    source_offsets: np.ndarray,
    pairs: Tuple[np.ndarray, np.ndarray],
    targets: TargetSet,
    target_offsets: np.ndarray,
    targets_are_sources: bool,
) -> np.ndarray:
    """Near field over same-rank strong leaf pairs (i <= j), each unordered pair visited once."""
    phi = np.zeros(len(targets))
    pos, mass, ids = sources.positions, sources.masses, sources.ids
    rows, cols = (np.asarray(p, dtype=np.int64) for p in pairs)
    n_sources, n_targets = np.diff(source_offsets), np.diff(target_offsets)
    if targets_are_sources:
        keep = (n_sources[rows] > 0) & (n_sources[cols] > 0)
    else:
        keep = ((n_targets[rows] > 0) & (n_sources[cols] > 0)) | ((n_targets[cols] > 0) & (n_sources[rows] > 0))
    for i, j in zip(rows[keep].tolist(), cols[keep].tolist()):
        si = slice(source_offsets[i], source_offsets[i + 1])
        sj = slice(source_offsets[j], source_offsets[j + 1])
        if targets_are_sources:
            if i == j:
                phi[si] += potential_block(pos[si], ids[si], pos[si], mass[si], ids[si])
            else:
                inverse = interaction_matrix(pos[si], ids[si], pos[sj], ids[sj])
                phi[si] += (inverse * mass[sj][None, :]).sum(axis=1)
                phi[sj] += (inverse * mass[si][:, None]).sum(axis=0)
        else:
            ti = slice(target_offsets[i], target_offsets[i + 1])
            tj = slice(target_offsets[j], target_offsets[j + 1])
            phi[ti] += potential_block(targets.positions[ti], targets.ids[ti], pos[sj], mass[sj], ids[sj])
            if i != j:
                phi[tj] += potential_block(targets.positions[tj], targets.ids[tj], pos[si], mass[si], ids[si])
    return phi


def p2p_asymmetric(
    targets: TargetSet,
    target_offsets: np.ndarray,
    foreign: Dict[int, SourceSet],
    pairs: Tuple[np.ndarray, np.ndarray],
) -> np.ndarray:
    """Near field from foreign leaf points into local targets only.

    The foreign leaves of one local leaf are evaluated as one block.
    """
    phi = np.zeros(len(targets))
    local, remote = (np.asarray(p, dtype=np.int64) for p in pairs)
    keep = np.diff(target_offsets)[local] > 0
    for i, partners in _leaf_groups(local[keep], remote[keep]):
        parts = [foreign[j] for j in partners.tolist() if j in foreign and len(foreign[j])]
        if not parts:
            continue
        points = SourceSet.concatenate(parts)
        ti = slice(target_offsets[i], target_offsets[i + 1])
        phi[ti] += potential_block(targets.positions[ti], targets.ids[ti], points.positions, points.masses, points.ids)
    return phi


def brute_force(sources: SourceSet, targets: Optional[TargetSet] = None) -> PotentialVector:
    """Direct O(N^2) sum in ascending id order; the reference every FMM run is checked against."""
    sources = sources.sorted_by_id()
    targets = sources.as_targets() if targets is None else targets.sorted_by_id()
    values = potential_block(targets.positions, targets.ids, sources.positions, sources.masses, sources.ids)
    return PotentialVector(targets.ids, values)


def write_potentials(path, potentials: PotentialVector) -> None:
    header = np.array([len(potentials)], dtype="<u8").tobytes()
    from balancedfmm import wire

    with open(path, "wb") as f:
        f.write(POTENTIAL_MAGIC)
        f.write(header)
        f.write(wire.encode_potentials(potentials.ids, potentials.values))


def read_potentials(path) -> PotentialVector:
    from balancedfmm import wire

    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != POTENTIAL_MAGIC:
        raise DatasetError(f"{path} is not a potential file (bad magic {data[:4]!r})")
    n = int(np.frombuffer(data[4:12], dtype="<u8")[0])
    ids, values = wire.decode_potentials(data[12:])
    if len(ids) != n:
        raise DatasetError(f"{path} declares {n} potentials but holds {len(ids)}")
    return PotentialVector(ids, values)


def write_potentials_csv(path, potentials: PotentialVector) -> None:
    table = np.column_stack([potentials.ids.astype(np.float64), potentials.values])
    np.savetxt(path, table, delimiter=",", header="id,potential", comments="", fmt=["%d", "%.17g"])
