"""Little-endian payload codecs shared by every transport backend."""
from functools import lru_cache

import numpy as np

from balancedfmm.errors import ProtocolError

GEOMETRY_RECORD = np.dtype([
    ("index", "<u4"),
    ("center", "<f8", (3,)),
    ("radius", "<f8"),
    ("sources", "<u4"),
    ("targets", "<u4"),
])
POINT_RECORD = np.dtype([("box", "<u4"), ("position", "<f8", (3,)), ("mass", "<f8"), ("id", "<i8")])
POTENTIAL_RECORD = np.dtype([("id", "<i8"), ("value", "<f8")])
U64 = np.dtype("<u8")


@lru_cache(maxsize=None)
def expansion_record(order: int) -> np.dtype:
    """[level u32][box u32][center 3 f64][scale f64][2 (Q+1)^2 f64 interleaved re/im]"""
    return np.dtype([
        ("level", "<u4"),
        ("box", "<u4"),
        ("center", "<f8", (3,)),
        ("scale", "<f8"),
        ("coefficients", "<f8", (2 * (order + 1) ** 2,)),
    ])


def _records(payload: bytes, dtype: np.dtype) -> np.ndarray:
    if len(payload) % dtype.itemsize:
        raise ProtocolError(f"payload of {len(payload)} bytes is not a whole number of {dtype.itemsize}-byte records")
    return np.frombuffer(payload, dtype=dtype)


def encode_geometry(indices, centers, radii, sources, targets) -> bytes:
    """Box records with the source and target point counts of each box."""
    rec = np.empty(len(indices), dtype=GEOMETRY_RECORD)
    rec["index"] = indices
    rec["center"] = centers
    rec["radius"] = radii
    rec["sources"] = sources
    rec["targets"] = targets
    return rec.tobytes()


def decode_geometry(payload: bytes):
    rec = _records(payload, GEOMETRY_RECORD)
    return (
        rec["index"].astype(np.int64),
        np.array(rec["center"]),
        np.array(rec["radius"]),
        rec["sources"].astype(np.int64),
        rec["targets"].astype(np.int64),
    )


def encode_expansions(order: int, level: int, boxes, centers, scales, coefficients) -> bytes:
    coefficients = np.ascontiguousarray(coefficients, dtype=np.complex128).reshape(len(boxes), (order + 1) ** 2)
    rec = np.empty(len(boxes), dtype=expansion_record(order))
    rec["level"] = level
    rec["box"] = boxes
    rec["center"] = centers
    rec["scale"] = scales
    rec["coefficients"] = coefficients.view(np.float64)
    return rec.tobytes()


def decode_expansions(order: int, payload: bytes):
    rec = _records(payload, expansion_record(order))
    coefficients = np.ascontiguousarray(rec["coefficients"]).view(np.complex128)
    return (
        rec["level"].astype(np.int64),
        rec["box"].astype(np.int64),
        np.array(rec["center"]),
        np.array(rec["scale"]),
        coefficients.reshape(len(rec), (order + 1) ** 2),
    )


def encode_points(boxes, positions, masses, ids) -> bytes:
    rec = np.empty(len(ids), dtype=POINT_RECORD)
    rec["box"] = boxes
    rec["position"] = positions
    rec["mass"] = masses
    rec["id"] = ids
    return rec.tobytes()


def decode_points(payload: bytes):
    rec = _records(payload, POINT_RECORD)
    return rec["box"].astype(np.int64), np.array(rec["position"]), np.array(rec["mass"]), rec["id"].astype(np.int64)


def encode_potentials(ids, values) -> bytes:
    rec = np.empty(len(ids), dtype=POTENTIAL_RECORD)
    rec["id"] = ids
    rec["value"] = values
    return rec.tobytes()


def decode_potentials(payload: bytes):
    rec = _records(payload, POTENTIAL_RECORD)
    return rec["id"].astype(np.int64), np.array(rec["value"])


def encode_u64(value: int) -> bytes:
    return np.array([value], dtype=U64).tobytes()


def decode_u64(payload: bytes) -> int:
    return int(_records(payload, U64)[0])
