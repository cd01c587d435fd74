"""EWF1 snapshot files: magic, length-prefixed JSON header, little-endian float64 samples."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .grid_spectral import RANK_COMPONENTS, Field, Grid3

MAGIC = b"EWFIELD1"


def write_ewf(path: str | Path, data: np.ndarray, box_len: float, rank: str, time: float) -> None:
    """Write samples of shape (components, n, n, n).

    ``rank`` is a field rank or ``"state"`` for a stacked (U, V) pair.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 4 or not (data.shape[1] == data.shape[2] == data.shape[3]):
        raise ValueError("data must have shape (components, n, n, n)")
    header = {
        "box_len": float(box_len),
        "components": int(data.shape[0]),
        "n": int(data.shape[1]),
        "rank": rank,
        "time": float(time),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(data).astype("<f8").tobytes())


def read_ewf(path: str | Path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not an EWF1 file")
    (length,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + length].decode("utf-8"))
    n, comps = int(header["n"]), int(header["components"])
    body = raw[16 + length :]
    expected = comps * n**3 * 8
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} data bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(comps, n, n, n)
    return header, data


def write_field(path: str | Path, f: Field, time: float = 0.0) -> None:
    write_ewf(path, f.data, f.grid.box_len, f.rank, time)


def read_field(path: str | Path) -> tuple[Field, float]:
    header, data = read_ewf(path)
    rank = header["rank"]
    if rank not in RANK_COMPONENTS:
        raise ValueError(f"{path}: rank {rank!r} is not a single field")
    return Field(Grid3(header["n"], header["box_len"]), rank, data), float(header["time"])
