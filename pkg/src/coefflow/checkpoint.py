"""Versioned binary container shared by every trained artifact.

Layout: 8-byte magic, uint32 version, uint64 header length, a UTF-8 JSON
header ``{"schema": [...], "metadata": {...}}`` and the payload as 64-bit
little-endian floats in schema order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"COEFFLOW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def entry_size(entry: dict) -> int:
    kind, shape = entry["kind"], tuple(entry["shape"])
    if kind == "linear":
        d_out, d_in = shape
        return d_out * (d_in + 1)
    if kind == "norm_affine":
        return 2 * shape[0]
    return int(np.prod(shape))


@dataclass
class Checkpoint:
    schema: list
    payload: np.ndarray
    metadata: dict = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        """Split the payload into one flat array per schema entry."""
        out, off = {}, 0
        for e in self.schema:
            n = entry_size(e)
            out[e["name"]] = self.payload[off:off + n]
            off += n
        return out


def save_checkpoint(path, schema, payload, metadata=None) -> Path:
    path = Path(path)
    payload = np.ascontiguousarray(payload, dtype="<f8").ravel()
    schema = [{"name": e["name"], "kind": e["kind"], "shape": [int(s) for s in e["shape"]]} for e in schema]
    expected = sum(entry_size(e) for e in schema)
    if expected != payload.size:
        raise CheckpointError(f"payload has {payload.size} values, schema needs {expected}")
    header = json.dumps({"schema": schema, "metadata": metadata or {}}, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        fh.write(payload.tobytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen].decode())
    payload = np.frombuffer(raw[20 + hlen:], dtype="<f8").astype(np.float64)
    schema = header["schema"]
    if sum(entry_size(e) for e in schema) != payload.size:
        raise CheckpointError(f"{path}: payload length does not match schema")
    return Checkpoint(schema, payload, header["metadata"])


def store_schema(store, kind: str = "tensor") -> list[dict]:
    return [{"name": k, "kind": kind, "shape": list(t.data.shape)} for k, t in store.items()]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
