"""Versioned, checksummed binary checkpoints.

Layout (all integers little-endian)::

    b"MABICKPT" | u32 version | u64 header length | header JSON
                | float64 payload, parameters in header order | sha256(previous bytes)

The header is canonical JSON (sorted keys, no whitespace), so saving what was
loaded reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import IncompatibleCheckpointError, IntegrityError
from .tensor import Tensor

MAGIC = b"MABICKPT"
VERSION = 1
_DIGEST = 32


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    step: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    names = list(ckpt.params)
    header = {
        "config": ckpt.config,
        "meta": ckpt.meta,
        "params": [[n, list(np.shape(ckpt.params[n]))] for n in names],
        "rng_state": ckpt.rng_state,
        "step": ckpt.step,
    }
    head = _canonical(header)
    payload = b"".join(np.ascontiguousarray(ckpt.params[n], dtype="<f8").tobytes() for n in names)
    body = MAGIC + struct.pack("<IQ", ckpt.version, len(head)) + head + payload
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes) -> Checkpoint:
    fixed = len(MAGIC) + 12
    if len(blob) < fixed + _DIGEST or blob[: len(MAGIC)] != MAGIC:
        raise IntegrityError("not a checkpoint file or truncated header")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint checksum mismatch (truncated or corrupt)")
    version, head_len = struct.unpack("<IQ", body[len(MAGIC) : fixed])
    if version != VERSION:
        raise IncompatibleCheckpointError(f"checkpoint format version {version}, expected {VERSION}")
    try:
        header = json.loads(body[fixed : fixed + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"unreadable checkpoint header: {e}") from None
    offset = fixed + head_len
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(body):
            raise IntegrityError(f"payload too short for parameter {name}")
        params[name] = np.frombuffer(body[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(body):
        raise IntegrityError("trailing bytes after checkpoint payload")
    return Checkpoint(params, header["config"], header["step"], header["rng_state"], header["meta"], version)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def snapshot(params: Mapping[str, Tensor], prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.data.copy() for k, v in params.items()}


def restore(params: Mapping[str, Tensor], arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
    """Copy ``arrays`` into the live parameter tensors in place."""
    for k, p in params.items():
        src = arrays[prefix + k]
        if src.shape != p.data.shape:
            raise IntegrityError(f"{prefix + k}: stored shape {src.shape} vs model {p.data.shape}")
        p.data[...] = src
