"""Checkpoint files.

Byte layout::

    offset 0   8 bytes   magic b"TCTSCKPT"
    offset 8   8 bytes   header length H, unsigned little-endian
    offset 16  H bytes   UTF-8 JSON header, keys sorted, no whitespace
    offset 16+H          payload: every tensor listed in header["tensors"],
                         in that order, as little-endian float64, row-major

The header records the model dimensions, the mode, the config hash and the
caption vocabulary and visual inventory the weights were trained against.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import IncompatibleCheckpoint
from .model import ModelParams

MAGIC = b"TCTSCKPT"
FORMAT = "tcts-checkpoint-1"


def vocab_hash(vocab_tokens, inventory_tokens) -> str:
    blob = json.dumps([list(vocab_tokens), list(inventory_tokens)]).encode()
    return hashlib.sha256(blob).hexdigest()


def to_bytes(params: ModelParams, meta: dict | None = None) -> bytes:
    params.validate()
    header = dict(meta or {})
    header.update(
        format=FORMAT,
        hidden=params.hidden,
        vocab_size=params.vocab_size,
        visual_size=params.visual_size,
        max_objects=params.max_objects,
        uses_attributes=params.uses_attributes,
        tensors=[[name, list(params.weights[name].shape)] for name in params.names()],
    )
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(
        np.ascontiguousarray(params.weights[name], dtype="<f8").tobytes()
        for name in params.names()
    )
    return MAGIC + struct.pack("<Q", len(head)) + head + payload


def from_bytes(blob: bytes) -> tuple[ModelParams, dict]:
    if blob[:8] != MAGIC:
        raise IncompatibleCheckpoint("not a checkpoint file (bad magic)")
    (size,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + size].decode())
    if header.get("format") != FORMAT:
        raise IncompatibleCheckpoint(f"unknown checkpoint format {header.get('format')!r}")
    params = ModelParams(header["hidden"], header["vocab_size"], header["visual_size"],
                         header["max_objects"], header["uses_attributes"])
    offset = 16 + size
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        params.weights[name] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(blob):
        raise IncompatibleCheckpoint("trailing bytes after payload")
    params.validate()
    return params, header


def save(path, params: ModelParams, meta: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(params, meta))


def load(path) -> tuple[ModelParams, dict]:
    return from_bytes(Path(path).read_bytes())
