"""Model checkpoint files.

Layout::

    b"CPLCKPT\\x01"            8-byte magic, last byte is the format version
    u32 little-endian          length of the JSON header in bytes
    JSON header (utf-8)        {"kind", "config", "params": [{"name", "shape"}, ...]}
    f32 little-endian blocks   one per parameter, in header order, C-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CPLCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind: str, config: dict, params: dict) -> None:
    header = {
        "kind": kind,
        "config": config,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + bytes([VERSION]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path, kind: str | None = None) -> tuple[dict, dict]:
    """Return ``(config, params)`` where params maps name to a float32 array."""
    raw = Path(path).read_bytes()
    if raw[:7] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if raw[7] != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {raw[7]}")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    try:
        header = json.loads(raw[12:12 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header.get('kind')}")
    offset = 12 + hlen
    params = {}
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated parameter block {spec['name']}")
        params[spec["name"]] = np.frombuffer(raw, dtype="<f4", count=n, offset=offset) \
            .reshape(shape).astype(np.float32)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return header["config"], params
