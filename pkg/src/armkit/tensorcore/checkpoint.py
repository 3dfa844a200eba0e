"""Versioned binary checkpoint files with bit-exact round trips.

Layout: 8-byte magic, u32 format version, u64 header length, UTF-8 JSON
header, then the concatenated parameter payloads (64-bit little-endian).
The checkpoint id is a content hash over payload and metadata, so equal
checkpoints get equal ids.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import StorageError, ValidationError
from .tensor import Tensor

MAGIC = b"ARMKCKPT"
FORMAT_VERSION = 1


def _payload(params: dict[str, np.ndarray]) -> tuple[bytes, list[dict]]:
    blobs = []
    entries = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": "<f8", "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    return b"".join(blobs), entries


def checkpoint_id(payload: bytes, meta: dict, entries: list[dict]) -> str:
    h = hashlib.sha256()
    h.update(payload)
    h.update(json.dumps({"meta": meta, "params": entries},
                        sort_keys=True).encode("utf-8"))
    return h.hexdigest()[:12]


def save_checkpoint(path: str | Path,
                    params: dict[str, np.ndarray | Tensor],
                    meta: dict | None = None) -> str:
    """Write params + metadata; returns the checkpoint id."""
    arrays = {k: (v.data if isinstance(v, Tensor) else np.asarray(v))
              for k, v in params.items()}
    meta = meta or {}
    payload, entries = _payload(arrays)
    ckpt_id = checkpoint_id(payload, meta, entries)
    header = json.dumps({"format_version": FORMAT_VERSION,
                         "checkpoint_id": ckpt_id,
                         "meta": meta,
                         "params": entries},
                        sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", FORMAT_VERSION))
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise StorageError(f"failed to write checkpoint {path}: {exc}")
    return ckpt_id


def load_checkpoint_file(path: str | Path
                         ) -> tuple[dict[str, np.ndarray], dict, str]:
    """Read a checkpoint; returns (params, meta, checkpoint_id)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"failed to read checkpoint {path}: {exc}")
    if raw[:8] != MAGIC:
        raise ValidationError(f"{path} is not a checkpoint file")
    version, = struct.unpack("<I", raw[8:12])
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    header_len, = struct.unpack("<Q", raw[12:20])
    header = json.loads(raw[20:20 + header_len].decode("utf-8"))
    payload = raw[20 + header_len:]
    params = {}
    for entry in header["params"]:
        blob = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(blob, dtype=entry["dtype"]).reshape(entry["shape"])
        params[entry["name"]] = arr.copy()
    return params, header.get("meta", {}), header["checkpoint_id"]
