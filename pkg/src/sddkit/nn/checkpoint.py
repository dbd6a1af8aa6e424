"""Checkpoint file: header, JSON manifest, little-endian float32 payload.

Layout::

    b"SDDKIT1\n"
    uint64 LE  manifest length in bytes
    manifest   UTF-8 JSON {"tensors": {name: {"shape", "dtype", "offset"}}, "meta": {...}}
    payload    concatenated tensors, float32 little-endian, C order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SDDKIT1\n"
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = {}, [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset}
        blobs.append(data)
        offset += len(data)
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad header)")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    manifest = json.loads(raw[pos : pos + n].decode("utf-8"))
    payload = memoryview(raw)[pos + n :]
    tensors = {}
    for name, entry in manifest["tensors"].items():
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=entry["offset"])
        tensors[name] = arr.reshape(entry["shape"]).astype(np.float32)
    return tensors, manifest.get("meta", {})
