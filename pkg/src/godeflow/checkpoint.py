"""Parameter checkpoints: a JSON manifest plus a flat little-endian blob.

The manifest records the magic marker, arbitrary metadata, and for every
array its name, shape and byte offset into ``params.bin``.  Arrays are stored
as raw little-endian float64, so a save/load round trip is bit exact.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import CheckpointError

MAGIC = "godeflow-checkpoint-v1"
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


def save_checkpoint(directory, arrays: dict, metadata: dict | None = None) -> None:
    """Write ``arrays`` (name -> float64 ndarray) and ``metadata`` to ``directory``."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, array in arrays.items():
        array = np.ascontiguousarray(array, dtype=np.float64)
        raw = array.astype("<f8", copy=False).tobytes()
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "magic": MAGIC,
        "metadata": metadata or {},
        "params": entries,
        "blob_bytes": offset,
    }
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, BLOB_NAME), "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(directory) -> tuple[dict, dict]:
    """Read a checkpoint directory back into ``(arrays, metadata)``."""
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    blob_path = os.path.join(directory, BLOB_NAME)
    if not os.path.exists(manifest_path):
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    try:
        with open(manifest_path, "r", encoding="ascii") as fh:
            manifest = json.load(fh)
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from exc
    if manifest.get("magic") != MAGIC:
        raise CheckpointError(
            f"bad checkpoint magic {manifest.get('magic')!r} (expected {MAGIC!r})"
        )
    if not os.path.exists(blob_path):
        raise CheckpointError(f"checkpoint blob missing at {blob_path}")
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    if len(blob) != manifest.get("blob_bytes"):
        raise CheckpointError(
            f"checkpoint blob has {len(blob)} bytes, manifest says "
            f"{manifest.get('blob_bytes')}"
        )
    arrays = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        stop = start + count * 8
        if stop > len(blob):
            raise CheckpointError(f"entry {entry['name']!r} overruns the blob")
        flat = np.frombuffer(blob[start:stop], dtype="<f8")
        arrays[entry["name"]] = flat.reshape(shape).copy()
    return arrays, manifest.get("metadata", {})
