"""Checkpoint directories: manifest.json plus a named-tensor weight blob.

The blob (weights.bin) concatenates float32 little-endian tensors; the
manifest records the offset table, shapes, a CRC-32 of the blob, counters
(step, epoch), and arbitrary JSON metadata such as framework and model
configs. Writes go to temporary files replaced into place, so a reader
either sees the previous consistent checkpoint or the new one; a torn
window is caught by the checksum.
"""

from __future__ import annotations

import json
import os
import zlib
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write tensors and metadata to a checkpoint directory atomically."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    table = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        table[name] = {"shape": list(arr.shape), "offset": offset, "size": int(arr.size)}
        chunks.append(arr.tobytes())
        offset += arr.size * 4
    blob = b"".join(chunks)

    manifest = {
        "format_version": FORMAT_VERSION,
        "blob_bytes": len(blob),
        "blob_crc32": zlib.crc32(blob),
        "tensors": table,
        "meta": meta,
    }

    blob_tmp = out / "weights.bin.tmp"
    blob_tmp.write_bytes(blob)
    os.replace(blob_tmp, out / "weights.bin")
    manifest_tmp = out / "manifest.json.tmp"
    manifest_tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(manifest_tmp, out / "manifest.json")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint directory back; raises on corruption or version drift."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ValueError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")

    blob = (root / "weights.bin").read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise ValueError(f"weight blob is {len(blob)} bytes, manifest says "
                         f"{manifest['blob_bytes']}")
    if zlib.crc32(blob) != manifest["blob_crc32"]:
        raise ValueError("weight blob checksum mismatch")

    tensors = {}
    for name, entry in manifest["tensors"].items():
        start = entry["offset"]
        end = start + entry["size"] * 4
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(entry["shape"])
        tensors[name] = arr.copy()
    return tensors, manifest["meta"]
