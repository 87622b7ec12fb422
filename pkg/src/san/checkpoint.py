"""Tensor checkpoints: a JSON manifest next to a little-endian float64 blob.

``<stem>.json`` maps each tensor name to its shape, dtype and byte offset in
``<stem>.bin``.  Arbitrary JSON metadata (config, vocab, gate layouts) rides
along in the manifest under ``meta``.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT = "san-checkpoint/1"
_LE_F64 = np.dtype("<f8")


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_arrays(stem, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> Path:
    """Write ``arrays`` in insertion order; returns the manifest path."""
    manifest_path, blob_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype=_LE_F64).tobytes()
            entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "float64",
                            "offset": offset, "nbytes": len(raw)})
            fh.write(raw)
            offset += len(raw)
    manifest = {"format": FORMAT, "byte_order": "little", "blob": blob_path.name,
                "tensors": entries, "meta": dict(meta or {})}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


def load_arrays(stem) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    manifest_path, _ = _paths(stem)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{manifest_path}: unknown checkpoint format {manifest.get('format')!r}")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    arrays = {}
    for e in manifest["tensors"]:
        chunk = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype=_LE_F64).astype(np.float64)
        arrays[e["name"]] = arr.reshape(e["shape"])
    return arrays, manifest["meta"]
