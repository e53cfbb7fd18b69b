"""Tensor persistence: a JSON manifest plus one little-endian f32 blob.

The manifest lists every tensor's name, shape, dtype tag, and byte offset
into the companion blob file; tensors are stored row-major.  The writer is
canonical -- tensors sorted by name, manifest keys in fixed order -- so
saving the same tensors twice produces byte-identical files, and a
load/save round trip is exact (values are parked as f32 on disk).
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

FORMAT_TAG = "tensor-manifest-v1"
DTYPE_TAG = "f32"
_DTYPE = np.dtype("<f4")


def write_file_atomic(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(manifest_path, tensors: dict[str, np.ndarray], extra: dict | None = None) -> Path:
    """Save named tensors; the blob lands next to the manifest (.bin suffix).

    Returns the blob path.  `extra` entries are embedded in the manifest
    under "meta" (must be JSON-serializable).
    """
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype=_DTYPE)
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": DTYPE_TAG,
                "offset": offset,
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT_TAG,
        "blob": blob_path.name,
        "blob_size": offset,
        "tensors": entries,
    }
    if extra:
        manifest["meta"] = extra
    write_file_atomic(blob_path, b"".join(chunks))
    write_file_atomic(
        manifest_path, (json.dumps(manifest, indent=2) + "\n").encode("utf-8")
    )
    return blob_path


def load_tensors(manifest_path) -> tuple[dict[str, np.ndarray], dict]:
    """Load tensors and the manifest "meta" dict."""
    manifest_path = Path(manifest_path)
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT_TAG:
        raise ValueError(f"unrecognized manifest format {manifest.get('format')!r}")
    blob_path = manifest_path.parent / manifest["blob"]
    blob = blob_path.read_bytes()
    if len(blob) != manifest["blob_size"]:
        raise ValueError(
            f"blob size {len(blob)} does not match manifest ({manifest['blob_size']})"
        )
    tensors = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != DTYPE_TAG:
            raise ValueError(f"unsupported dtype {entry['dtype']!r} for {entry['name']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            blob, dtype=_DTYPE, count=count, offset=entry["offset"]
        ).reshape(shape)
        tensors[entry["name"]] = arr.copy()
    return tensors, manifest.get("meta", {})
