"""Single-file checkpoints: an 8-byte length, a JSON manifest, then raw arrays.

Arrays are stored as little-endian float32 in manifest order. The manifest
records names and shapes plus any JSON-serialisable metadata.
"""

from __future__ import annotations

import json
import struct

import numpy as np

FORMAT_VERSION = 1


def save(path, arrays: dict, meta: dict | None = None):
    names = list(arrays)
    manifest = {
        "version": FORMAT_VERSION,
        "meta": meta or {},
        "arrays": [{"name": n, "shape": list(np.shape(arrays[n]))} for n in names],
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for n in names:
            f.write(np.ascontiguousarray(arrays[n], dtype="<f4").tobytes())


def load(path):
    """Returns (arrays dict in manifest order, meta dict)."""
    with open(path, "rb") as f:
        (n,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(n))
        if manifest.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
        arrays = {}
        for spec in manifest["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError(f"truncated checkpoint at {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)
    return arrays, manifest["meta"]
