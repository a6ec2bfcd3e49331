"""Binary checkpoint format.

Layout, all integers little-endian u32 unless noted:

    magic "EQRL" | format version | manifest length | manifest (UTF-8 JSON)
    entry count
    per entry: name length | name (UTF-8) | dtype tag (u8) | rank | extents...
               | raw array bytes, little-endian, C order

The manifest carries whatever dict the caller passes (network builder name,
input shape, action count, and so on) so a checkpoint can be rebuilt without
outside knowledge.  Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"EQRL"
FORMAT_VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


def save_arrays(path, manifest: dict, arrays: dict):
    """Write named arrays plus a JSON manifest. Insertion order is preserved."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.dtype not in _TAG_FOR:
                raise ValueError(f"unsupported dtype {arr.dtype} for entry {name!r}")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", _TAG_FOR[arr.dtype]))
            f.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<I", ext))
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_arrays(path):
    """Read a checkpoint back as (manifest, {name: array})."""
    with open(path, "rb") as f:
        raw = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise ValueError(f"truncated checkpoint {path}")
        chunk = raw[off : off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<I", take(4))
    manifest = json.loads(take(mlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (tag,) = struct.unpack("<B", take(1))
        if tag not in _DTYPE_TAGS:
            raise ValueError(f"unknown dtype tag {tag} in {path}")
        dtype = _DTYPE_TAGS[tag]
        (rank,) = struct.unpack("<I", take(4))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(take(n * dtype.itemsize), dtype=dtype).reshape(shape)
        arrays[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if off != len(raw):
        raise ValueError(f"trailing bytes in checkpoint {path}")
    return manifest, arrays
