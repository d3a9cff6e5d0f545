"""Binary container for datasets and checkpoints.

Layout: 8 magic bytes, a little-endian uint64 giving the header length, a
UTF-8 JSON header, then the arrays as raw little-endian float64 in the
order listed under the header's ``arrays`` key (name and shape for each).
Everything else in the header is free-form metadata.
"""

import json
import os
import struct

import numpy as np

from .errors import DatasetError

MAGIC = b"HOROM\x00\x01\n"


def write_container(path, header, arrays):
    """Write ``arrays`` (a name -> array mapping, order preserved)."""
    manifest = []
    blobs = []
    for name, arr in arrays.items():
        a = np.array(arr, dtype="<f8", order="C")  # ascontiguousarray would turn 0-d into (1,)
        manifest.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    head = dict(header)
    head["arrays"] = manifest
    raw = json.dumps(head, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_container(path):
    """Return ``(header, arrays)``; raises DatasetError on malformed files."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if data[:8] != MAGIC:
        raise DatasetError(f"{path} is not a container file (bad magic)")
    try:
        (n,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16:16 + n].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{path}: corrupt header") from exc
    offset = 16 + n
    arrays = {}
    for entry in header.get("arrays", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise DatasetError(f"{path}: truncated array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(data):
        raise DatasetError(f"{path}: {len(data) - offset} trailing bytes")
    return header, arrays
