"""NVF1 checkpoint container.

Layout: ``b"NVF1"``, a little-endian u32 header length, a JSON header
``{format_version, config, metadata, tensors: {name: {shape, dtype, offset}}}``
and then the raw little-endian float32 payloads; offsets are relative to
the first payload byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import IntegrityError

MAGIC = b"NVF1"
FORMAT_VERSION = 1


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    index, offset, blobs = {}, 0, []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        index[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset}
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"format_version": FORMAT_VERSION, "config": config,
                         "metadata": metadata or {}, "tensors": index},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, tensors)``; tensors come back as float32 arrays."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise IntegrityError(f"{path}: not an NVF1 checkpoint")
    (n,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + n])
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: unreadable header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = raw[8 + n:]
    tensors = {}
    for name, info in header["tensors"].items():
        count = int(np.prod(info["shape"])) if info["shape"] else 1
        start, stop = info["offset"], info["offset"] + 4 * count
        if stop > len(payload):
            raise IntegrityError(f"{path}: tensor {name!r} runs past the end of the file")
        tensors[name] = np.frombuffer(payload[start:stop], dtype="<f4").reshape(info["shape"]).astype(np.float32)
    return header, tensors
