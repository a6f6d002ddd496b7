"""Versioned, self-describing checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"FLATCKPT"
    4 bytes   uint32 header length L
    L bytes   UTF-8 JSON header (sorted keys)
    ...       payload: tensors back to back, offsets relative to payload start

The header carries ``format_version``, the config blobs, scalar training
state, a CRC-32 of the payload and a tensor index of
``{name, dtype, shape, offset, nbytes}``. Model parameters are stored as
``<f4``, optimizer moments as ``<f8``, generator state as ``|u1``.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"FLATCKPT"
FORMAT_VERSION = 1


def write_container(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    index, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        index.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = dict(meta)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = index
    header["payload_crc32"] = zlib.crc32(payload)
    header["payload_nbytes"] = len(payload)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 12 or data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic or truncated)")
    (hlen,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + hlen:
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format_version {version} not supported (expected {FORMAT_VERSION})")
    payload = data[12 + hlen :]
    if len(payload) != header.get("payload_nbytes"):
        raise CheckpointError(
            f"{path} is truncated: payload has {len(payload)} bytes, header expects {header.get('payload_nbytes')}"
        )
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    tensors = {}
    for entry in header.pop("tensors"):
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        tensors[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    for key in ("payload_crc32", "payload_nbytes", "format_version"):
        header.pop(key, None)
    return header, tensors
