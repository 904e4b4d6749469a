"""Single-file tensor container shared by teacher, prompt and student checkpoints.

Layout::

    b"DIPTCKPT"            8-byte magic
    uint32 (LE)            header length in bytes
    header                 UTF-8 JSON
    payload                concatenated little-endian float32 blobs

The header carries a ``tensors`` table mapping each name to its byte offset
(relative to the payload start), shape and dtype, plus a sha256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"DIPTCKPT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Raised for corrupt, truncated, or incompatible checkpoint files."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{message} (field: {field})")
        self.field = field


def write_container(path: str | Path, header: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    table = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
        raw = arr.tobytes()
        table[name] = {"offset": offset, "shape": list(arr.shape), "dtype": "<f4"}
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    full = dict(header)
    full.setdefault("format_version", FORMAT_VERSION)
    full["tensors"] = table
    full["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    encoded = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(payload)


def read_container(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint container", field="magic")
    (hlen,) = struct.unpack("<I", data[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(data) < start + hlen:
        raise CheckpointError(f"{path} is truncated inside the header", field="header")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}", field="header") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version!r}, expected {FORMAT_VERSION}", field="format_version"
        )
    payload = data[start + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path} payload is truncated or corrupt", field="payload_sha256")
    tensors = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = entry["offset"] + 4 * count
        if end > len(payload):
            raise CheckpointError(f"tensor {name!r} runs past end of payload", field=name)
        tensors[name] = np.frombuffer(payload[entry["offset"] : end], dtype="<f4").reshape(shape).copy()
    return header, tensors


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
