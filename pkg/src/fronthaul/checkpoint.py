"""Self-describing binary checkpoints.

Layout: 4-byte magic, little-endian uint32 format version, uint64 header
length, a UTF-8 JSON header (config echo, round index, array manifest
with names and shapes), then the arrays back to back as little-endian
float64 in manifest order. Loading a file written by this module gives
back bit-identical arrays; anything malformed, truncated, or from a
different format version is rejected outright.
"""
from __future__ import annotations

import json
import struct

import numpy as np

Array = np.ndarray

MAGIC = b"FHCK"
VERSION = 1
_FIXED = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    """Raised for unreadable or incompatible checkpoint files."""


def save_checkpoint(path, params: dict[str, Array], config_text: str,
                    round_index: int = 0) -> None:
    names = sorted(params)
    manifest = []
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"config_text": config_text, "round": int(round_index),
                         "arrays": manifest}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_FIXED.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, Array], str, int]:
    """Returns (params, config_text, round_index)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(raw) < _FIXED.size:
        raise CheckpointError(f"{path}: truncated before the fixed header")
    magic, version, header_len = _FIXED.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, this library reads version {VERSION}")
    header_end = _FIXED.size + header_len
    if len(raw) < header_end:
        raise CheckpointError(f"{path}: truncated inside the header")
    try:
        header = json.loads(raw[_FIXED.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    params: dict[str, Array] = {}
    offset = header_end
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if len(raw) < offset + nbytes:
            raise CheckpointError(f"{path}: truncated inside array {entry['name']!r}")
        params[entry["name"]] = np.frombuffer(
            raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return params, header["config_text"], int(header["round"])
