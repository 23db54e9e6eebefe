"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"STPN1"                  magic
    u32 version               FORMAT_VERSION
    u32 header_len
    header_len bytes          UTF-8 JSON: config snapshot + tensor manifest
    u32 header_crc            CRC-32 of the header bytes
    payload                   concatenated float32 tensors, little-endian
    u32 payload_crc           CRC-32 of the payload

The manifest lists ``name``, ``shape`` and byte ``offset`` (relative to the
payload start) for every parameter and buffer in ``state_dict`` order.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .blocks import StpnetConfig, StpnetModel
from .errors import IntegrityError, InvalidArgumentError, VersionError

MAGIC = b"STPN1"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


def _manifest(state) -> Tuple[list, int]:
    entries, offset = [], 0
    for name, arr in state.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(arr.size) * 4
    return entries, offset


def checkpoint_bytes(model: StpnetModel, extra: Optional[Dict[str, Any]] = None) -> bytes:
    state = model.state_dict()
    manifest, _ = _manifest(state)
    header = json.dumps(
        {"config": model.cfg.to_dict(), "tensors": manifest, "extra": extra or {}},
        separators=(",", ":"),
    ).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in state.values())
    return b"".join((
        MAGIC,
        _U32.pack(FORMAT_VERSION),
        _U32.pack(len(header)),
        header,
        _U32.pack(zlib.crc32(header)),
        payload,
        _U32.pack(zlib.crc32(payload)),
    ))


def save_checkpoint(model: StpnetModel, path, extra: Optional[Dict[str, Any]] = None) -> None:
    """Write ``model`` to ``path`` atomically (temp file + rename)."""
    data = checkpoint_bytes(model, extra)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def parse_checkpoint(data: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Validate ``data`` and return ``(header, tensors)``."""
    if len(data) < len(MAGIC) + 12 or data[: len(MAGIC)] != MAGIC:
        raise IntegrityError("not an STPN checkpoint (bad magic)")
    pos = len(MAGIC)
    (version,) = _U32.unpack_from(data, pos)
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    (hlen,) = _U32.unpack_from(data, pos + 4)
    pos += 8
    if pos + hlen + 8 > len(data):
        raise IntegrityError("truncated checkpoint header")
    header_bytes = data[pos: pos + hlen]
    (hcrc,) = _U32.unpack_from(data, pos + hlen)
    if zlib.crc32(header_bytes) != hcrc:
        raise IntegrityError("header checksum mismatch")
    pos += hlen + 4
    payload = data[pos:-4]
    (pcrc,) = _U32.unpack_from(data, len(data) - 4)
    if zlib.crc32(payload) != pcrc:
        raise IntegrityError("payload checksum mismatch")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable header: {exc}") from exc
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        lo = entry["offset"]
        if lo + 4 * n > len(payload):
            raise IntegrityError(f"tensor {entry['name']} runs past the payload")
        tensors[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=n, offset=lo).reshape(shape)
    return header, tensors


def load_checkpoint(path) -> StpnetModel:
    """Rebuild the model recorded in ``path`` (eval mode, float32)."""
    return load_checkpoint_with_header(path)[0]


def load_checkpoint_with_header(path) -> Tuple[StpnetModel, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    header, tensors = parse_checkpoint(data)
    model = StpnetModel(StpnetConfig.from_dict(header["config"]))
    if len(tensors) != len(model.state_dict()):
        raise InvalidArgumentError(
            f"checkpoint has {len(tensors)} tensors, model expects {len(model.state_dict())}"
        )
    model.load_state_dict(tensors)
    model.eval()
    return model, header
