"""Shared pieces of the on-disk formats: error types and the header+blocks binary container."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np


class CorruptFileError(ValueError):
    """An artifact file is truncated or structurally invalid."""


class VersionError(ValueError):
    """An artifact file was written by an unsupported format version."""


_LEN = struct.Struct("<I")


def write_blocks(path: Union[str, Path], magic: bytes, version: int, meta: dict,
                 blocks: Dict[str, np.ndarray], dtype: str = "<f4") -> None:
    """Write ``magic``, a length-prefixed JSON header, then raw little-endian blocks.

    The header lists every block's name, shape and dtype in file order.
    """
    layout = []
    payload = []
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(arr, dtype=dtype)
        layout.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        payload.append(arr.tobytes())
    header = json.dumps({"version": version, "meta": meta, "blocks": layout}).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(_LEN.pack(len(header)))
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)


def read_blocks(path: Union[str, Path], magic: bytes, version: int) -> Tuple[dict, Dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(magic):
        raise CorruptFileError(f"{path}: not a {magic.decode()} file")
    pos = len(magic)
    if len(data) < pos + _LEN.size:
        raise CorruptFileError(f"{path}: truncated header")
    (hlen,) = _LEN.unpack_from(data, pos)
    pos += _LEN.size
    try:
        header = json.loads(data[pos:pos + hlen])
    except ValueError:
        raise CorruptFileError(f"{path}: unreadable header") from None
    pos += hlen
    found = header.get("version")
    if found != version:
        raise VersionError(f"{path}: format version {found}, this build reads version {version}")
    blocks = {}
    for entry in header["blocks"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if pos + nbytes > len(data):
            raise CorruptFileError(f"{path}: block {entry['name']!r} truncated")
        blocks[entry["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(entry["shape"]).copy()
        pos += nbytes
    if pos != len(data):
        raise CorruptFileError(f"{path}: {len(data) - pos} trailing bytes")
    return header["meta"], blocks
