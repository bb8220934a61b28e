"""Binary checkpoint format.

Layout (little-endian)::

    b"SPBMCKPT" | u32 version | u32 n_entries | u32 manifest_len | manifest JSON
    n_entries x (u16 name_len | name | u8 dtype | u8 ndim | u32 dims[ndim] | u64 offset | u64 nbytes)
    payload (offsets relative to payload start)

dtype 0 is float32, 1 is int32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import HeaderMismatch, IoFailure, ShapeMismatch

MAGIC = b"SPBMCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}


def _code(arr: np.ndarray) -> int:
    return 1 if np.issubdtype(arr.dtype, np.integer) else 0


def write_checkpoint(path, tensors: dict, manifest: dict) -> None:
    arrays = {}
    for name, t in tensors.items():
        a = t.detach().cpu().numpy() if hasattr(t, "detach") else np.asarray(t)
        arrays[name] = np.array(a, dtype=_DTYPES[_code(a)], order="C")
    meta = json.dumps(manifest, sort_keys=True).encode()
    head = [MAGIC, struct.pack("<III", VERSION, len(arrays), len(meta)), meta]
    offset = 0
    for name, a in arrays.items():
        enc = name.encode()
        head.append(struct.pack("<H", len(enc)) + enc)
        head.append(struct.pack("<BB", _code(a), a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        head.append(struct.pack("<QQ", offset, a.nbytes))
        offset += a.nbytes
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(b"".join(head))
            for a in arrays.values():
                f.write(a.tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if blob[:8] != MAGIC:
        raise HeaderMismatch(f"{path}: not a checkpoint")
    version, n, mlen = struct.unpack_from("<III", blob, 8)
    if version != VERSION:
        raise HeaderMismatch(f"{path}: unsupported version {version}")
    pos = 20
    manifest = json.loads(blob[pos:pos + mlen])
    pos += mlen
    table = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + ln].decode()
        pos += ln
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        off, nbytes = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        table.append((name, code, shape, off, nbytes))
    arrays = {}
    for name, code, shape, off, nbytes in table:
        dt = _DTYPES[code]
        if nbytes != int(np.prod(shape)) * dt.itemsize or pos + off + nbytes > len(blob):
            raise ShapeMismatch(f"{path}: entry {name!r} has an inconsistent payload")
        arrays[name] = np.frombuffer(blob, dtype=dt, count=int(np.prod(shape)),
                                     offset=pos + off).reshape(shape).copy()
    return arrays, manifest
