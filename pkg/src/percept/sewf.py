"""SEWF tensor container: the on-disk format for encoder and denoiser weights.

Layout (little-endian throughout):

    magic "SEWF" | u32 version=1 | u32 tensor_count
    per tensor: u16 name_len | name UTF-8 | u8 dtype (0=f32, 1=f64)
                | u8 rank | u32 dims[rank] | raw row-major data

Round-trips must be bit-exact, so tensors are written exactly as stored
(no dtype coercion) and read back with the same dtype.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"SEWF"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class SewfError(Exception):
    """Malformed or unreadable SEWF file."""


def save_tensors(path, tensors) -> None:
    """Write an ordered ``{name: array}`` mapping to *path*.

    Arrays must be float32 or float64; insertion order is preserved in the
    file so a re-save of a just-loaded file is byte-identical.
    """
    blobs = []
    seen = set()
    for name, arr in tensors.items():
        if name in seen:
            raise SewfError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:  # ascontiguousarray would promote 0-d to 1-d
            arr = arr.copy()
        if arr.dtype not in _DTYPE_CODES:
            raise SewfError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise SewfError(f"tensor name too long ({len(nb)} bytes)")
        head = struct.pack("<H", len(nb)) + nb
        head += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        head += struct.pack(f"<{arr.ndim}I", *arr.shape)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blobs.append(head + le.tobytes())
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(blobs)))
        for b in blobs:
            fh.write(b)


def load_tensors(path):
    """Read a SEWF file back into an ordered ``{name: array}`` dict."""
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise SewfError(f"truncated file: {what} at byte {off}")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise SewfError("bad magic (not a SEWF file)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise SewfError(f"unsupported version {version}")
    out = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"tensor {i} name length"))
        name = take(name_len, f"tensor {i} name").decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, f"tensor {name!r} dtype/rank"))
        if code not in _CODE_DTYPES:
            raise SewfError(f"tensor {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"tensor {name!r} dims"))
        dtype = _CODE_DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = take(n * dtype.itemsize, f"tensor {name!r} data")
        if name in out:
            raise SewfError(f"duplicate tensor name {name!r}")
        out[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    if off != len(data):
        raise SewfError(f"{len(data) - off} trailing bytes after last tensor")
    return out


# Config dicts ride along as a tensor of JSON byte values, since the format
# itself only knows f32/f64 payloads.

def config_to_tensor(config: dict) -> np.ndarray:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def tensor_to_config(arr: np.ndarray) -> dict:
    b = np.asarray(arr).astype(np.uint8).tobytes()
    try:
        return json.loads(b.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SewfError(f"config tensor does not decode to JSON: {exc}") from exc
