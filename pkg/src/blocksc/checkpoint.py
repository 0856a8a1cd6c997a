"""Single-file checkpoint container ("DQC1").

Layout: 8-byte magic, one UTF-8 JSON index line mapping entry names to
{shape, dtype, offset}, then the raw little-endian payloads.  Entries are
laid out in sorted name order so save -> load -> save is byte-identical.
Strings (metadata) are stored as u8 payloads.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC_DQC1 = b"DQC1\x00\x00\x00\x00"

_DTYPES = {"f64": "<f8", "f32": "<f4", "i64": "<i8", "u8": "|u1"}
_CODES = {np.dtype(np.float64): "f64", np.dtype(np.float32): "f32",
          np.dtype(np.int64): "i64", np.dtype(np.uint8): "u8"}


def pack_str(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def unpack_str(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")


def save_checkpoint(path, entries: dict) -> None:
    """Write named arrays; names are sorted for deterministic bytes."""
    index = {}
    payloads = []
    offset = 0
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name])
        if arr.dtype not in _CODES:
            arr = np.ascontiguousarray(arr, dtype=np.float64)
        code = _CODES[arr.dtype]
        raw = arr.astype(_DTYPES[code], copy=False).tobytes()
        index[name] = {"shape": list(arr.shape), "dtype": code,
                       "offset": offset}
        payloads.append(raw)
        offset += len(raw)
    with open(path, "wb") as fh:
        fh.write(MAGIC_DQC1)
        fh.write(json.dumps(index, sort_keys=True,
                            separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC_DQC1:
            raise ValueError(f"{path}: not a DQC1 checkpoint")
        header = bytearray()
        while True:
            ch = fh.read(1)
            if not ch:
                raise ValueError(f"{path}: truncated index")
            if ch == b"\n":
                break
            header.extend(ch)
        index = json.loads(header.decode("utf-8"))
        payload = fh.read()
    entries = {}
    for name, spec in index.items():
        dt = np.dtype(_DTYPES[spec["dtype"]])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        start = spec["offset"]
        raw = payload[start:start + count * dt.itemsize]
        arr = np.frombuffer(raw, dtype=dt, count=count).reshape(spec["shape"])
        entries[name] = arr.copy()
    return entries
