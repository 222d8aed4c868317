"""Binary checkpoint files.

Layout: the magic bytes ``PHCK1\\n``, an 8-byte little-endian header
length, a UTF-8 JSON header, then the raw little-endian tensor payloads
back to back.  The header carries the format version, the model config and
a tensor index mapping each dotted name to dtype, shape, byte offset and
byte length.  Serialization is canonical (sorted names, compact JSON), so
save -> load -> save reproduces files bit for bit.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"PHCK1\n"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save(path, state: dict[str, np.ndarray], model_config: dict) -> None:
    index = {}
    payloads = []
    offset = 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        if arr.dtype == np.float32:
            dtype = "float32"
        elif arr.dtype == np.float64:
            dtype = "float64"
        else:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = arr.astype(_DTYPES[dtype], copy=False).tobytes()
        index[name] = {
            "dtype": dtype,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "format-version": FORMAT_VERSION,
            "model-config": model_config,
            "tensors": index,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: malformed header: {exc}") from exc
        if header.get("format-version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {header.get('format-version')}"
            )
        payload = fh.read()
    state = {}
    for name, meta in header["tensors"].items():
        if meta["dtype"] not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} bad dtype {meta['dtype']}")
        raw = payload[meta["offset"] : meta["offset"] + meta["nbytes"]]
        if len(raw) != meta["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for tensor {name!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[meta["dtype"]])
        expected = int(np.prod(meta["shape"], dtype=np.int64)) if meta["shape"] else 1
        if arr.size != expected:
            raise CheckpointError(
                f"{path}: tensor {name!r} size {arr.size} != shape {meta['shape']}"
            )
        state[name] = arr.reshape(meta["shape"]).astype(arr.dtype.newbyteorder("="))
    return state, header["model-config"]
