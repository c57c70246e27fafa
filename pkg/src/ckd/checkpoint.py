"""Parameter checkpoint container.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"CKDPARAM"
    8       4     format version (uint32, currently 1)
    12      8     header length H (uint64)
    20      H     UTF-8 JSON header
    20+H    ...   tensor data, concatenated in header order

The JSON header is ``{"config": {...ModelConfig fields...}, "meta": {...},
"tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}`` where
``offset`` counts from the start of the data section. Tensors are stored in
C order with the little-endian dtype named in the header (``"<f8"`` for the
default float64 parameters), so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import Encoder, ModelConfig

MAGIC = b"CKDPARAM"
VERSION = 1


def save_params(path, config: ModelConfig, params: dict, meta: dict | None = None) -> None:
    table, blobs, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes(order="C")
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config.to_dict(), "meta": meta or {}, "tensors": table},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_params(path):
    """Returns ``(config, params, meta)``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    header = json.loads(data[20:20 + hlen].decode("utf-8"))
    base = 20 + hlen
    params = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        buf = data[start:start + t["nbytes"]]
        params[t["name"]] = np.frombuffer(buf, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
    return ModelConfig.from_dict(header["config"]), params, header.get("meta", {})


def save_model(path, model: Encoder, meta: dict | None = None) -> None:
    save_params(path, model.config, model.params, meta)


def load_model(path) -> Encoder:
    config, params, _ = load_params(path)
    return Encoder(config, params)


def fingerprint(params: dict) -> str:
    """SHA-256 over parameter names, shapes and little-endian bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return h.hexdigest()
