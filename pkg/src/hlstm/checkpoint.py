"""Versioned model checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic b"HLSTMCKP"
    u32       format version (currently 1)
    u64       header length in bytes
    header    UTF-8 JSON, keys sorted: {"spec": ..., "tensors": [{"name", "shape",
              "offset"}...], "meta": {...}}
    payload   float64 little-endian tensor data, row-major, in header order

The encoding is a pure function of the model and metadata, so save/load/save
round-trips are byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .network import Model, StackSpec

MAGIC = b"HLSTMCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(model: Model, meta: dict | None = None) -> bytes:
    tensors = []
    chunks = []
    offset = 0
    for name, arr in model.named_tensors().items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {"spec": model.spec.to_dict(), "tensors": tensors, "meta": meta or {}}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(raw)) + raw + b"".join(chunks)


def loads(blob: bytes) -> tuple[Model, dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 8 + 12
    header = json.loads(blob[start:start + hlen])
    payload = memoryview(blob)[start + hlen:]
    model = Model.zeros(StackSpec.from_dict(header["spec"]))
    live = model.named_tensors()
    seen = set()
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in live or live[name].shape != shape:
            raise CheckpointError(f"tensor {name} {shape} does not fit the stored spec")
        count = int(np.prod(shape))
        live[name][...] = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"]).reshape(shape)
        seen.add(name)
    if seen != set(live):
        raise CheckpointError(f"missing tensors: {sorted(set(live) - seen)}")
    return model, header["meta"]


def save_model(path, model: Model, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(model, meta))


def load_model(path) -> tuple[Model, dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())
