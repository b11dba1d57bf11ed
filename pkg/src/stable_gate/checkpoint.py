"""Versioned binary tensor container for model and adapter checkpoints.

Layout::

    b"SGTC"                 magic
    uint32 LE               format version
    uint64 LE               header length in bytes
    header (UTF-8 JSON)     {"format_version", "kind", "config", "metadata",
                             "tensors": [{"name", "shape", "offset", "dtype"}]}
    raw tensor bytes        little-endian float64, C order, at the listed offsets

Round trips are bit-exact for float64 values.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"SGTC"
FORMAT_VERSION = 1
_DTYPE = "<f8"


def save_tensors(path: str | Path, kind: str, config: Mapping[str, Any],
                 arrays: Mapping[str, np.ndarray], metadata: Mapping[str, Any] | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=_DTYPE)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "dtype": _DTYPE})
        blob = a.tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": dict(config),
        "metadata": dict(metadata or {}),
        "tensors": entries,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor container (bad magic)")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header.get('kind')!r}")
    base = 16 + hlen
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        buf = data[start:start + 8 * count]
        if len(buf) != 8 * count:
            raise CheckpointError(f"{path}: truncated tensor {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype=entry["dtype"]).reshape(shape).astype(np.float64)
    return header, arrays


def save_model(path: str | Path, params, metadata: Mapping[str, Any] | None = None) -> None:
    from .model import ModelParams

    assert isinstance(params, ModelParams)
    save_tensors(path, "model", params.config.to_json(), params.effective_arrays(), metadata)


def load_model(path: str | Path):
    from .model import ModelConfig, ModelParams

    header, arrays = load_tensors(path, kind="model")
    return ModelParams(ModelConfig.from_json(header["config"]), arrays)
