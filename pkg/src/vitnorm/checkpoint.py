"""Byte-stable checkpoint archive.

Layout::

    b"VITNCKPT"                      8-byte magic
    uint32 LE   format version
    uint32 LE   header length H
    H bytes     UTF-8 JSON header (sorted keys): model config, extra metadata,
                and one entry per tensor {path, dtype, shape, offset, nbytes}
    payload     concatenated little-endian raw tensor bytes

No timestamps or other ambient state enter the file, so identical parameters
produce identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

from .model import ModelConfig, ParamTree
from .tensor import Tensor

MAGIC = b"VITNCKPT"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write to a temp file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(cfg: ModelConfig, params: ParamTree, meta: dict[str, Any] | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for path, t in params.items():
        name = t.dtype.name
        if name not in _DTYPES:
            raise CheckpointError(f"{path}: unsupported dtype {name}")
        raw = np.ascontiguousarray(t.data, dtype=_DTYPES[name]).tobytes()
        entries.append({"path": path, "dtype": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "model": cfg.to_dict(), "meta": meta or {}, "tensors": entries}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(blob)) + blob + b"".join(chunks)


def loads(raw: bytes) -> tuple[ModelConfig, ParamTree, dict[str, Any]]:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(raw) < 16:
        raise CheckpointError("checkpoint truncated in preamble")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(raw) < 16 + hlen:
        raise CheckpointError("checkpoint truncated in header")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    payload = memoryview(raw)[16 + hlen :]
    params: ParamTree = {}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{e['path']}: payload truncated")
        arr = np.frombuffer(payload[e["offset"] : end], dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        params[e["path"]] = Tensor(arr.astype(e["dtype"]), requires_grad=True)
    return ModelConfig.from_dict(header["model"]), params, header.get("meta", {})


def save_checkpoint(path, cfg: ModelConfig, params: ParamTree, meta: dict[str, Any] | None = None) -> None:
    atomic_write(path, dumps(cfg, params, meta))


def load_checkpoint(path) -> tuple[ModelConfig, ParamTree, dict[str, Any]]:
    return loads(Path(path).read_bytes())
