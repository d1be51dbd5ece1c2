"""Single-file checkpoint: length-prefixed JSON header + flat tensor bytes.

Layout: 8-byte little-endian uint64 header length, then UTF-8 JSON
(version, config, vocab, tensor names/shapes/offsets, metadata), then the
tensors as contiguous little-endian float64, in header order.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict
from typing import Optional, Tuple

import numpy as np

from ..errors import InvalidArgumentError
from .config import config_from_dict
from .network import Model, build_model
from .vocab import Vocab

FORMAT_VERSION = 1


def save_checkpoint(path, model: Model, meta: Optional[dict] = None) -> None:
    tensors = []
    blobs = []
    offset = 0
    for name, t in model.params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(t.data.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": FORMAT_VERSION,
        "config": asdict(model.cfg),
        "vocab": list(model.vocab.tokens),
        "tensors": tensors,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def _read_raw(path) -> Tuple[dict, bytes]:
    with open(path, "rb") as f:
        size = os.fstat(f.fileno()).st_size
        prefix = f.read(8)
        if len(prefix) != 8:
            raise InvalidArgumentError(f"{path}: truncated checkpoint")
        (n,) = struct.unpack("<Q", prefix)
        if n > size - 8:
            raise InvalidArgumentError(
                f"{path}: header length {n} exceeds file size (corrupt?)"
            )
        head = f.read(n)
        if len(head) != n:
            raise InvalidArgumentError(f"{path}: truncated header")
        data = f.read()
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise InvalidArgumentError(f"{path}: bad header: {e}") from e
    if header.get("version") != FORMAT_VERSION:
        raise InvalidArgumentError(
            f"{path}: unsupported checkpoint version {header.get('version')}"
        )
    return header, data


def read_header(path) -> dict:
    header, _ = _read_raw(path)
    return header


def load_checkpoint(path) -> Tuple[Model, dict]:
    header, data = _read_raw(path)
    cfg = config_from_dict(header["config"])
    vocab = Vocab(tuple(header["vocab"]))
    model = build_model(cfg, vocab)
    listed = {t["name"]: t for t in header["tensors"]}
    if set(listed) != set(model.params):
        missing = sorted(set(model.params) - set(listed))
        extra = sorted(set(listed) - set(model.params))
        raise InvalidArgumentError(
            f"{path}: tensor set mismatch (missing {missing}, extra {extra})"
        )
    for name, t in model.params.items():
        info = listed[name]
        shape = tuple(info["shape"])
        if shape != t.data.shape:
            raise InvalidArgumentError(
                f"{path}: tensor {name} has shape {shape}, model expects {t.data.shape}"
            )
        count = int(np.prod(shape)) if shape else 1
        start = int(info["offset"])
        if start < 0 or start + count * 8 > len(data):
            raise InvalidArgumentError(
                f"{path}: tensor {name} extends past end of file (truncated?)"
            )
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start)
        t.data = arr.reshape(shape).astype(np.float64)
    return model, header["meta"]
