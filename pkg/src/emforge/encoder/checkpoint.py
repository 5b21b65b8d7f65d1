"""EMC1 checkpoint files: named EMT1 tensors plus the model configuration."""

from __future__ import annotations

import io
import json
import os
import struct

from ..numerics import Tensor, read_tensor, write_tensor
from .model import ModelConfig, Parameters

MAGIC = b"EMC1"
CONFIG_KEY = "__config__"


def _write_name(fh, name: str) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_u32(fh) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise ValueError("truncated checkpoint")
    return struct.unpack("<I", raw)[0]


def dumps_checkpoint(params: Parameters, cfg: ModelConfig) -> bytes:
    """Serialize to bytes. Entries are written config first, then names sorted."""
    if CONFIG_KEY in params:
        raise ValueError(f"{CONFIG_KEY!r} is a reserved name")
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(params) + 1))
    _write_name(fh, CONFIG_KEY)
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)
    for name in sorted(params):
        _write_name(fh, name)
        write_tensor(fh, params[name].data)
    return fh.getvalue()


def loads_checkpoint(data: bytes) -> tuple[Parameters, ModelConfig]:
    fh = io.BytesIO(data)
    if fh.read(4) != MAGIC:
        raise ValueError("not an EMC1 checkpoint")
    count = _read_u32(fh)
    params: Parameters = {}
    cfg = None
    for _ in range(count):
        name = fh.read(_read_u32(fh)).decode("utf-8")
        if name == CONFIG_KEY:
            cfg = ModelConfig.from_dict(json.loads(fh.read(_read_u32(fh)).decode("utf-8")))
        else:
            params[name] = Tensor.wrap(read_tensor(fh))
    if cfg is None:
        raise ValueError("checkpoint has no configuration entry")
    return params, cfg


def save_checkpoint(path: str | os.PathLike, params: Parameters, cfg: ModelConfig) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(params, cfg))


def load_checkpoint(path: str | os.PathLike) -> tuple[Parameters, ModelConfig]:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
