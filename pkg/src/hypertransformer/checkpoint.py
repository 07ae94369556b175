"""Checkpoint container for network (and perceptual-net) weights.

Layout, little-endian::

    "HTCK" | version u32 | config length u32 | config JSON (UTF-8)
    then, per tensor in declaration order:
    name length u32 | name | rank u32 | dims u32[rank] | float32 payload

Parameters come first, then running statistics.  Blobs run to end of file.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict

import numpy as np

from .cubeio import atomic_write
from .errors import ContractError, FormatError

MAGIC = b"HTCK"
VERSION = 1
_U32 = struct.Struct("<I")


def encode(config: dict, state: "OrderedDict[str, np.ndarray]") -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(cfg)), cfg]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def _read_u32(buf: bytes, pos: int, what: str) -> tuple[int, int]:
    if pos + 4 > len(buf):
        raise FormatError(f"truncated while reading {what}", offset=pos)
    return _U32.unpack_from(buf, pos)[0], pos + 4


def decode(buf: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", offset=0)
    version, pos = _read_u32(buf, 4, "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    n, pos = _read_u32(buf, pos, "config length")
    if pos + n > len(buf):
        raise FormatError("truncated config JSON", offset=pos)
    try:
        config = json.loads(buf[pos : pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"config is not valid JSON: {exc}", offset=pos) from None
    pos += n
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    while pos < len(buf):
        start = pos
        n, pos = _read_u32(buf, pos, "name length")
        if pos + n > len(buf):
            raise FormatError("truncated tensor name", offset=pos)
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        rank, pos = _read_u32(buf, pos, f"rank of {name}")
        if rank > 8:
            raise FormatError(f"implausible rank {rank} for {name}", offset=pos - 4)
        dims = []
        for _ in range(rank):
            d, pos = _read_u32(buf, pos, f"dims of {name}")
            dims.append(d)
        count = int(np.prod(dims)) if dims else 1
        nbytes = 4 * count
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated payload for {name} (blob starts at {start})", offset=pos)
        state[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
    return config, state


def save(path, config: dict, module) -> None:
    atomic_write(path, encode(config, module.state_dict()))


def read(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return decode(buf)
    except FormatError as exc:
        err = FormatError(f"{path}: {exc}")
        err.offset = exc.offset
        raise err from None


def save_model(path, model, extra: dict | None = None) -> None:
    config = {"model": model.config.to_dict()}
    if extra:
        config.update(extra)
    save(path, config, model)


def load_model(path, dtype: str | None = None):
    """Rebuild a :class:`HyperTransformerNet` from a checkpoint file."""
    from .model import HyperTransformerNet, ModelConfig

    config, state = read(path)
    if "model" not in config:
        raise ContractError(f"{path}: checkpoint has no model configuration")
    cfg = ModelConfig.from_dict(config["model"])
    if dtype is not None:
        cfg.dtype = dtype
    model = HyperTransformerNet(cfg)
    model.load_state_dict(state)
    return model, config


def load_perceptual(path, net) -> None:
    """Fill a :class:`PerceptualNet` from a checkpoint holding its ``convs.*`` tensors."""
    _, state = read(path)
    net.load_state_dict(state)
