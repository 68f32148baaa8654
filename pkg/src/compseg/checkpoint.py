"""Versioned binary checkpoint container.

Layout, little-endian::

    4s   magic b"CALN"
    u32  format version (1)
    u32  config JSON length L
    L    config JSON, UTF-8 (model config, vocabulary, trainer counters)
    repeated until EOF:
        u32  name length n
        n    name, UTF-8
        u32  rank r
        r*u64 extents
        f64  data, row-major

Model parameters are stored as ``param.<dotted name>``, optimiser state as
``adam.t``, ``adam.m.<i>`` and ``adam.v.<i>``.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import ModelConfig, SegModel
from .prompts import Vocabulary

MAGIC = b"CALN"
VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def encode(config: dict, arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    buf.write(MAGIC + _U32.pack(VERSION) + _U32.pack(len(blob)) + blob)
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        buf.write(_U32.pack(len(raw)) + raw + _U32.pack(arr.ndim))
        for extent in arr.shape:
            buf.write(_U64.pack(extent))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(blob)
    if len(blob) < 12 or bytes(view[:4]) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (version,) = _U32.unpack_from(blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (n,) = _U32.unpack_from(blob, 8)
    off = 12 + n
    if off > len(blob):
        raise FormatError("truncated config block")
    config = json.loads(bytes(view[12:off]).decode())
    arrays: dict[str, np.ndarray] = {}
    try:
        while off < len(blob):
            (ln,) = _U32.unpack_from(blob, off)
            name = bytes(view[off + 4:off + 4 + ln]).decode()
            off += 4 + ln
            (rank,) = _U32.unpack_from(blob, off)
            off += 4
            shape = tuple(_U64.unpack_from(blob, off + 8 * i)[0] for i in range(rank))
            off += 8 * rank
            count = int(np.prod(shape)) if shape else 1
            if off + 8 * count > len(blob):
                raise FormatError(f"truncated array {name!r}")
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
            off += 8 * count
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    return config, arrays


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save(path, model: SegModel, trainer=None, extra: dict | None = None) -> Path:
    path = Path(path)
    config = {"model": model.cfg.to_dict(), "vocab": model.vocab.to_dict(), "extra": dict(extra or {})}
    arrays = {f"param.{name}": p.data for name, p in model.named_parameters()}
    if trainer is not None:
        config["trainer"] = {"epoch": trainer.epoch, "step": trainer.step_count}
        arrays.update(trainer.opt.state_arrays())
    _write_atomic(path, encode(config, arrays))
    return path


def load_model(path) -> tuple[SegModel, dict, dict[str, np.ndarray]]:
    """Rebuild the model; returns ``(model, config, arrays)`` so callers can restore a trainer."""
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"checkpoint {path} not found") from None
    config, arrays = decode(blob)
    model = SegModel(ModelConfig.from_dict(config["model"]), Vocabulary.from_dict(config["vocab"]))
    for name, p in model.named_parameters():
        key = f"param.{name}"
        if key not in arrays:
            raise FormatError(f"checkpoint lacks parameter {name!r}")
        if arrays[key].shape != p.data.shape:
            raise FormatError(f"parameter {name!r} has shape {arrays[key].shape}, expected {p.data.shape}")
        p.data[...] = arrays[key]
    return model, config, arrays


def restore_trainer(trainer, config: dict, arrays: dict[str, np.ndarray]) -> None:
    state = config.get("trainer")
    if state is None:
        raise FormatError("checkpoint carries no trainer state")
    trainer.epoch = int(state["epoch"])
    trainer.step_count = int(state["step"])
    trainer.opt.load_state_arrays(arrays)
