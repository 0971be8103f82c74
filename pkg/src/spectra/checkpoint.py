"""
Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"SPCK"  u8 version
    u32 len  utf-8 key = value block (model config + caller metadata)
    u32 count
    count x [u16 len, utf-8 name, u8 ndim, ndim x u32 extent, float64le values]

Batch-norm running statistics are stored as ``stats.<layer>.mean`` and
``stats.<layer>.var`` records after the parameters.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .kvtext import dump_kv, parse_kv
from .model import CMTNet, ModelConfig
from .tensor import RunningStats

MAGIC = b"SPCK"
VERSION = 1
_META_PREFIX = "meta."


class CheckpointError(ValueError):
    pass


def _records(model: CMTNet):
    for name, p in model.params.items():
        yield name, p.data
    for name, st in model.stats.items():
        yield f"stats.{name}.mean", st.mean
        yield f"stats.{name}.var", st.var


def dumps(model: CMTNet, meta: dict | None = None) -> bytes:
    header = model.config.to_dict()
    for k, v in (meta or {}).items():
        header[_META_PREFIX + k] = str(v)
    text = dump_kv(header).encode("utf-8")
    recs = list(_records(model))
    parts = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(text)), text]
    parts.append(struct.pack("<I", len(recs)))
    for name, arr in recs:
        bname = name.encode("utf-8")
        parts.append(struct.pack("<H", len(bname)) + bname)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, model: CMTNet, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, meta))


def loads(raw: bytes) -> tuple[CMTNet, dict[str, str]]:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if raw[4] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {raw[4]}")
    pos = 5
    try:
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        header = parse_kv(raw[pos : pos + n].decode("utf-8"))
        pos += n
        meta = {k[len(_META_PREFIX):]: v for k, v in header.items() if k.startswith(_META_PREFIX)}
        config = ModelConfig.from_dict({k: v for k, v in header.items() if not k.startswith(_META_PREFIX)})
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + ln].decode("utf-8")
            pos += ln
            ndim = raw[pos]
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(raw):
                raise CheckpointError(f"record {name!r} is truncated")
            arrays[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, IndexError) as exc:
        raise CheckpointError("checkpoint is truncated") from exc
    if pos != len(raw):
        raise CheckpointError("trailing bytes after the last record")

    model = CMTNet(config)
    for name, p in model.params.items():
        if name not in arrays or arrays[name].shape != p.shape:
            raise CheckpointError(f"parameter {name!r} missing or mis-shaped")
        p.data = arrays[name].copy()
    for name in model.stats:
        model.stats[name] = RunningStats(
            arrays[f"stats.{name}.mean"].copy(), arrays[f"stats.{name}.var"].copy()
        )
    return model, meta


def load_checkpoint(path) -> tuple[CMTNet, dict[str, str]]:
    return loads(Path(path).read_bytes())
