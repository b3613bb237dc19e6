"""Binary checkpoint container.

Layout (little-endian)::

    b"MMCK" | version u16 | meta length u32 | meta JSON (UTF-8)
    | record count u32 | records... | CRC32 u32 over every preceding byte

Each record is ``key length u16 | key | ndim u8 | dims u32 * ndim | f32 data``.
Record keys are ``param/<path>``, ``best/<path>``, ``adam.m/<path>`` and
``adam.v/<path>``.
"""
from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import AdamState

MAGIC = b"MMCK"
VERSION = 1


class CheckpointError(Exception):
    def __init__(self, message: str, key: str | None = None, offset: int | None = None):
        where = []
        if key is not None:
            where.append(f"record {key!r}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(message + (f" ({', '.join(where)})" if where else ""))
        self.key = key
        self.offset = offset


class VocabHashWarning(UserWarning):
    pass


@dataclass
class Checkpoint:
    params: dict                       # path -> float32 array
    adam: AdamState = field(default_factory=AdamState)
    config: dict = field(default_factory=dict)
    vocab_hash: str = ""
    stage: str = "CrossEntropy"
    epoch: int = 0
    best_val: float = float("-inf")
    extra: dict = field(default_factory=dict)       # trainer bookkeeping
    best_params: dict = field(default_factory=dict)


def _jsonable(x: float):
    return None if x is None or not np.isfinite(x) else float(x)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {
        "config": ckpt.config,
        "vocab_hash": ckpt.vocab_hash,
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "best_val": _jsonable(ckpt.best_val),
        "extra": ckpt.extra,
        "adam": {"lr": ckpt.adam.lr, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2,
                 "eps": ckpt.adam.eps, "t": ckpt.adam.t},
    }
    records = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    records += [(f"best/{k}", v) for k, v in ckpt.best_params.items()]
    records += [(f"adam.m/{k}", v) for k, v in ckpt.adam.m.items()]
    records += [(f"adam.v/{k}", v) for k, v in ckpt.adam.v.items()]

    buf = bytearray(MAGIC)
    mj = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf += struct.pack("<HI", VERSION, len(mj)) + mj
    buf += struct.pack("<I", len(records))
    for key, arr in records:
        arr = np.asarray(arr, dtype="<f4", order="C")  # keeps 0-d shapes
        kb = key.encode("utf-8")
        buf += struct.pack("<H", len(kb)) + kb
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_checkpoint(path, expect_vocab_hash: str | None = None) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    raw = p.read_bytes()
    pos = 0
    key = None

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw) - 4:
            raise CheckpointError(f"truncated while reading {what}", key, pos)
        out = raw[pos:pos + n]
        pos += n
        return out

    if len(raw) < 14 or raw[:4] != MAGIC:
        raise CheckpointError("bad magic, expected b'MMCK'", None, 0)
    pos = 4
    version, mlen = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", None, 4)
    try:
        meta = json.loads(take(mlen, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt metadata: {e}", None, 10) from None
    (count,) = struct.unpack("<I", take(4, "record count"))
    params, best, m, v = {}, {}, {}, {}
    sinks = {"param": params, "best": best, "adam.m": m, "adam.v": v}
    for _ in range(count):
        key = None
        (klen,) = struct.unpack("<H", take(2, "key length"))
        try:
            key = take(klen, "key").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("key is not valid UTF-8", None, pos) from None
        kind, _, path_ = key.partition("/")
        if kind not in sinks or not path_:
            raise CheckpointError("unknown record kind", key, pos)
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(4 * size, "data"), dtype="<f4").reshape(dims).astype(np.float32)
        sinks[kind][path_] = data
    key = None
    if pos != len(raw) - 4:
        raise CheckpointError("unexpected bytes before checksum", None, pos)
    (crc,) = struct.unpack("<I", raw[-4:])
    if crc != (zlib.crc32(raw[:-4]) & 0xFFFFFFFF):
        raise CheckpointError("CRC32 mismatch: file is corrupt", None, len(raw) - 4)

    a = meta.get("adam", {})
    adam = AdamState(lr=a.get("lr", 1e-3), beta1=a.get("beta1", 0.9), beta2=a.get("beta2", 0.999),
                     eps=a.get("eps", 1e-8), t=a.get("t", 0), m=m, v=v)
    best_val = meta.get("best_val")
    ck = Checkpoint(params=params, adam=adam, config=meta.get("config", {}),
                    vocab_hash=meta.get("vocab_hash", ""), stage=meta.get("stage", "CrossEntropy"),
                    epoch=int(meta.get("epoch", 0)),
                    best_val=float("-inf") if best_val is None else float(best_val),
                    extra=meta.get("extra", {}), best_params=best)
    if expect_vocab_hash and ck.vocab_hash and ck.vocab_hash != expect_vocab_hash:
        warnings.warn(f"checkpoint {p} was trained with a different vocabulary", VocabHashWarning, stacklevel=2)
    return ck
