"""MELR binary checkpoint format (little-endian).

Layout::

    b"MELR"  u16 version=1
    u32 mode (0 = lora, 1 = melora), u32 n, u32 r_mini, u32 d_in, u32 d_out
    f64 alpha, f64 dropout_p, u64 seed
    for each mini i: A_i row-major f64, then B_i row-major f64

A plain LoRA adapter is stored with mode 0, n = 1 and r_mini = r.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .adapters import Adapter, LoraAdapter, MeloraAdapter
from .errors import CheckpointFormatError

MAGIC = b"MELR"
VERSION = 1
MODE_LORA, MODE_MELORA = 0, 1

_HEADER = struct.Struct("<4sH5IddQ")


def to_bytes(adapter: Adapter) -> bytes:
    if isinstance(adapter, MeloraAdapter):
        mode, minis, seed = MODE_MELORA, adapter.minis, adapter.seed
    else:
        mode, minis, seed = MODE_LORA, [adapter], adapter.seed
    first = minis[0]
    head = _HEADER.pack(MAGIC, VERSION, mode, len(minis), first.rank,
                        first.d_in * len(minis), first.d_out * len(minis),
                        float(first.alpha), float(first.dropout_p), seed)
    body = b"".join(m.a.astype("<f8").tobytes() + m.b.astype("<f8").tobytes() for m in minis)
    return head + body


def from_bytes(blob: bytes) -> Adapter:
    if len(blob) < 4:
        raise CheckpointFormatError("unexpected end of file while reading magic")
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < _HEADER.size:
        raise CheckpointFormatError("unexpected end of file while reading header")
    _, version, mode, n, r, d_in, d_out, alpha, dropout_p, seed = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}, expected {VERSION}")
    if mode not in (MODE_LORA, MODE_MELORA):
        raise CheckpointFormatError(f"unknown adapter mode {mode}")
    if n == 0 or r == 0 or d_in % n or d_out % n or (mode == MODE_LORA and n != 1):
        raise CheckpointFormatError(f"inconsistent header: mode={mode} n={n} r_mini={r} "
                                    f"d_in={d_in} d_out={d_out}")
    bi, bo = d_in // n, d_out // n
    need = _HEADER.size + 8 * n * (r * bi + bo * r)
    if len(blob) < need:
        raise CheckpointFormatError(f"unexpected end of file: {len(blob)} bytes, need {need}")
    if len(blob) > need:
        raise CheckpointFormatError(f"{len(blob) - need} trailing bytes after adapter data")

    values = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    minis, pos = [], 0
    for _ in range(n):
        a = values[pos:pos + r * bi].reshape(r, bi)
        pos += r * bi
        b = values[pos:pos + bo * r].reshape(bo, r)
        pos += bo * r
        minis.append(LoraAdapter(a.copy(), b.copy(), alpha=alpha, dropout_p=dropout_p, seed=seed))
    if mode == MODE_LORA:
        return minis[0]
    return MeloraAdapter(minis, seed=seed)


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a sibling temp file and rename, so failures leave no partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def save(adapter: Adapter, path: str | os.PathLike) -> None:
    atomic_write(path, to_bytes(adapter))


def load(path: str | os.PathLike) -> Adapter:
    return from_bytes(Path(path).read_bytes())
