"""Little-endian byte formats for everything that crosses the client/server
boundary. The LoRA-set format doubles as the checkpoint format.

LoRA set:   b"DFLR" | u16 version | u32 count | count x (u32 rows | u32 cols | f64[rows*cols])
Embeddings: b"DFEM" | u16 version | u32 count | u32 dim | u32[count] labels | f64[count*dim]
Report:     b"DFRP" | u16 version | f64 train accuracy | u32 sample count
"""

from __future__ import annotations

import struct
from typing import Mapping, Sequence

import numpy as np

VERSION = 1
LORA_MAGIC = b"DFLR"
EMB_MAGIC = b"DFEM"
REPORT_MAGIC = b"DFRP"

_HEAD = struct.Struct("<4sH")


class WireError(ValueError):
    pass


def _check_head(buf: bytes, magic: bytes) -> int:
    if len(buf) < _HEAD.size:
        raise WireError("truncated payload")
    got, version = _HEAD.unpack_from(buf, 0)
    if got != magic:
        raise WireError(f"bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    return _HEAD.size


def lora_keys(state: Mapping[str, np.ndarray]) -> list[str]:
    return sorted(state)


def encode_lora(state: Mapping[str, np.ndarray]) -> bytes:
    """Matrices are written in sorted-key order; the receiver re-keys them the same way."""
    parts = [_HEAD.pack(LORA_MAGIC, VERSION), struct.pack("<I", len(state))]
    for k in lora_keys(state):
        m = np.atleast_2d(np.asarray(state[k], dtype="<f8"))
        parts.append(struct.pack("<II", *m.shape))
        parts.append(m.tobytes(order="C"))
    return b"".join(parts)


def decode_lora_matrices(buf: bytes) -> list[np.ndarray]:
    off = _check_head(buf, LORA_MAGIC)
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out = []
    for _ in range(count):
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        n = rows * cols
        if off + 8 * n > len(buf):
            raise WireError("truncated LoRA matrix")
        out.append(np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(rows, cols).astype(np.float64))
        off += 8 * n
    if off != len(buf):
        raise WireError("trailing bytes after LoRA set")
    return out


def decode_lora(buf: bytes, keys: Sequence[str]) -> dict[str, np.ndarray]:
    mats = decode_lora_matrices(buf)
    keys = sorted(keys)
    if len(mats) != len(keys):
        raise WireError(f"LoRA set has {len(mats)} matrices, template has {len(keys)}")
    return dict(zip(keys, mats))


def encode_embeddings(emb: np.ndarray, labels) -> bytes:
    emb = np.asarray(emb, dtype="<f8").reshape(len(labels), -1) if len(labels) else np.zeros((0, 0))
    labels = np.asarray(labels, dtype="<u4")
    count, dim = emb.shape
    return b"".join([_HEAD.pack(EMB_MAGIC, VERSION), struct.pack("<II", count, dim),
                     labels.tobytes(), emb.astype("<f8").tobytes(order="C")])


def decode_embeddings(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    off = _check_head(buf, EMB_MAGIC)
    count, dim = struct.unpack_from("<II", buf, off)
    off += 8
    if len(buf) != off + 4 * count + 8 * count * dim:
        raise WireError("embedding batch length does not match its header")
    labels = np.frombuffer(buf, dtype="<u4", count=count, offset=off).astype(np.int64)
    off += 4 * count
    emb = np.frombuffer(buf, dtype="<f8", count=count * dim, offset=off).reshape(count, dim).astype(np.float64)
    return emb, labels


def encode_report(accuracy: float, n_samples: int) -> bytes:
    return _HEAD.pack(REPORT_MAGIC, VERSION) + struct.pack("<dI", accuracy, n_samples)


def decode_report(buf: bytes) -> tuple[float, int]:
    off = _check_head(buf, REPORT_MAGIC)
    acc, n = struct.unpack_from("<dI", buf, off)
    return acc, n
