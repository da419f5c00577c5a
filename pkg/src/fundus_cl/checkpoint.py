"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes  b"FUNDCL\\x00\\x01"
    meta_len     u64
    metadata     meta_len bytes of UTF-8 JSON
    n_tensors    u32
    per tensor:  name_len u16, name bytes, rank u8, dims u64 * rank, f32 payload
    digest       u64 FNV-1a over every preceding byte
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FUNDCL\x00\x01"
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFF_FFFF_FFFF_FFFF


class CheckpointError(ValueError):
    pass


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK
    return h


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def prefixed(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<Q", len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f4")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 8 + 4 + 8 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or too short)")
    body, (digest,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if fnv1a64(body) != digest:
        raise CheckpointError("checkpoint digest mismatch: file is corrupt or truncated")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("checkpoint ends mid-record")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (meta_len,) = struct.unpack("<Q", take(8))
    metadata = json.loads(take(meta_len).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(body):
        raise CheckpointError("trailing bytes after tensor blocks")
    return Checkpoint(tensors, metadata)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path, encoder_cfg=None) -> Checkpoint:
    """Read and verify a checkpoint; optionally audit encoder shapes against ``encoder_cfg``."""
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if encoder_cfg is not None:
        from .models import Encoder, ShapeMismatchError, expected_shapes

        want = expected_shapes(Encoder(encoder_cfg))
        got = ckpt.prefixed("encoder")
        problems = [
            f"encoder.{k}: checkpoint {tuple(got[k].shape) if k in got else 'missing'}, config {shape}"
            for k, shape in want.items()
            if k not in got or tuple(got[k].shape) != shape
        ]
        problems += [f"encoder.{k}: not in config" for k in got if k not in want]
        if problems:
            raise ShapeMismatchError("checkpoint does not match encoder config:\n  " + "\n  ".join(problems))
    return ckpt
