"""Named random substreams derived from one root seed.

Every consumer of randomness asks for a stream by path, e.g.
``substream(seed, "pretrain", "epoch", 3, "img", 17)``.  The stream depends
only on (seed, path), so serial and parallel runs draw identical numbers.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _path_key(parts) -> str:
    return "/".join(str(p) for p in parts)


def substream_seed(seed: int, *path) -> int:
    """64-bit integer seed for a named stream (used to seed torch)."""
    digest = hashlib.sha256(f"{int(seed)}::{_path_key(path)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def substream(seed: int, *path) -> np.random.Generator:
    digest = hashlib.sha256(f"{int(seed)}::{_path_key(path)}".encode()).digest()
    words = np.frombuffer(digest, dtype="<u4").tolist()
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
