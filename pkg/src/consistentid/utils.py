"""Small shared helpers: keyed RNG streams, cosine similarity, hashing."""

from __future__ import annotations

import hashlib
import zlib
from pathlib import Path

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    if isinstance(key, str):
        # crc32 is stable across processes, unlike hash()
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"unsupported rng key type: {type(key)!r}")


def rng_for(*keys) -> np.random.Generator:
    """Deterministic generator for a tuple of int/str keys.

    Every random draw in the package goes through a stream derived this way,
    so replay never depends on call order or worker count.
    """
    return np.random.default_rng(np.random.SeedSequence([_key_to_int(k) for k in keys]))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two flattened vectors; 0.0 if either is zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
