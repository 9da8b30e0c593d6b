"""Weight checkpoints: one binary blob with a JSON header.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header
{module, version, seed, meta, arrays: [{name, shape, dtype}]}, then the raw
C-order array bytes concatenated in header order. Round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatch

MAGIC = b"CIDCKPT\x01"
FORMAT_VERSION = "ckpt/1"


def save_checkpoint(
    path: str | Path,
    module: str,
    arrays: dict[str, np.ndarray],
    meta: dict | None = None,
    seed: int | None = None,
) -> None:
    names = sorted(arrays)
    header = {
        "module": module,
        "version": FORMAT_VERSION,
        "seed": seed,
        "meta": meta or {},
        "arrays": [
            {"name": n, "shape": list(arrays[n].shape), "dtype": str(arrays[n].dtype)}
            for n in names
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for n in names:
            f.write(np.ascontiguousarray(arrays[n]).tobytes())


def load_checkpoint(path: str | Path, expect_module: str | None = None):
    """Returns (arrays, header). Raises CheckpointMismatch on bad files."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointMismatch(f"cannot read checkpoint {path}: {e}") from e
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointMismatch(f"{path} is not a checkpoint file")
    (header_len,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(blob[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointMismatch(f"{path} has a corrupt header: {e}") from e
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointMismatch(f"{path}: unsupported version {header.get('version')!r}")
    if expect_module is not None and header.get("module") != expect_module:
        raise CheckpointMismatch(
            f"{path}: expected module {expect_module!r}, found {header.get('module')!r}"
        )
    arrays = {}
    offset = start + header_len
    for spec in header["arrays"]:
        dtype = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(blob):
            raise CheckpointMismatch(f"{path}: truncated array {spec['name']!r}")
        arrays[spec["name"]] = (
            np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        )
        offset += nbytes
    if offset != len(blob):
        raise CheckpointMismatch(f"{path}: {len(blob) - offset} trailing bytes")
    return arrays, header
