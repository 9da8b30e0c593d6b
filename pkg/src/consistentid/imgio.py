"""Image file I/O: PNG via Pillow, binary masks as P5 PGM."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ParserFailure


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(path: str | Path, image: np.ndarray) -> None:
    """Write an H x W x C float image in [0, 1] (or uint8) as PNG."""
    arr = image if image.dtype == np.uint8 else to_uint8(image)
    Image.fromarray(arr).save(str(path), format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    """Read an image file into H x W x 3 float32 in [0, 1]."""
    with Image.open(str(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_pgm(path: str | Path, mask: np.ndarray) -> None:
    """Write a binary mask as an 8-bit P5 PGM with values 0/255."""
    mask = np.asarray(mask)
    data = (mask > 0).astype(np.uint8) * 255
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read an 8-bit binary P5 PGM into a uint8 array."""
    blob = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4 and pos < len(blob):
        # skip whitespace and comment lines between header fields
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if len(fields) < 4 or fields[0] != b"P5":
        raise ParserFailure(f"{path}: not a binary (P5) PGM file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ParserFailure(f"{path}: expected 8-bit PGM, maxval={maxval}")
    pos += 1  # single whitespace byte after maxval
    pixels = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    if pixels.size != w * h:
        raise ParserFailure(f"{path}: truncated pixel data")
    return pixels.reshape(h, w).copy()
