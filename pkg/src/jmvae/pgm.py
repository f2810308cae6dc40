"""8-bit grayscale PGM (P5) images and image grids."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError


def to_gray8(img: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to uint8 (clipped, rounded half to even)."""
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def pgm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = to_gray8(img)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_pgm(path, img: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(pgm_bytes(img))
    return path


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", pos)
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5" or tokens[3] != b"255":
        raise FormatError("only binary 8-bit PGM (P5, maxval 255) is supported", 0)
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    data = buf[pos:pos + w * h]
    if len(data) != w * h:
        raise FormatError("truncated PGM payload", len(buf))
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def tile(images: np.ndarray, rows: int, cols: int, side: int = 28, pad: int = 1) -> np.ndarray:
    """Arrange ``rows * cols`` flattened square images row-major into one image."""
    images = np.asarray(images).reshape(rows, cols, side, side)
    cell = side + pad
    grid = np.zeros((rows * cell + pad, cols * cell + pad), dtype=images.dtype)
    for r in range(rows):
        for c in range(cols):
            y, x = pad + r * cell, pad + c * cell
            grid[y:y + side, x:x + side] = images[r, c]
    return grid
