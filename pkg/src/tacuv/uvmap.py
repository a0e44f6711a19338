"""The canonical-surface pressure grid and its PGM export."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class UVMap:
    """W x H scalar pressure grid over the canonical hand surface.

    `values` is float32 with zeros wherever `mask` is 0; `mask` is uint8
    coverage (1 = texel belongs to the surface atlas).
    """

    width: int
    height: int
    values: np.ndarray
    mask: np.ndarray

    @classmethod
    def zeros(cls, width, height):
        return cls(width, height,
                   np.zeros((height, width), dtype=np.float32),
                   np.zeros((height, width), dtype=np.uint8))

    def masked(self) -> "UVMap":
        return UVMap(self.width, self.height,
                     self.values * self.mask, self.mask.copy())


def write_pgm16(path, image: np.ndarray) -> None:
    """Binary P5 PGM, 16-bit, min-max scaled. Sample bytes are big-endian
    as the PGM spec requires (unlike every other format here)."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo if hi > lo else 1.0
    scaled = np.round((img - lo) / span * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii"))
        fh.write(scaled.tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    if maxval != 65535:
        raise DataError(f"{path}: expected 16-bit PGM, maxval {maxval}")
    return np.frombuffer(parts[3][: w * h * 2], dtype=">u2").reshape(h, w).astype(np.uint16)
