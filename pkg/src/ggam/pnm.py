"""Minimal binary PGM (P5) and PPM (P6) writers.

Arrays are indexed (x, y) / (channel, x, y) with x the column and y the row,
matching the rest of the package; rasters are emitted row by row.
"""

from __future__ import annotations

import numpy as np

__all__ = ["to_bytes_gray", "to_bytes_rgb", "write_pgm", "write_ppm"]


def to_bytes_gray(values: np.ndarray) -> np.ndarray:
    """Quantize a (w, h) float array in [0, 1] to uint8."""
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.round(v * 255.0), 0, 255).astype(np.uint8)


def to_bytes_rgb(values: np.ndarray) -> np.ndarray:
    """Quantize a (3, w, h) float array in [0, 1] to uint8."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 3 or v.shape[0] != 3:
        raise ValueError(f"expected (3, w, h) array, got shape {v.shape}")
    return np.clip(np.round(v * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, gray: np.ndarray) -> None:
    """Write a (w, h) uint8 or [0,1]-float array as binary PGM."""
    g = gray if gray.dtype == np.uint8 else to_bytes_gray(gray)
    w, h = g.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(g.T).tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write a (3, w, h) uint8 or [0,1]-float array as binary PPM."""
    r = rgb if rgb.dtype == np.uint8 else to_bytes_rgb(rgb)
    _, w, h = r.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(r.transpose(2, 1, 0)).tobytes())
