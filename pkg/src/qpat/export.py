"""Grayscale image export of nodal fields."""

from __future__ import annotations

import re

import numpy as np

from .grid import SpatialMesh


def field_image(values: np.ndarray, mesh: SpatialMesh) -> np.ndarray:
    """Nodal values as a 2-D array with the top side of the square in row 0."""
    n = mesh.n_per_side
    return np.flipud(np.asarray(values, float).reshape(n, n))


def to_gray(img: np.ndarray) -> tuple[np.ndarray, dict]:
    """Scale to 8 bits over ``[min, max]``; a constant image maps to zero."""
    lo, hi = float(np.min(img)), float(np.max(img))
    span = hi - lo
    if span > 0:
        g = np.rint((img - lo) / span * 255.0)
    else:
        g = np.zeros_like(img)
    return g.astype(np.uint8), {"min": lo, "max": hi, "levels": 255}


def write_pgm(path, img: np.ndarray) -> dict:
    """Write a binary (P5) graymap and return the value scale used."""
    g, scale = to_gray(img)
    h, w = g.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(g.tobytes())
    return scale


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    # header tokens, then exactly one whitespace byte before the raster
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", raw)
    if m is None:
        raise ValueError(f"{path}: not an 8-bit binary graymap")
    w, h = int(m.group(1)), int(m.group(2))
    body = raw[m.end():]
    if len(body) != w * h:
        raise ValueError(f"{path}: raster has {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)
