"""Dependency-free grayscale image emission (binary PGM, P5)."""

from __future__ import annotations

import numpy as np

__all__ = ["write_pgm", "read_pgm", "tile_grid"]


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [H,W] image as 8-bit binary PGM; floats are taken as [0,1]."""
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ValueError(f"PGM writer needs a single-channel image, got shape {image.shape}")
    if image.dtype != np.uint8:
        image = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise ValueError(f"{path}: unsupported maxval {parts[2]!r}")
    return np.frombuffer(parts[3][: h * w], dtype=np.uint8).reshape(h, w)


def tile_grid(images: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Pack [N,1,H,W] (or [N,H,W]) images row-major into one [rows*H, cols*W]
    canvas; missing cells stay black."""
    if images.ndim == 4:
        images = images[:, 0]
    n, h, w = images.shape
    if n > rows * cols:
        raise ValueError(f"{n} images do not fit a {rows}x{cols} grid")
    canvas = np.zeros((rows * h, cols * w), dtype=np.float64)
    for i in range(n):
        r, c = divmod(i, cols)
        canvas[r * h : (r + 1) * h, c * w : (c + 1) * w] = images[i]
    return canvas
