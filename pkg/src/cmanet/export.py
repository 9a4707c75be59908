"""Attention-map files: 8-bit binary PGM renders and raw-weight CSVs."""

from __future__ import annotations

import csv

import numpy as np

from cmanet.cma import upsample_nearest


def to_gray8(grid: np.ndarray) -> np.ndarray:
    """Scale so the map's own maximum becomes 255."""
    grid = np.asarray(grid, dtype=np.float64)
    top = grid.max() if grid.size else 0.0
    if top <= 0:
        return np.zeros(grid.shape, dtype=np.uint8)
    return np.clip(np.rint(grid / top * 255.0), 0, 255).astype(np.uint8)


def pgm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got {img.shape}")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def write_attention_map(path_pgm, path_csv, row: np.ndarray, key_grid_shape, image_shape) -> None:
    """Render one attention row at ``image_shape`` and dump its raw weights."""
    grid = np.asarray(row).reshape(key_grid_shape)
    with open(path_pgm, "wb") as fh:
        fh.write(pgm_bytes(to_gray8(upsample_nearest(grid, image_shape))))
    coords = np.stack(np.unravel_index(np.arange(grid.size), grid.shape), axis=1)
    with open(path_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key_y", "key_x", "weight"])
        for (ky, kx), val in zip(coords, grid.reshape(-1)):
            w.writerow([int(ky), int(kx), repr(float(val))])
