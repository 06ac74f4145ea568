"""PNG reading and writing for images, maps and label images."""

from __future__ import annotations

import numpy as np
from PIL import Image


def read_image(path) -> np.ndarray:
    """Load a grayscale PNG as float64 in [0, 1]."""
    with Image.open(path) as im:
        mode = im.mode
        a = np.asarray(im)
    if a.ndim == 3:
        a = a[..., :3].mean(axis=-1)
        return a / 255.0
    if mode in ("I;16", "I;16B", "I;16L", "I") or a.dtype == np.uint16:
        return a.astype(np.float64) / 65535.0
    return a.astype(np.float64) / 255.0


def read_labels(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).astype(np.int64)


def write_image8(path, img):
    a = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a, mode="L").save(path)


def write_map16(path, m):
    """Write a [0, 1] map as 16-bit grayscale scaled by 65535."""
    a = np.clip(np.round(np.asarray(m, dtype=float) * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(a).save(path)


def write_labels(path, labels):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 65535):
        raise ValueError("labels must fit in 16 bits")
    Image.fromarray(labels.astype(np.uint16)).save(path)


def label_colors(n, seed=0) -> np.ndarray:
    """(n + 1, 3) uint8 palette; row 0 (background) is black."""
    rng = np.random.default_rng(seed)
    pal = rng.integers(64, 256, size=(n + 1, 3)).astype(np.uint8)
    pal[0] = 0
    return pal


def write_overlay(path, image, labels, alpha=0.45):
    labels = np.asarray(labels)
    n = int(labels.max()) if labels.size else 0
    pal = label_colors(n).astype(float)
    gray = np.repeat(np.clip(image, 0, 1)[..., None] * 255.0, 3, axis=-1)
    col = pal[labels]
    out = np.where(labels[..., None] > 0, (1 - alpha) * gray + alpha * col, gray)
    Image.fromarray(np.round(out).astype(np.uint8), mode="RGB").save(path)


def write_fused_contributions(path, projected):
    """Color-coded fusion of winner-takes-pixel contribution channels."""
    projected = np.asarray(projected)
    h, w = projected.shape[1:]
    out = np.zeros((h, w, 3))
    if len(projected):
        pal = label_colors(len(projected)).astype(float)
        owner = projected.argmax(axis=0)
        val = projected.max(axis=0)
        scale = val.max() or 1.0
        out = pal[owner + 1] * (val / scale)[..., None]
    Image.fromarray(np.round(out).astype(np.uint8), mode="RGB").save(path)
