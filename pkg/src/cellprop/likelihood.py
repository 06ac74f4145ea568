"""Centroid annotations and the Gaussian likelihood-map training target."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRUNCATE = 4.0  # kernel radius in units of sigma


class AnnotationError(ValueError):
    pass


@dataclass
class CentroidAnnotation:
    image_id: str = ""
    points: list[tuple[float, float]] = field(default_factory=list)

    def __len__(self):
        return len(self.points)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float).reshape(-1, 2)

    def check_bounds(self, width, height):
        for x, y in self.points:
            if not (0 <= x <= width - 1 and 0 <= y <= height - 1):
                raise AnnotationError(
                    f"point ({x}, {y}) lies outside image bounds x in [0, {width - 1}], y in [0, {height - 1}]"
                )


def render_likelihood(ann: CentroidAnnotation, width: int, height: int, sigma: float) -> np.ndarray:
    """Render a (height, width) map with a unit Gaussian peak per centroid.

    Overlapping kernels are combined by per-pixel maximum. Each peak is
    normalized so the pixel nearest to its centroid is exactly 1.0.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    ann.check_bounds(width, height)
    out = np.zeros((height, width))
    r = int(np.ceil(TRUNCATE * sigma))
    for cx, cy in ann.points:
        px, py = int(round(cx)), int(round(cy))
        x0, x1 = max(px - r, 0), min(px + r + 1, width)
        y0, y1 = max(py - r, 0), min(py + r + 1, height)
        xs = np.arange(x0, x1)[None, :]
        ys = np.arange(y0, y1)[:, None]
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        k = np.exp(-(d2 - ((px - cx) ** 2 + (py - cy) ** 2)) / (2 * sigma**2))
        k = np.minimum(k, 1.0)
        k[d2 > (TRUNCATE * sigma) ** 2] = 0.0
        k[py - y0, px - x0] = 1.0
        np.maximum(out[y0:y1, x0:x1], k, out=out[y0:y1, x0:x1])
    return out


def load_annotations(path, width=None, height=None, image_id=None) -> CentroidAnnotation:
    """Read an ``x,y`` CSV. A single leading ``x,y`` header line is skipped."""
    path = Path(path)
    points = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and [c.strip().lower() for c in row] == ["x", "y"]:
                continue
            if len(row) != 2:
                raise AnnotationError(f"{path}:{lineno}: expected two fields, got {len(row)}")
            try:
                x, y = float(row[0]), float(row[1])
            except ValueError:
                raise AnnotationError(f"{path}:{lineno}: not a number pair: {','.join(row)!r}") from None
            if not (np.isfinite(x) and np.isfinite(y)):
                raise AnnotationError(f"{path}:{lineno}: non-finite coordinate")
            points.append((x, y))
    ann = CentroidAnnotation(image_id if image_id is not None else path.stem, points)
    if width is not None and height is not None:
        ann.check_bounds(width, height)
    return ann


def save_annotations(ann: CentroidAnnotation, path):
    with open(path, "w", newline="") as fh:
        fh.write("x,y\n")
        for x, y in ann.points:
            fh.write(f"{x!r},{y!r}\n")
