"""Center regions from a likelihood map, and detection matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .likelihood import CentroidAnnotation

MIN_AREA = 2
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class CenterRegion:
    u: int
    pixels: np.ndarray  # (n, 2) integer (row, col)
    peak: float
    centroid: tuple[float, float]  # (x, y)

    @property
    def area(self) -> int:
        return len(self.pixels)

    def mask(self, shape) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        m[self.pixels[:, 0], self.pixels[:, 1]] = True
        return m


def detect_centers(y, threshold: float = 0.3, min_area: int = MIN_AREA) -> list[CenterRegion]:
    """One region per 8-connected component of ``y > threshold``.

    Ids start at 1 and follow raster order of each component's first pixel.
    Components smaller than ``min_area`` pixels are dropped as noise.
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    y = np.asarray(y, dtype=float)
    comp, n = ndimage.label(y > threshold, structure=_EIGHT)
    regions = []
    for k, sl in enumerate(ndimage.find_objects(comp), start=1):
        rr, cc = np.nonzero(comp[sl] == k)
        rr = rr + sl[0].start
        cc = cc + sl[1].start
        if len(rr) < min_area:
            continue
        w = y[rr, cc]
        cx = float(np.sum(w * cc) / np.sum(w))
        cy = float(np.sum(w * rr) / np.sum(w))
        regions.append(
            CenterRegion(len(regions) + 1, np.stack([rr, cc], axis=1), float(w.max()), (cx, cy))
        )
    return regions


@dataclass(frozen=True)
class Matching:
    tp: int
    fp: int
    fn: int
    pairs: tuple[tuple[int, int], ...]  # (pred index, truth index)


def match_points(pred, truth, radius: float) -> Matching:
    """Greedy one-to-one matching of two point sets, nearest pairs first."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    pred = np.asarray(pred, dtype=float).reshape(-1, 2)
    truth = np.asarray(truth, dtype=float).reshape(-1, 2)
    cand = []
    if len(pred) and len(truth):
        d = np.hypot(pred[:, None, 0] - truth[None, :, 0], pred[:, None, 1] - truth[None, :, 1])
        ii, jj = np.nonzero(d <= radius)
        cand = sorted(zip(d[ii, jj], ii, jj))
    used_p, used_t = set(), set()
    pairs = []
    for _, i, j in cand:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        pairs.append((int(i), int(j)))
    tp = len(pairs)
    return Matching(tp, len(pred) - tp, len(truth) - tp, tuple(pairs))


def match_detections(pred: list[CenterRegion], truth: CentroidAnnotation, radius: float = 5.0) -> Matching:
    return match_points([r.centroid for r in pred], truth.as_array(), radius)


def write_detections(path, regions: list[CenterRegion]):
    with open(path, "w") as fh:
        fh.write("u,cx,cy,peak,area\n")
        for r in regions:
            fh.write(f"{r.u},{r.centroid[0]:.4f},{r.centroid[1]:.4f},{r.peak:.6f},{r.area}\n")
