"""Synthetic phase-contrast-like scenes of touching cells.

Cells are dark ellipses that brighten toward their center (shade-off) and
are surrounded by a bright halo ring. Each scene comes with its centroid
annotation (the weak label) and a ground-truth instance labeling in which
pixels covered by several ellipses belong to the nearest centroid.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .likelihood import CentroidAnnotation, save_annotations
from .pngio import write_image8, write_labels


class PlacementError(RuntimeError):
    def __init__(self, achieved, wanted):
        super().__init__(f"could only place {achieved} of {wanted} cells")
        self.achieved = achieved
        self.wanted = wanted


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    count_range: tuple[int, int] = (3, 6)
    radius_range: tuple[float, float] = (6.0, 8.5)
    eccentricity_range: tuple[float, float] = (0.0, 0.6)
    min_separation: float = 11.0
    halo_width: float = 2.0
    halo_brightness: float = 0.35
    interior_darkness: float = 0.3
    noise_std: float = 0.03
    background: float = 0.5
    cluster_prob: float = 0.6
    blur: float = 0.6
    seed: int = 0

    def __post_init__(self):
        for name in ("count_range", "radius_range", "eccentricity_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a nonempty nonnegative range, got {(lo, hi)}")
        if self.eccentricity_range[1] >= 1:
            raise ValueError("eccentricity must stay below 1")
        if self.min_separation <= 0:
            raise ValueError("min_separation must be positive")
        if self.size < 1:
            raise ValueError("size must be positive")
        for name in ("halo_width", "halo_brightness", "interior_darkness", "noise_std", "blur"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


_RANGES = ("count_range", "radius_range", "eccentricity_range")


def parse_scene_spec(text: str, **overrides) -> SceneSpec:
    """Parse ``key = value`` lines; ranges are written ``lo, hi``."""
    types = {f.name: f.type for f in dataclasses.fields(SceneSpec)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = val
    values.update({k: v for k, v in overrides.items() if v is not None})
    out = {}
    for key, val in values.items():
        if not isinstance(val, str):
            out[key] = val
        elif key in _RANGES:
            lo, hi = (s.strip() for s in val.split(","))
            cast = int if key == "count_range" else float
            out[key] = (cast(lo), cast(hi))
        elif key in ("size", "seed"):
            out[key] = int(val)
        else:
            out[key] = float(val)
    return SceneSpec(**out)


def format_scene_spec(spec: SceneSpec) -> str:
    lines = []
    for f in dataclasses.fields(spec):
        v = getattr(spec, f.name)
        if isinstance(v, tuple):
            v = f"{v[0]}, {v[1]}"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def _place(spec, rng, n):
    rmax = spec.radius_range[1]
    lo, hi = min(rmax, (spec.size - 1) / 2), max(spec.size - 1 - rmax, (spec.size - 1) / 2)
    pts = []
    attempts = 0
    while len(pts) < n:
        attempts += 1
        if attempts > 1000 * n:
            raise PlacementError(len(pts), n)
        if pts and rng.random() < spec.cluster_prob:
            ax, ay = pts[rng.integers(len(pts))]
            d = rng.uniform(spec.min_separation, max(spec.min_separation, 2 * rmax))
            t = rng.uniform(0, 2 * np.pi)
            p = (ax + d * np.cos(t), ay + d * np.sin(t))
        else:
            p = (rng.uniform(lo, hi), rng.uniform(lo, hi))
        if not (lo <= p[0] <= hi and lo <= p[1] <= hi):
            continue
        if all(np.hypot(p[0] - q[0], p[1] - q[1]) >= spec.min_separation for q in pts):
            pts.append(p)
    return pts


def generate(spec: SceneSpec, rng: np.random.Generator | None = None):
    """Return ``(image, annotation, labels)`` for one scene.

    ``image`` is float64 in [0, 1]; ``labels`` is int64 with 0 for
    background and ids 1..N in annotation order.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    s = spec.size
    n = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    pts = _place(spec, rng, n)

    yy, xx = np.mgrid[0:s, 0:s].astype(float)
    # rho: normalized elliptical radius per cell (1 on the boundary)
    rho = np.full((n, s, s), np.inf)
    dist = np.full((n, s, s), np.inf)
    mean_r = np.zeros(n)
    for k, (cx, cy) in enumerate(pts):
        a = rng.uniform(*spec.radius_range)
        e = rng.uniform(*spec.eccentricity_range)
        b = a * np.sqrt(1 - e * e)
        t = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
        v = -(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)
        rho[k] = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        dist[k] = np.hypot(xx - cx, yy - cy)
        mean_r[k] = np.sqrt(a * b)

    labels = np.zeros((s, s), dtype=np.int64)
    img = np.full((s, s), spec.background)
    if n:
        inside = rho <= 1.0
        covered = inside.any(axis=0)
        owner = np.where(inside, dist, np.inf).argmin(axis=0)
        labels[covered] = owner[covered] + 1

        r_own = np.take_along_axis(rho, owner[None], axis=0)[0]
        shade = spec.interior_darkness * (0.45 + 0.55 * r_own**2)
        img[covered] -= shade[covered]

        outside_d = (rho - 1.0) * mean_r[:, None, None]
        if spec.halo_width > 0:
            ring = np.clip(1.0 - outside_d / spec.halo_width, 0.0, 1.0)
            ring[outside_d < 0] = 0.0
            halo = spec.halo_brightness * ring.max(axis=0)
            img[~covered] += halo[~covered]

    if spec.blur > 0:
        img = gaussian_filter(img, spec.blur, mode="nearest")
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return img, CentroidAnnotation(f"seed{spec.seed}", [(float(x), float(y)) for x, y in pts]), labels


def write_scene(out_dir, name, image, ann, labels):
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "annotations").mkdir(exist_ok=True)
    (out_dir / "labels").mkdir(exist_ok=True)
    write_image8(out_dir / "images" / f"{name}.png", image)
    save_annotations(ann, out_dir / "annotations" / f"{name}.csv")
    write_labels(out_dir / "labels" / f"{name}.png", labels)
