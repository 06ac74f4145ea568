"""Per-cell contribution maps by guided backpropagation, and their projection.

Each detected center region seeds a guided backward pass through the trace
recorded when the likelihood map was inferred. The resulting input-shaped
maps are rectified and then made spatially disjoint: every pixel keeps its
value only in the channel of the cell that contributes most to it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ForwardTrace, Network, backward_guided
from .peaks import CenterRegion


@dataclass(frozen=True)
class ContributionStack:
    ids: tuple[int, ...]
    raw: np.ndarray  # (N, H, W), rectified guided maps
    projected: np.ndarray  # (N, H, W), winner-takes-pixel

    def __len__(self):
        return len(self.ids)

    def channel(self, u: int) -> np.ndarray:
        return self.projected[self.ids.index(u)]


def seed_from_region(y, region: CenterRegion) -> np.ndarray:
    """Copy of ``y`` inside the region, zero everywhere else."""
    y = np.asarray(y, dtype=float)
    seed = np.zeros_like(y)
    rr, cc = region.pixels[:, 0], region.pixels[:, 1]
    seed[rr, cc] = y[rr, cc]
    return seed


def _guided(net, trace, seeds):
    """Guided maps for a (N, H, W) batch of output seeds.

    ``trace`` is a ForwardTrace or a tiled trace from ``detector.infer``.
    """
    if isinstance(trace, ForwardTrace):
        return backward_guided(net, trace, seeds[:, None])[:, 0]
    out = np.zeros_like(seeds)
    t = trace.tile_size
    for r, c, tr in trace.tiles:
        # the prediction averages overlapping tiles, so each tile sees seed / count
        part = seeds[:, r : r + t, c : c + t] / trace.counts[r : r + t, c : c + t]
        out[:, r : r + t, c : c + t] += backward_guided(net, tr, part[:, None])[:, 0]
    return out


def cell_contributions(net: Network, trace, y, regions: list[CenterRegion]) -> np.ndarray:
    """Rectified guided maps, one per region, stacked as (N, H, W)."""
    y = np.asarray(y, dtype=float)
    if not regions:
        return np.zeros((0,) + y.shape)
    seeds = np.stack([seed_from_region(y, r) for r in regions])
    return np.maximum(_guided(net, trace, seeds), 0.0)


def cell_contribution(net: Network, trace, y, region: CenterRegion) -> np.ndarray:
    return cell_contributions(net, trace, y, [region])[0]


def max_projection(raw) -> np.ndarray:
    """Keep each pixel's value only in its argmax channel (lowest index on ties)."""
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 3 or len(raw) == 0:
        raise ValueError(f"expected a nonempty (N, H, W) stack, got shape {raw.shape}")
    winner = np.argmax(raw, axis=0)
    keep = np.arange(len(raw))[:, None, None] == winner[None]
    return np.where(keep, raw, 0.0)


def contribution_stack(net, trace, y, regions) -> ContributionStack:
    raw = cell_contributions(net, trace, y, regions)
    proj = max_projection(raw) if len(raw) else raw.copy()
    return ContributionStack(tuple(r.u for r in regions), raw, proj)
