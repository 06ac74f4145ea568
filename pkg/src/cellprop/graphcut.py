"""Seeded graph-cut segmentation of individual cells.

Each cell is cut out independently on a 4-connected pixel grid. Pixels where
the cell's own contribution channel is strong are hard foreground seeds;
pixels where any other cell's channel is strong are hard background seeds.
Unseeded pixels are pulled toward the source by the saliency map and toward
the sink by its complement, and neighbors are tied by a contrast-sensitive
smoothness weight.
"""

from __future__ import annotations

import logging
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .contribution import ContributionStack

log = logging.getLogger(__name__)

INF = float("inf")


class FlowGraph:
    """Directed graph with paired residual arcs (arc ``a`` and ``a ^ 1``)."""

    def __init__(self, n_nodes: int, source: int, sink: int):
        if not (0 <= source < n_nodes and 0 <= sink < n_nodes) or source == sink:
            raise ValueError("source and sink must be distinct nodes of the graph")
        self.n = n_nodes
        self.source = source
        self.sink = sink
        self.head: list[int] = []
        self.cap: list[float] = []
        self.adj: list[list[int]] = [[] for _ in range(n_nodes)]
        self.res: list[float] | None = None
        self.grid_shape: tuple[int, int] | None = None

    def add_edge(self, u: int, v: int, cap: float, rev_cap: float = 0.0) -> int:
        if cap < 0 or rev_cap < 0:
            raise ValueError("capacities must be nonnegative")
        a = len(self.head)
        self.head += [v, u]
        self.cap += [float(cap), float(rev_cap)]
        self.adj[u].append(a)
        self.adj[v].append(a + 1)
        return a

    def add_edges(self, us, vs, caps, rev_caps=None):
        if rev_caps is None:
            rev_caps = np.zeros(len(caps))
        for u, v, c, r in zip(np.asarray(us).tolist(), np.asarray(vs).tolist(),
                              np.asarray(caps, float).tolist(), np.asarray(rev_caps, float).tolist()):
            self.add_edge(u, v, c, r)

    def flow(self, a: int) -> float:
        """Net flow on arc ``a`` after solving (negative on a reverse arc)."""
        return self.cap[a] - self.res[a]

    def tail(self, a: int) -> int:
        return self.head[a ^ 1]


def max_flow(graph: FlowGraph) -> tuple[float, np.ndarray]:
    """Maximum s-t flow by shortest augmenting paths (BFS level graph).

    Returns ``(value, source_side)`` where ``source_side`` is a boolean node
    mask of the minimum cut: nodes reachable from the source in the final
    residual graph. The residual capacities stay on ``graph.res``.
    """
    head, adj = graph.head, graph.adj
    res = list(graph.cap)
    graph.res = res
    s, t, n = graph.source, graph.sink, graph.n
    total = 0.0
    while True:
        level = [-1] * n
        level[s] = 0
        q = deque([s])
        while q:
            u = q.popleft()
            for a in adj[u]:
                v = head[a]
                if level[v] < 0 and res[a] > 0:
                    level[v] = level[u] + 1
                    q.append(v)
        if level[t] < 0:
            break
        # blocking flow on the level graph; every path found is a shortest one
        it = [0] * n
        path: list[int] = []
        u = s
        while True:
            if u == t:
                f = min(res[a] for a in path)
                if f == INF:
                    raise ValueError("an infinite-capacity path joins source and sink")
                for a in path:
                    res[a] -= f
                    res[a ^ 1] += f
                total += f
                path.clear()
                u = s
                continue
            arcs = adj[u]
            i = it[u]
            lu = level[u] + 1
            while i < len(arcs):
                a = arcs[i]
                if res[a] > 0 and level[head[a]] == lu:
                    break
                i += 1
            it[u] = i
            if i < len(arcs):
                path.append(arcs[i])
                u = head[arcs[i]]
            else:
                level[u] = -1
                if u == s:
                    break
                a = path.pop()
                u = head[a ^ 1]
                it[u] += 1
    side = np.zeros(n, dtype=bool)
    side[s] = True
    q = deque([s])
    while q:
        u = q.popleft()
        for a in adj[u]:
            v = head[a]
            if not side[v] and res[a] > 0:
                side[v] = True
                q.append(v)
    return total, side


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraphCutParams:
    lam: float = 1.0
    beta: float = 50.0
    seed_frac: float = 0.3
    margin: int = 10
    connectivity: int = 4
    sigma_c: float | None = None  # None: intensity std of the working crop

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lam and beta must be nonnegative")
        if not 0 < self.seed_frac < 1:
            raise ValueError("seed_frac must lie in (0, 1)")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


def saliency_from_image(image, modality: str = "phase-contrast") -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if modality == "phase-contrast":
        return 1.0 - image
    if modality == "direct":
        return image.copy()
    raise ValueError(f"unknown modality {modality!r}; expected 'phase-contrast' or 'direct'")


def _neighbor_pairs(shape, connectivity):
    h, w = shape
    idx = np.arange(h * w).reshape(h, w)
    pairs = [(idx[:, :-1], idx[:, 1:], 1.0), (idx[:-1, :], idx[1:, :], 1.0)]
    if connectivity == 8:
        pairs += [(idx[:-1, :-1], idx[1:, 1:], 2**-0.5), (idx[:-1, 1:], idx[1:, :-1], 2**-0.5)]
    return [(p.ravel(), q.ravel(), s) for p, q, s in pairs]


@dataclass
class SeedInfo:
    fg: np.ndarray
    bg: np.ndarray
    conflicts: int = 0


def seed_masks(fg, bg, params: GraphCutParams, border_bg=False) -> SeedInfo:
    fg = np.asarray(fg, dtype=float)
    bg = np.asarray(bg, dtype=float)
    peak = fg.max() if fg.size else 0.0
    if peak <= 0:
        fg_seed = np.zeros(fg.shape, dtype=bool)
        thr = 0.0
    else:
        thr = params.seed_frac * peak
        fg_seed = fg > thr
    bg_seed = bg > thr if peak > 0 else bg > 0
    if border_bg:
        bg_seed = bg_seed.copy()
        bg_seed[[0, -1], :] = True
        bg_seed[:, [0, -1]] = True
    both = fg_seed & bg_seed
    if both.any():
        log.info("%d pixels seeded both foreground and background; foreground wins", int(both.sum()))
    return SeedInfo(fg_seed, bg_seed & ~fg_seed, int(both.sum()))


def build_cell_graph(image, saliency, fg, bg, params: GraphCutParams = GraphCutParams(), border_bg=False, seeds=None):
    """Flow graph for one cell on the grid of ``image``.

    Node ``r * W + c`` is pixel (r, c); the source and sink follow the
    pixels. Foreground seeds are pixels with ``fg > seed_frac * max(fg)``;
    background seeds use the same threshold on ``bg``. With ``border_bg``
    the outermost ring of pixels is forced to background as well.
    """
    image = np.asarray(image, dtype=float)
    saliency = np.asarray(saliency, dtype=float)
    if not (image.shape == saliency.shape == np.shape(fg) == np.shape(bg)):
        raise ValueError("image, saliency and seed maps must share one shape")
    h, w = image.shape
    npx = h * w
    s, t = npx, npx + 1
    g = FlowGraph(npx + 2, s, t)
    g.grid_shape = (h, w)
    if seeds is None:
        seeds = seed_masks(fg, bg, params, border_bg)

    sal = saliency.ravel()
    src = params.lam * sal
    snk = params.lam * (1.0 - sal)
    fgs, bgs = seeds.fg.ravel(), seeds.bg.ravel()
    src = np.where(fgs, INF, np.where(bgs, 0.0, src))
    snk = np.where(bgs, INF, np.where(fgs, 0.0, snk))
    pix = np.arange(npx)
    keep = src > 0
    g.add_edges(np.full(keep.sum(), s), pix[keep], src[keep])
    keep = snk > 0
    g.add_edges(pix[keep], np.full(keep.sum(), t), snk[keep])

    if params.beta > 0:
        sigma = params.sigma_c if params.sigma_c is not None else float(image.std())
        flat = image.ravel()
        for p, q, scale in _neighbor_pairs((h, w), params.connectivity):
            d2 = (flat[p] - flat[q]) ** 2
            wpq = params.beta * scale * (np.exp(-d2 / (2 * sigma**2)) if sigma > 0 else np.ones_like(d2))
            g.add_edges(p, q, wpq, wpq)
    return g


def _bbox(mask, margin):
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    h, w = mask.shape
    return (
        max(rows[0] - margin, 0),
        min(rows[-1] + margin + 1, h),
        max(cols[0] - margin, 0),
        min(cols[-1] + margin + 1, w),
    )


@dataclass
class CellResult:
    u: int
    mask: np.ndarray
    empty_seed: bool = False
    conflicts: int = 0
    flow: float = 0.0


def segment_cell(image, stack: ContributionStack, u: int, params: GraphCutParams = GraphCutParams(),
                 saliency=None, modality="phase-contrast") -> CellResult:
    """Binary mask of cell ``u`` from a min-cut on a crop around its seeds."""
    image = np.asarray(image, dtype=float)
    if u not in stack.ids:
        raise ValueError(f"cell id {u} is not in the stack (ids {stack.ids[:1]}..{stack.ids[-1:]})")
    if saliency is None:
        saliency = saliency_from_image(image, modality)
    k = stack.ids.index(u)
    fg = stack.projected[k]
    others = np.delete(stack.projected, k, axis=0)
    bg = others.max(axis=0) if len(others) else np.zeros_like(fg)
    seeds = seed_masks(fg, bg, params)
    mask = np.zeros(image.shape, dtype=bool)
    if not seeds.fg.any():
        return CellResult(u, mask, empty_seed=True)

    r0, r1, c0, c1 = _bbox(seeds.fg, params.margin)
    crop = (slice(r0, r1), slice(c0, c1))
    fg_c, bg_c = seeds.fg[crop], seeds.bg[crop].copy()
    h, w = image.shape
    # crop edges that are not image edges act as background seeds
    if r0 > 0:
        bg_c[0, :] = True
    if r1 < h:
        bg_c[-1, :] = True
    if c0 > 0:
        bg_c[:, 0] = True
    if c1 < w:
        bg_c[:, -1] = True
    bg_c &= ~fg_c
    local = SeedInfo(fg_c, bg_c, seeds.conflicts)
    g = build_cell_graph(image[crop], saliency[crop], fg[crop], bg[crop], params, seeds=local)
    value, side = max_flow(g)
    mask[crop] = side[: (r1 - r0) * (c1 - c0)].reshape(r1 - r0, c1 - c0)
    return CellResult(u, mask, conflicts=seeds.conflicts, flow=value)


def fuse_masks(masks, stack: ContributionStack) -> np.ndarray:
    """Instance labeling from per-cell masks.

    A pixel claimed by several masks goes to the claimant with the largest
    projected contribution there, ties to the lowest id.
    """
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim != 3:
        raise ValueError(f"expected (N, H, W) masks, got shape {masks.shape}")
    ids = np.asarray(stack.ids, dtype=np.int64)
    if len(masks) != len(ids):
        raise ValueError(f"{len(masks)} masks for {len(ids)} cells")
    labels = np.zeros(masks.shape[1:], dtype=np.int64)
    if not len(masks):
        return labels
    score = np.where(masks, stack.projected, -np.inf)
    winner = np.argmax(score, axis=0)
    claimed = masks.any(axis=0)
    labels[claimed] = ids[winner[claimed]]
    return labels


@dataclass
class SegmentationReport:
    cells: int = 0
    empty_seeds: list[int] = field(default_factory=list)
    conflicts: int = 0


def _segment_one(args):
    return segment_cell(*args)


def segment_image(image, stack: ContributionStack, params: GraphCutParams = GraphCutParams(),
                  modality="phase-contrast", jobs=1):
    """Segment every cell of the stack and fuse the masks into one labeling."""
    image = np.asarray(image, dtype=float)
    saliency = saliency_from_image(image, modality)
    tasks = [(image, stack, u, params, saliency) for u in stack.ids]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_segment_one, tasks))
    else:
        results = [_segment_one(a) for a in tasks]
    report = SegmentationReport(len(results))
    for r in results:
        if r.empty_seed:
            report.empty_seeds.append(r.u)
        report.conflicts += r.conflicts
    masks = np.stack([r.mask for r in results]) if results else np.zeros((0,) + image.shape, dtype=bool)
    return fuse_masks(masks, stack), masks, report
