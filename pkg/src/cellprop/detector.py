"""U-Net likelihood regressor: configuration, training and inference."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .graphcut import saliency_from_image
from .nn import ForwardTrace, LayerSpec, Network, backward_train

log = logging.getLogger(__name__)

# the saliency image is shifted so the mid-gray background sits near zero,
# which keeps zero padding at the borders consistent with the interior
INPUT_OFFSET = 0.5
INPUT_SCALE = 4.0


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


class TilingError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    depth: int = 2
    base_channels: int = 8
    input_size: int = 64
    sigma: float = 3.0
    learning_rate: float = 1e-3
    steps: int = 1500
    batch_size: int = 4
    seed: int = 0
    modality: str = "phase-contrast"

    def __post_init__(self):
        saliency_from_image(np.zeros(1), self.modality)
        for name in ("depth", "base_channels", "input_size", "steps", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.sigma <= 0 or self.learning_rate <= 0:
            raise ValueError("sigma and learning_rate must be positive")
        if self.input_size % (2**self.depth):
            raise ValueError(f"input_size {self.input_size} is not divisible by 2**depth = {2**self.depth}")


def parse_config(text: str, **overrides) -> NetConfig:
    """Parse ``key = value`` lines whose keys are NetConfig field names."""
    types = {f.name: f.type for f in dataclasses.fields(NetConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        cast = {"float": float, "int": int}.get(types[key], str)
        values[key] = cast(val)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return NetConfig(**values)


def format_config(cfg: NetConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))


def unet_specs(depth: int, base: int, in_channels: int = 1) -> list[LayerSpec]:
    """Layer list for a U-Net with nearest-neighbor upsampling in the decoder."""
    specs: list[LayerSpec] = []

    def add(kind, cin=0, cout=0, k=1, inputs=None):
        specs.append(LayerSpec(kind, cin, cout, k, tuple(inputs) if inputs else (len(specs),)))
        return len(specs)  # slot holding this layer's output

    def double_conv(cin, cout):
        add("conv2d", cin, cout, 3)
        add("relu")
        add("conv2d", cout, cout, 3)
        return add("relu")

    skips = []
    cin = in_channels
    for level in range(depth):
        ch = base * 2**level
        skips.append((double_conv(cin, ch), ch))
        add("maxpool2x2")
        cin = ch
    double_conv(cin, base * 2**depth)
    cin = base * 2**depth
    for slot, ch in reversed(skips):
        add("upsample2x")
        add("conv2d", cin, ch, 3)
        up = add("relu")
        add("concat", inputs=(up, slot))
        double_conv(2 * ch, ch)
        cin = ch
    add("output-head", cin, 1, 1)
    return specs


def build_network(cfg: NetConfig, rng: np.random.Generator | None = None) -> Network:
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    meta = {"config": dataclasses.asdict(cfg)}
    return Network.initialize(unet_specs(cfg.depth, cfg.base_channels), rng, meta=meta)


def config_of(net: Network) -> NetConfig:
    return NetConfig(**net.meta["config"])


def prepare(image, modality: str = "phase-contrast") -> np.ndarray:
    """(H, W) image in [0, 1] -> (1, 1, H, W) network input.

    The network sees the saliency image, in which cells are bright, so that
    guided contributions over a cell come out positive.
    """
    x = (saliency_from_image(image, modality) - INPUT_OFFSET) * INPUT_SCALE
    return x[None, None]


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    checksum: str = ""
    seconds: float = 0.0


class Adam:
    def __init__(self, net: Network, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net, self.lr, self.b1, self.b2, self.eps = net, lr, beta1, beta2, eps
        self.t = 0
        self.m = [{k: np.zeros_like(v) for k, v in p.items()} if p else None for p in net.params]
        self.v = [{k: np.zeros_like(v) for k, v in p.items()} if p else None for p in net.params]

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.net.params, grads, self.m, self.v):
            if p is None:
                continue
            for k in p:
                m[k] *= self.b1
                m[k] += (1 - self.b1) * g[k]
                v[k] *= self.b2
                v[k] += (1 - self.b2) * g[k] ** 2
                p[k] -= self.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + self.eps)


def train(cfg: NetConfig, pairs, rng: np.random.Generator | None = None, net: Network | None = None, log_every=100):
    """Fit the network to (image, likelihood map) pairs by minimizing mean MSE.

    Returns ``(network, TrainReport)``. Deterministic for a given ``cfg.seed``
    (or a given ``rng``).
    """
    if not pairs:
        raise ValueError("need at least one training pair")
    s = cfg.input_size
    for i, (img, tgt) in enumerate(pairs):
        if np.shape(img) != (s, s) or np.shape(tgt) != (s, s):
            raise ValueError(f"pair {i} has shapes {np.shape(img)}, {np.shape(tgt)}; expected ({s}, {s})")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    init_rng, batch_rng = rng.spawn(2)
    if net is None:
        net = build_network(cfg, init_rng)
    xs = np.concatenate([prepare(img, cfg.modality) for img, _ in pairs])
    ts = np.stack([np.asarray(t, dtype=np.float64) for _, t in pairs])[:, None]
    opt = Adam(net, cfg.learning_rate)
    report = TrainReport()
    t0 = time.perf_counter()
    b = min(cfg.batch_size, len(pairs))
    for step in range(cfg.steps):
        idx = batch_rng.choice(len(pairs), size=b, replace=False)
        out, trace = net.forward(xs[idx])
        diff = out - ts[idx]
        loss = float(np.mean(diff**2))
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        grads = backward_train(net, trace, 2.0 * diff / diff.size)
        opt.step(grads.params)
        report.losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.6f", step + 1, float(np.mean(report.losses[-log_every:])))
    report.seconds = time.perf_counter() - t0
    report.checksum = net.digest()
    return net, report


# ---------------------------------------------------------------------------
# inference


@dataclass(frozen=True)
class TiledTrace:
    """Traces of the tiles covering an image larger than the network input.

    ``tiles`` holds ``(row, col, trace)``; ``counts`` is the per-pixel number
    of tiles averaged into the prediction.
    """

    tiles: tuple[tuple[int, int, ForwardTrace], ...]
    counts: np.ndarray
    tile_size: int


def tile_origins(n: int, tile: int) -> list[int]:
    if n < tile:
        raise TilingError(f"extent {n} is smaller than the tile size {tile}")
    stride = tile - tile // 4
    origins = list(range(0, n - tile + 1, stride))
    if origins[-1] != n - tile:
        origins.append(n - tile)
    return origins


def infer(net: Network, image, tile_size: int | None = None):
    """Predict the likelihood map of an (H, W) image.

    Returns ``(y, trace)`` with ``y`` clamped to [0, 1]. Images equal to the
    tile size give a plain ForwardTrace; larger ones are covered by tiles with
    25% overlap, averaged, and give a :class:`TiledTrace`.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise TilingError(f"expected a 2-d image, got shape {image.shape}")
    cfg = config_of(net) if "config" in net.meta else None
    modality = cfg.modality if cfg else "phase-contrast"
    if tile_size is None:
        tile_size = cfg.input_size if cfg else image.shape[0]
    h, w = image.shape
    if (h, w) == (tile_size, tile_size):
        out, trace = net.forward(prepare(image, modality))
        return np.clip(out[0, 0], 0.0, 1.0), trace
    rows, cols = tile_origins(h, tile_size), tile_origins(w, tile_size)
    acc = np.zeros((h, w))
    counts = np.zeros((h, w))
    tiles = []
    for r in rows:
        for c in cols:
            out, trace = net.forward(prepare(image[r : r + tile_size, c : c + tile_size], modality))
            acc[r : r + tile_size, c : c + tile_size] += out[0, 0]
            counts[r : r + tile_size, c : c + tile_size] += 1
            tiles.append((r, c, trace))
    counts.setflags(write=False)
    return np.clip(acc / counts, 0.0, 1.0), TiledTrace(tuple(tiles), counts, tile_size)
