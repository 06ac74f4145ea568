"""Dense tensor layers with forward tracing, training backward and guided backward.

Tensors are plain numpy arrays laid out as (batch, channels, height, width).
A network is a fixed list of :class:`LayerSpec` entries whose inputs refer to
slots of an activation list: slot 0 is the network input and slot ``i + 1``
holds the output of layer ``i``. That is enough to express a U-Net with skip
concatenations and nothing more general.

Three evaluation modes share the layer code:

* ``Network.forward`` evaluates the net and optionally records a
  :class:`ForwardTrace`.
* :func:`backward_train` returns true gradients for every parameter and for
  the input.
* :func:`backward_guided` propagates a seed like the training pass except at
  ReLUs, where a value passes only when both the recorded forward value and
  the incoming backward value are strictly positive.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

KINDS = ("conv2d", "relu", "maxpool2x2", "upsample2x", "concat", "output-head")
_PARAM_KINDS = ("conv2d", "output-head")
_MAGIC = b"CPNET\x00\x01\x00"


class ShapeError(ValueError):
    pass


class TraceMismatchError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    inputs: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in _PARAM_KINDS:
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ValueError(f"{self.kind} needs an odd kernel, got {self.kernel}")
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError(f"{self.kind} needs positive channel counts")
        object.__setattr__(self, "inputs", tuple(int(i) for i in self.inputs))

    @property
    def has_params(self) -> bool:
        return self.kind in _PARAM_KINDS


@dataclass(frozen=True)
class LayerRecord:
    inputs: tuple[np.ndarray, ...]
    output: np.ndarray


@dataclass(frozen=True)
class ForwardTrace:
    """Read-only record of one forward evaluation.

    ``records[i]`` holds the inputs and output of layer ``i``. The arrays
    are flagged non-writeable, so one trace can serve any number of guided
    backward passes.
    """

    specs: tuple[LayerSpec, ...]
    digest: str
    input: np.ndarray
    records: tuple[LayerRecord, ...]

    @property
    def output(self) -> np.ndarray:
        return self.records[-1].output


@dataclass
class TraceBuilder:
    records: list[LayerRecord] = field(default_factory=list)

    def add(self, inputs, output):
        frozen = []
        for a in (*inputs, output):
            a.setflags(write=False)
            frozen.append(a)
        self.records.append(LayerRecord(tuple(frozen[:-1]), frozen[-1]))

    def finish(self, specs, digest, x) -> ForwardTrace:
        return ForwardTrace(tuple(specs), digest, x, tuple(self.records))


# ---------------------------------------------------------------------------
# layer primitives


def _im2col(x, k):
    """(C*k*k, B*H*W) patch matrix for a same-padded stride-1 convolution."""
    b, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))).transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, b, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(c * k * k, b * h * w)


def conv2d(x, weight, bias=None):
    """Stride-1 convolution with zero same-padding (odd kernels only)."""
    b, ci, h, w = x.shape
    co, _, k, _ = weight.shape
    if k == 1:
        cols = x.transpose(1, 0, 2, 3).reshape(ci, b * h * w)
    else:
        cols = _im2col(x, k)
    out = (weight.reshape(co, -1) @ cols).reshape(co, b, h, w)
    if bias is not None:
        out += bias[:, None, None, None]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _conv_backward(x, weight, g, want_params):
    flipped = weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
    gx = conv2d(g, np.ascontiguousarray(flipped))
    if not want_params:
        return gx, None
    co, ci, k, _ = weight.shape
    g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
    cols = x.transpose(1, 0, 2, 3).reshape(ci, -1) if k == 1 else _im2col(x, k)
    gw = (g2 @ cols.T).reshape(weight.shape)
    return gx, {"weight": gw, "bias": g.sum(axis=(0, 2, 3))}


def _pool_windows(x):
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)


def maxpool2x2(x):
    return _pool_windows(x).max(axis=-1)


def _maxpool_backward(x, g):
    # ties route to the first maximal element of each window
    win = _pool_windows(x)
    first = np.argmax(win, axis=-1)
    mask = np.arange(4) == first[..., None]
    gw = mask * g[..., None]
    b, c, h2, w2, _ = gw.shape
    return gw.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)


def upsample2x(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def _upsample_backward(g):
    b, c, h, w = g.shape
    return g.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def guided_relu_gate(forward_value, incoming):
    """Backward value at a ReLU under guided propagation.

    Passes ``incoming`` only where both the forward value and ``incoming``
    are strictly positive; zero elsewhere.
    """
    return np.where((forward_value > 0) & (incoming > 0), incoming, 0.0)


# ---------------------------------------------------------------------------


def _where(spec, index):
    return f"layer {index} ({spec.kind})"


def _check_inputs(spec, index, inputs):
    for a in inputs:
        if a.ndim != 4:
            raise ShapeError(f"{_where(spec, index)}: expected a 4-d tensor, got shape {a.shape}")
    x = inputs[0]
    if spec.has_params and x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"{_where(spec, index)}: expected {spec.in_channels} input channels, got shape {x.shape}"
        )
    if spec.kind == "maxpool2x2" and (x.shape[2] % 2 or x.shape[3] % 2):
        raise ShapeError(f"{_where(spec, index)}: spatial dims must be even, got shape {x.shape}")
    if spec.kind == "concat":
        if len(inputs) != 2:
            raise ShapeError(f"{_where(spec, index)}: concat takes two inputs, got {len(inputs)}")
        a, b = inputs
        if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ShapeError(f"{_where(spec, index)}: cannot concatenate shapes {a.shape} and {b.shape}")
    elif len(inputs) != 1:
        raise ShapeError(f"{_where(spec, index)}: takes one input, got {len(inputs)}")


def forward(layer: LayerSpec, inputs, params=None, trace: TraceBuilder | None = None, index: int = 0):
    """Evaluate one layer. ``inputs`` is a tensor or a tuple of tensors (concat)."""
    if isinstance(inputs, np.ndarray):
        inputs = (inputs,)
    inputs = tuple(inputs)
    _check_inputs(layer, index, inputs)
    x = inputs[0]
    kind = layer.kind
    if kind in _PARAM_KINDS:
        out = conv2d(x, params["weight"], params["bias"])
    elif kind == "relu":
        out = np.maximum(x, 0.0)
    elif kind == "maxpool2x2":
        out = maxpool2x2(x)
    elif kind == "upsample2x":
        out = upsample2x(x)
    else:
        out = np.concatenate(inputs, axis=1)
    if trace is not None:
        trace.add(inputs, out)
    return out


def _layer_backward(spec, params, rec, g, guided, want_params):
    kind = spec.kind
    if kind in _PARAM_KINDS:
        gx, pg = _conv_backward(rec.inputs[0], params["weight"], g, want_params)
        return (gx,), pg
    if kind == "relu":
        f = rec.inputs[0]
        if guided:
            return (guided_relu_gate(f, g),), None
        return (np.where(f > 0, g, 0.0),), None
    if kind == "maxpool2x2":
        return (_maxpool_backward(rec.inputs[0], g),), None
    if kind == "upsample2x":
        return (_upsample_backward(g),), None
    split = rec.inputs[0].shape[1]
    return (g[:, :split], g[:, split:]), None


class Network:
    """Fixed-topology network: layer specs plus per-layer parameters."""

    def __init__(self, specs, params=None, meta=None):
        self.specs = tuple(s if s.inputs else replace(s, inputs=(i,)) for i, s in enumerate(specs))
        for i, s in enumerate(self.specs):
            if any(j < 0 or j > i for j in s.inputs):
                raise ValueError(f"layer {i} ({s.kind}) refers to a later slot: {s.inputs}")
        if params is None:
            params = [None] * len(self.specs)
        self.params = list(params)
        self.meta = dict(meta or {})

    @classmethod
    def initialize(cls, specs, rng: np.random.Generator, dtype=np.float64, meta=None):
        """Fan-in scaled Gaussian weights, zero biases."""
        params = []
        for s in specs:
            if s.has_params:
                fan_in = s.in_channels * s.kernel * s.kernel
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(s.out_channels, s.in_channels, s.kernel, s.kernel))
                params.append({"weight": w.astype(dtype), "bias": np.zeros(s.out_channels, dtype=dtype)})
            else:
                params.append(None)
        return cls(specs, params, meta)

    def parameter_arrays(self):
        """(layer index, name, array) for every parameter, in storage order."""
        out = []
        for i, p in enumerate(self.params):
            if p is not None:
                out.append((i, "weight", p["weight"]))
                out.append((i, "bias", p["bias"]))
        return out

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for _, _, a in self.parameter_arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def forward(self, x, record=True):
        """Return ``(output, trace)``; the trace is None when not recording."""
        x = np.array(x, copy=True) if record else np.asarray(x)
        builder = TraceBuilder() if record else None
        acts = [x]
        for i, (s, p) in enumerate(zip(self.specs, self.params)):
            ins = tuple(acts[j] for j in s.inputs)
            acts.append(forward(s, ins, p, builder, index=i))
        trace = builder.finish(self.specs, self.digest(), x) if record else None
        return acts[-1], trace

    def __call__(self, x):
        return self.forward(x, record=False)[0]

    # -- serialization ------------------------------------------------------

    def save(self, path):
        arrays = self.parameter_arrays()
        header = {
            "layers": [asdict(s) for s in self.specs],
            "arrays": [[i, name, list(a.shape)] for i, name, a in arrays],
            "meta": self.meta,
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for _, _, a in arrays:
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        if raw[:8] != _MAGIC or len(raw) < 12:
            raise ModelFormatError(f"{path}: not a network file")
        (n,) = struct.unpack("<I", raw[8:12])
        try:
            header = json.loads(raw[12 : 12 + n].decode())
            specs = [LayerSpec(**{**d, "inputs": tuple(d["inputs"])}) for d in header["layers"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise ModelFormatError(f"{path}: corrupt header ({exc})") from None
        params = [None] * len(specs)
        off = 12 + n
        for i, name, shape in header["arrays"]:
            count = int(np.prod(shape))
            chunk = raw[off : off + 8 * count]
            if len(chunk) != 8 * count:
                raise ModelFormatError(f"{path}: truncated parameter data")
            a = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
            params[i] = params[i] or {}
            params[i][name] = a
            off += 8 * count
        if off != len(raw):
            raise ModelFormatError(f"{path}: {len(raw) - off} trailing bytes")
        for i, s in enumerate(specs):
            if s.has_params != (params[i] is not None):
                raise ModelFormatError(f"{path}: parameters missing for layer {i}")
        return cls(specs, params, header.get("meta"))


# ---------------------------------------------------------------------------
# backward passes


@dataclass
class Gradients:
    params: list  # per layer: {"weight", "bias"} or None
    input: np.ndarray


def _check_trace(net, trace):
    if trace.specs != net.specs:
        raise TraceMismatchError("trace was recorded with a different layer list")
    if trace.digest != net.digest():
        raise TraceMismatchError("trace was recorded with different parameters")


def _backward(net, trace, grad, guided, want_params):
    _check_trace(net, trace)
    out = trace.output
    if grad.shape[1:] != out.shape[1:] or (not guided and grad.shape != out.shape):
        raise ShapeError(f"seed gradient shape {grad.shape} does not match output shape {out.shape}")
    n = len(net.specs)
    grads = [None] * (n + 1)
    grads[n] = grad
    pgrads = [None] * n
    for i in reversed(range(n)):
        g = grads[i + 1]
        if g is None:
            continue
        spec = net.specs[i]
        in_grads, pg = _layer_backward(spec, net.params[i], trace.records[i], g, guided, want_params)
        pgrads[i] = pg
        for slot, ig in zip(spec.inputs, in_grads):
            grads[slot] = ig if grads[slot] is None else grads[slot] + ig
    gx = grads[0] if grads[0] is not None else np.zeros_like(trace.input)
    return gx, pgrads


def backward_train(net: Network, trace: ForwardTrace, loss_grad) -> Gradients:
    """Gradients of a scalar loss given its gradient w.r.t. the network output."""
    loss_grad = np.asarray(loss_grad, dtype=trace.output.dtype)
    gx, pgrads = _backward(net, trace, loss_grad, guided=False, want_params=True)
    for i, s in enumerate(net.specs):
        if s.has_params and pgrads[i] is None:
            p = net.params[i]
            pgrads[i] = {k: np.zeros_like(v) for k, v in p.items()}
    return Gradients(pgrads, gx)


def backward_guided(net: Network, trace: ForwardTrace, seed_grad) -> np.ndarray:
    """Guided propagation of ``seed_grad`` from the output back to the input.

    ``seed_grad`` may carry a larger batch than the trace when the trace
    holds a single image: each batch entry is then an independent seed
    propagated through the same recorded forward pass.
    """
    seed_grad = np.asarray(seed_grad, dtype=trace.output.dtype)
    if seed_grad.shape[0] != trace.output.shape[0] and trace.output.shape[0] != 1:
        raise ShapeError(f"seed batch {seed_grad.shape[0]} cannot broadcast against trace batch {trace.output.shape[0]}")
    gx, _ = _backward(net, trace, seed_grad, guided=True, want_params=False)
    if gx.shape[0] != seed_grad.shape[0]:
        gx = np.broadcast_to(gx, (seed_grad.shape[0],) + gx.shape[1:]).copy()
    return gx
