import numpy as np
import pytest

from cellprop.nn import LayerSpec, Network


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_small_net(rng, max_layers=4, max_channels=8, relu=True):
    """Random sequential net of at most ``max_layers`` parameterized/activation layers."""
    kinds = ["conv2d", "relu", "maxpool2x2", "upsample2x"] if relu else ["conv2d", "maxpool2x2", "upsample2x"]
    cin = int(rng.integers(1, 4))
    c = cin
    specs = []
    n = int(rng.integers(2, max_layers + 1))
    pooled = 0
    for i in range(n - 1):
        kind = kinds[int(rng.integers(len(kinds)))]
        if kind == "maxpool2x2" and pooled >= 1:
            kind = "conv2d"
        if kind == "upsample2x" and pooled <= 0:
            kind = "conv2d"
        if kind == "conv2d":
            co = int(rng.integers(1, max_channels + 1))
            specs.append(LayerSpec("conv2d", c, co, int(rng.choice([1, 3]))))
            c = co
        else:
            specs.append(LayerSpec(kind))
            pooled += {"maxpool2x2": 1, "upsample2x": -1}.get(kind, 0)
    specs.append(LayerSpec("output-head", c, int(rng.integers(1, 3)), 1))
    net = Network.initialize(specs, rng)
    for p in net.params:
        if p is not None:
            p["bias"] += rng.normal(0, 0.1, size=p["bias"].shape)
    return net, cin


def fd_gradients(net, x, weights, h=1e-5):
    """Central differences of sum(net(x) * weights) for every parameter entry."""
    out = {}
    for i, name, a in net.parameter_arrays():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            lp = float(np.sum(net(x) * weights))
            a[idx] = orig - h
            lm = float(np.sum(net(x) * weights))
            a[idx] = orig
            g[idx] = (lp - lm) / (2 * h)
        out[i, name] = g
    return out


def rel_err(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
