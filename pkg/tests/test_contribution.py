import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellprop.contribution import (
    cell_contribution,
    cell_contributions,
    contribution_stack,
    max_projection,
    seed_from_region,
)
from cellprop.detector import NetConfig, build_network, infer, prepare
from cellprop.nn import LayerSpec, Network
from cellprop.peaks import CenterRegion, detect_centers


def region(u, pixels):
    px = np.array(pixels)
    return CenterRegion(u, px, 1.0, (float(px[:, 1].mean()), float(px[:, 0].mean())))


def test_seed_keeps_region_only():
    y = np.arange(16.0).reshape(4, 4)
    s = seed_from_region(y, region(1, [(1, 1), (1, 2)]))
    assert s[1, 1] == 5 and s[1, 2] == 6 and s.sum() == 11


@pytest.fixture
def small_net(rng):
    net = build_network(NetConfig(base_channels=2, input_size=16), rng)
    for p in net.params:
        if p is not None:
            p["bias"] += 0.05
    return net


def test_zero_likelihood_in_region_gives_zero_map(small_net, rng):
    img = rng.random((16, 16))
    y, trace = infer(small_net, img)
    y = y.copy()
    reg = region(1, [(4, 4), (4, 5)])
    y[4, 4:6] = 0.0
    assert not np.any(cell_contribution(small_net, trace, y, reg))


def test_maps_nonnegative_and_independent_of_order(small_net, rng):
    img = rng.random((16, 16))
    y, trace = infer(small_net, img)
    regs = [region(1, [(3, 3), (3, 4)]), region(2, [(10, 11), (11, 11)]), region(3, [(7, 1), (8, 1)])]
    a = cell_contributions(small_net, trace, np.ones_like(y), regs)
    b = cell_contributions(small_net, trace, np.ones_like(y), regs[::-1])
    assert np.all(a >= 0)
    np.testing.assert_array_equal(a, b[::-1])
    for k, r in enumerate(regs):
        np.testing.assert_array_equal(a[k], cell_contribution(small_net, trace, np.ones_like(y), r))


def test_support_within_receptive_field(rng):
    # two 3x3 convs: the receptive field of one output pixel is a 5x5 window
    specs = [LayerSpec("conv2d", 1, 3, 3), LayerSpec("relu"), LayerSpec("conv2d", 3, 2, 3),
             LayerSpec("relu"), LayerSpec("output-head", 2, 1, 1)]
    net = Network.initialize(specs, rng)
    for p in net.params:
        if p is not None:
            # nonnegative weights: every gate opens, so the map fills the window
            p["weight"] = np.abs(p["weight"])
            p["bias"] += 0.5
    img = rng.random((12, 12))
    y, trace = infer(net, img, tile_size=12)
    reg = region(1, [(6, 5)])
    m = cell_contribution(net, trace, np.ones_like(y), reg)
    # brute force: which input pixels can change the seeded output at all
    base = net(prepare(img))[0, 0, 6, 5]
    reach = np.zeros(img.shape, bool)
    for r in range(12):
        for c in range(12):
            bumped = img.copy()
            bumped[r, c] += 0.5
            reach[r, c] = net(prepare(bumped))[0, 0, 6, 5] != base
    assert m.any() and not np.any(m[~reach])
    window = np.zeros(img.shape, bool)
    window[4:9, 3:8] = True
    assert not np.any(reach & ~window)


def test_stack_from_detections(small_net, rng):
    img = rng.random((16, 16))
    y, trace = infer(small_net, img)
    regs = detect_centers(np.maximum(y, 0), 0.05, min_area=1)[:3]
    if not regs:
        regs = [region(1, [(2, 2)])]
    st_ = contribution_stack(small_net, trace, np.ones_like(y), regs)
    assert st_.ids == tuple(r.u for r in regs)
    assert st_.raw.shape == (len(regs), 16, 16)
    np.testing.assert_array_equal(st_.channel(regs[0].u), st_.projected[0])
    empty = contribution_stack(small_net, trace, y, [])
    assert len(empty) == 0 and empty.projected.shape == (0, 16, 16)


# -- max projection ----------------------------------------------------------


def brute_projection(raw):
    out = np.zeros_like(raw)
    n, h, w = raw.shape
    for r in range(h):
        for c in range(w):
            best = 0
            for k in range(1, n):
                if raw[k, r, c] > raw[best, r, c]:
                    best = k
            out[best, r, c] = raw[best, r, c]
    return out


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(1, 5), ties=st.booleans())
def test_projection_matches_brute_force(seed, n, ties):
    rng = np.random.default_rng(seed)
    raw = rng.random((n, 8, 8))
    if ties:
        raw = np.round(raw * 3) / 3  # many exact ties, including zeros
    p = max_projection(raw)
    np.testing.assert_array_equal(p, brute_projection(raw))
    assert np.all(np.count_nonzero(p, axis=0) <= 1)
    np.testing.assert_array_equal(max_projection(p), p)
    np.testing.assert_allclose(max_projection(2.5 * raw), 2.5 * p, rtol=1e-15, atol=0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(1, 5))
def test_projection_permutation_equivariant(seed, n):
    rng = np.random.default_rng(seed)
    raw = rng.random((n, 8, 8))  # continuous values, so no ties
    perm = rng.permutation(n)
    np.testing.assert_array_equal(max_projection(raw[perm]), max_projection(raw)[perm])


def test_projection_examples():
    raw = np.array([[[0.2, 0.0]], [[0.5, 0.0]]])
    np.testing.assert_array_equal(max_projection(raw), [[[0.0, 0.0]], [[0.5, 0.0]]])
    tie = np.array([[[0.3]], [[0.3]]])
    np.testing.assert_array_equal(max_projection(tie), [[[0.3]], [[0.0]]])
    with pytest.raises(ValueError):
        max_projection(np.zeros((0, 4, 4)))
