import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellprop.likelihood import AnnotationError, CentroidAnnotation, load_annotations, render_likelihood


def test_peak_is_one_at_centroid_pixel():
    m = render_likelihood(CentroidAnnotation("a", [(10.0, 12.0)]), 32, 32, 3.0)
    assert m[12, 10] == 1.0
    assert m.max() == 1.0


def test_value_at_distance_sigma():
    m = render_likelihood(CentroidAnnotation("a", [(10.0, 12.0)]), 32, 32, 3.0)
    assert m[12, 13] == pytest.approx(np.exp(-0.5), abs=1e-15)
    assert m[15, 10] == pytest.approx(np.exp(-0.5), abs=1e-15)


def test_two_kernels_combine_by_max():
    sigma = 3.0
    m = render_likelihood(CentroidAnnotation("a", [(10.0, 10.0), (16.0, 10.0)]), 32, 32, sigma)
    assert m[10, 13] == pytest.approx(np.exp(-0.5), abs=1e-15)  # not 2 * exp(-0.5)


def test_off_grid_centroid_normalized_at_nearest_pixel():
    m = render_likelihood(CentroidAnnotation("a", [(10.3, 7.6)]), 32, 32, 2.0)
    assert m[8, 10] == 1.0
    assert np.all(m <= 1.0)


def test_truncated_beyond_four_sigma():
    m = render_likelihood(CentroidAnnotation("a", [(16.0, 16.0)]), 40, 40, 2.0)
    assert m[16, 16 + 9] == 0.0
    assert m[16, 16 + 8] == pytest.approx(np.exp(-64 / 8))


def test_empty_annotation_gives_zero_map():
    assert not np.any(render_likelihood(CentroidAnnotation("a", []), 8, 8, 2.0))


def test_rejects_out_of_bounds_and_bad_sigma():
    with pytest.raises(AnnotationError, match=r"\(40.0, 2.0\)"):
        render_likelihood(CentroidAnnotation("a", [(40.0, 2.0)]), 32, 32, 3.0)
    with pytest.raises(ValueError):
        render_likelihood(CentroidAnnotation("a", []), 32, 32, 0.0)


points = st.lists(st.tuples(st.floats(0, 31), st.floats(0, 23)), max_size=6)


@settings(max_examples=40, deadline=None)
@given(pts=points, data=st.data())
def test_permutation_invariant(pts, data):
    perm = data.draw(st.permutations(pts))
    a = render_likelihood(CentroidAnnotation("a", pts), 32, 24, 2.5)
    b = render_likelihood(CentroidAnnotation("a", list(perm)), 32, 24, 2.5)
    np.testing.assert_array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(pts=points)
def test_range_and_peak(pts):
    m = render_likelihood(CentroidAnnotation("a", pts), 32, 24, 2.5)
    assert m.min() >= 0.0 and m.max() <= 1.0
    assert (m.max() == 1.0) == bool(pts)


@settings(max_examples=30, deadline=None)
@given(pts=st.lists(st.tuples(st.floats(8, 20), st.floats(8, 20)), min_size=1, max_size=4),
       dx=st.integers(-4, 4), dy=st.integers(-4, 4))
def test_translation_equivariance(pts, dx, dy):
    size, sigma = 64, 2.0
    a = render_likelihood(CentroidAnnotation("a", [(x + 20, y + 20) for x, y in pts]), size, size, sigma)
    b = render_likelihood(CentroidAnnotation("a", [(x + 20 + dx, y + 20 + dy) for x, y in pts]), size, size, sigma)
    np.testing.assert_allclose(np.roll(a, (dy, dx), axis=(0, 1)), b, rtol=0, atol=1e-12)


def test_load_simple(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("5.0,7.0\n")
    ann = load_annotations(p, 32, 32)
    assert ann.points == [(5.0, 7.0)]
    assert ann.image_id == "a"


def test_load_empty(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("")
    assert load_annotations(p).points == []


def test_load_header_and_order(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x,y\n5,7\n1.5,2.25\n")
    assert load_annotations(p).points == [(5.0, 7.0), (1.5, 2.25)]


def test_load_malformed_row_reports_line(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x,y\n5,7\n5;7\n")
    with pytest.raises(AnnotationError, match=":3:"):
        load_annotations(p)
    p.write_text("1,2\nfoo,3\n")
    with pytest.raises(AnnotationError, match=":2:"):
        load_annotations(p)


def test_load_out_of_bounds(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("5,40\n")
    with pytest.raises(AnnotationError, match="outside"):
        load_annotations(p, 32, 32)
