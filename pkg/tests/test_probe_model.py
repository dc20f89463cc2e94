import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trusreg.probe_model import (CacheFormatError, FixedPointInside, ProbePose, build_model,
                                 generate_grid, grid_transforms, pose_to_transform,
                                 precompute_cache, read_cache, surface_point, write_cache)
from trusreg.similarity import Box, EvaluationDomain, moving_samples
from trusreg.transform import angular_error
from trusreg.volume import Volume, gradient_magnitude

angles = st.floats(-math.radians(45), math.radians(45))
rolls = st.floats(-math.pi, math.pi)


def sphere_model(radius=20.0, fp=(0, 0, -50.0)):
    box = Box([-radius] * 3, [radius] * 3)
    return build_model(box, fp, (0, 0, -radius), (0, 0, 1))


def prostate_model():
    box = Box([5.4, 10.4, 6.0], [45.4, 40.4, 44.0])
    return build_model(box, box.center - [0, 0, 45.0], (25.4, 25.4, 6.0), (0, 0, 1))


def line_distance(point, origin, direction):
    d = direction / np.linalg.norm(direction)
    r = point - origin
    return float(np.linalg.norm(r - (r @ d) * d))


def test_build_model_semi_axes():
    assert np.array_equal(sphere_model().semi_axes, [20, 20, 20])
    assert np.array_equal(prostate_model().semi_axes, [20, 15, 19])
    assert np.array_equal(prostate_model().ellipsoid_center, [25.4, 25.4, 25.0])


def test_fixed_point_inside():
    with pytest.raises(FixedPointInside):
        build_model(Box([-20] * 3, [20] * 3), (0, 0, 0), (0, 0, -20), (0, 0, 1))


def test_model_invariants():
    with pytest.raises(ValueError):
        build_model(Box([-20] * 3, [20] * 3), (0, 0, -50), (0, 0, -20), (0, 0, 2))


def test_pole_on_near_side():
    assert np.allclose(surface_point(sphere_model(), 0, 0), [0, 0, -20], atol=1e-12)


def test_sphere_quarter_turn():
    m = sphere_model()
    p = surface_point(m, math.pi / 2, 0)
    assert abs(np.linalg.norm(p) - 20) < 1e-9
    assert abs(p @ np.array([0, 0, -20.0])) < 1e-9


@settings(max_examples=200, deadline=None)
@given(angles, angles)
def test_surface_point_on_ellipsoid(a, b):
    m = prostate_model()
    assert abs(m.implicit(surface_point(m, a, b))) < 1e-9


def test_zero_pose_is_identity():
    t = pose_to_transform(prostate_model(), ProbePose(0, 0, 0))
    assert np.allclose(t.rotation, np.eye(3), atol=1e-9)
    assert np.allclose(t.translation, 0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(rolls)
def test_roll_fixes_probe_origin(lam):
    m = prostate_model()
    t = pose_to_transform(m, (0.0, 0.0, lam))
    assert np.allclose(t.apply(m.probe_origin_ref), m.probe_origin_ref, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(angles, angles, rolls)
def test_pose_geometry(a, b, lam):
    m = prostate_model()
    t = pose_to_transform(m, (a, b, lam))
    origin = t.apply(m.probe_origin_ref)
    assert abs(m.implicit(origin)) < 1e-9
    assert np.allclose(origin, surface_point(m, a, b), atol=1e-9)
    assert line_distance(m.fp_rect, origin, t.rotation @ m.probe_axis_ref) < 1e-6


@settings(max_examples=100, deadline=None)
@given(angles, angles, rolls)
def test_roll_is_about_the_probe_axis(a, b, lam):
    m = prostate_model()
    t0 = pose_to_transform(m, (a, b, 0.0))
    t1 = pose_to_transform(m, (a, b, lam))
    axis = t0.rotation @ m.probe_axis_ref
    rel = t1 @ t0.inverse()
    # the relative motion is a rotation by |lam| about the transformed axis
    assert np.allclose(rel.rotation @ axis, axis, atol=1e-9)
    assert abs(angular_error(t0, t1) - abs(math.degrees(lam))) < 1e-6


@settings(max_examples=100, deadline=None)
@given(angles, angles, rolls, st.tuples(*[st.floats(-1e-6, 1e-6)] * 3))
def test_pose_continuity(a, b, lam, d):
    m = prostate_model()
    t0 = pose_to_transform(m, (a, b, lam))
    t1 = pose_to_transform(m, (a + d[0], b + d[1], lam + d[2]))
    assert math.radians(angular_error(t0, t1)) <= 1e-4
    assert np.linalg.norm(t0.translation - t1.translation) <= 1e-3


@settings(max_examples=50, deadline=None)
@given(rolls)
def test_sphere_roll_is_pure_rotation(lam):
    m = sphere_model()
    t = pose_to_transform(m, (0.0, 0.0, lam))
    assert abs(t.translation @ m.probe_axis_ref) < 1e-9


@settings(max_examples=50, deadline=None)
@given(angles, angles, rolls)
def test_roll_has_no_seam(a, b, lam):
    m = prostate_model()
    t0 = pose_to_transform(m, (a, b, lam))
    t1 = pose_to_transform(m, (a, b, lam + 2 * math.pi))
    assert np.allclose(t0.rotation, t1.rotation, atol=1e-9)
    assert np.allclose(t0.translation, t1.translation, atol=1e-9)


def test_default_grid_size_and_order():
    g = generate_grid(prostate_model())
    assert len(g) == 12960 and g.steps == (20, 18, 36)
    lam = g.poses[:36, 2]
    assert np.allclose(np.diff(lam), 2 * math.pi / 36, atol=1e-12)
    assert lam[-1] == pytest.approx(math.pi) and lam[0] > -math.pi
    assert np.all(g.poses[:36, :2] == g.poses[0, :2])
    assert g.poses[36, 1] > g.poses[0, 1] and g.poses[36, 0] == g.poses[0, 0]
    assert g.poses[36 * 18, 0] > g.poses[0, 0]
    assert g.poses[:, :2].min() == pytest.approx(-math.radians(45))
    assert g.poses[:, :2].max() == pytest.approx(math.radians(45))


def test_degenerate_grid():
    g = generate_grid(prostate_model(), 1, 1, 1)
    assert len(g) == 1
    assert g.poses[0].tolist() == [0.0, 0.0, -math.pi + 2 * math.pi]
    with pytest.raises(ValueError):
        generate_grid(prostate_model(), 0, 1, 1)


def small_reference():
    rng = np.random.default_rng(0)
    vol = Volume(rng.random((16, 16, 16)) * 50, [3.2] * 3)
    return vol, gradient_magnitude(vol)


def test_cache_matches_uncached_samples():
    m = prostate_model()
    vol, grad = small_reference()
    grid = generate_grid(m, 4, 3, 6)
    pts = vol.grid.lattice_points()[::37]
    box = Box([5.4, 10.4, 6.0], [45.4, 40.4, 44.0])
    cached = precompute_cache(grid, m, vol, grad, pts, box)
    assert cached.cache.shape == (len(grid), len(pts))
    dom = EvaluationDomain(pts, np.zeros(len(pts)))
    for i, t in enumerate(grid_transforms(m, grid)):
        want = moving_samples(dom, vol, t, box)
        assert np.array_equal(cached.cache.intensity[i], want, equal_nan=True)
        want = moving_samples(dom, grad, t, box)
        assert np.array_equal(cached.cache.gradient[i], want, equal_nan=True)


def test_cache_empty_domain():
    vol, grad = small_reference()
    with pytest.raises(ValueError):
        precompute_cache(generate_grid(prostate_model(), 1, 1, 2), prostate_model(), vol, grad,
                         np.zeros((0, 3)))


def test_cache_file_round_trip(tmp_path):
    m = prostate_model()
    vol, grad = small_reference()
    g = precompute_cache(generate_grid(m, 2, 2, 3), m, vol, grad, vol.grid.lattice_points()[:40])
    write_cache(g.cache, tmp_path / "c.bin")
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:8] == b"VTCACHE1"
    back = read_cache(tmp_path / "c.bin")
    assert np.array_equal(back.intensity, g.cache.intensity, equal_nan=True)
    assert np.array_equal(back.gradient, g.cache.gradient, equal_nan=True)


def test_cache_file_errors(tmp_path):
    (tmp_path / "a").write_bytes(b"NOTCACHE" + bytes(8))
    with pytest.raises(CacheFormatError):
        read_cache(tmp_path / "a")
    (tmp_path / "b").write_bytes(b"VTCACHE1" + (2).to_bytes(4, "little") * 2 + bytes(8))
    with pytest.raises(CacheFormatError):
        read_cache(tmp_path / "b")
