import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from seqnav.bevmap import back_project
from seqnav.errors import InvalidSpec
from seqnav.geodesy import fix_to_enu
from seqnav.world import (
    DEFAULT_EXTRINSICS,
    DEFAULT_INTRINSICS,
    POLE,
    ROAD,
    SKY,
    TERRAIN,
    BiasZone,
    Path,
    PathSpec,
    World,
    point_in_polygon,
    sample_gnss,
)


def bare_world(spec=PathSpec("straight", 30.0), obstacles=()):
    return World(Path(spec), obstacles=np.array(obstacles, dtype=np.float64).reshape(-1, 5))


class TestPath:
    def test_straight_geometry(self):
        p = Path(PathSpec("straight", 20.0, heading=0.3))
        assert p.length == 20.0
        np.testing.assert_allclose(p.point_at(10.0), [10 * math.sin(0.3), 10 * math.cos(0.3)], atol=1e-12)
        np.testing.assert_allclose(p.point_at(99.0), p.point_at(20.0))

    def test_arc_matches_circle(self):
        k, L = 0.05, 30.0
        p = Path(PathSpec("arc", L, heading=0.0, curvature=k))
        # bearing k*s, clockwise turn of radius 1/k starting north
        s = L
        expected = [(1 - math.cos(k * s)) / k, math.sin(k * s) / k]
        np.testing.assert_allclose(p.point_at(s), expected, atol=1e-5)

    def test_s_curve_returns_to_heading(self):
        spec = PathSpec("s_curve", 40.0, heading=0.2, wavelength=40.0)
        assert float(spec.bearing_at(40.0)) == pytest.approx(0.2, abs=1e-12)
        assert float(spec.bearing_at(10.0)) > 0.2

    def test_invalid(self):
        with pytest.raises(InvalidSpec):
            Path(PathSpec("loop", 10.0))
        with pytest.raises(InvalidSpec):
            Path(PathSpec("straight", 0.0))

    @given(st.floats(0.5, 29.5), st.floats(-5.0, 5.0))
    def test_projection_signed_right(self, s, off):
        p = Path(PathSpec("straight", 30.0, heading=0.0))
        along, signed = p.project(np.array([off, s]))
        assert along[0] == pytest.approx(s, abs=1e-9)
        assert signed[0] == pytest.approx(off, abs=1e-9)

    def test_projection_beyond_end(self):
        p = Path(PathSpec("straight", 10.0))
        along, signed = p.project(np.array([[0.0, 13.0], [0.0, -4.0]]))
        np.testing.assert_allclose(along, [10.0, 0.0])
        np.testing.assert_allclose(np.abs(signed), [3.0, 4.0])

    def test_cross_track_zero_on_centre_line(self):
        p = Path(PathSpec("s_curve", 40.0))
        assert p.cross_track(p.xy[::7]).max() < 1e-9

    def test_route_points(self):
        p = Path(PathSpec("straight", 12.0))
        pts = p.route_points(5.0)
        np.testing.assert_allclose(pts[:, 1], [5.0, 10.0, 12.0], atol=1e-12)


class TestRender:
    def test_ground_pixels_lie_on_ground(self):
        w = bare_world()
        rgb, depth, labels = w.render((0.0, 5.0, math.pi / 2), DEFAULT_INTRINSICS, DEFAULT_EXTRINSICS)
        ground = (labels == ROAD) | (labels == TERRAIN)
        pts, _ = back_project(depth, DEFAULT_INTRINSICS, DEFAULT_EXTRINSICS, mask=ground)
        assert len(pts) > 100
        assert np.abs(pts[:, 2]).max() < 1e-4

    def test_road_ahead_sky_above(self):
        w = bare_world()
        _, depth, labels = w.render((0.0, 5.0, math.pi / 2), DEFAULT_INTRINSICS, DEFAULT_EXTRINSICS)
        h, wd = labels.shape
        assert labels[-1, wd // 2] == ROAD
        assert np.any(labels[h // 2:, 0] == TERRAIN) and np.any(labels[h // 2:, -1] == TERRAIN)
        assert labels[0, wd // 2] == SKY and depth[0, wd // 2] == 0.0

    def test_obstacle_blocks_view(self):
        w = bare_world(obstacles=[(0.0, 10.0, 0.3, 3.0, POLE)])
        _, depth, labels = w.render((0.0, 5.0, math.pi / 2), DEFAULT_INTRINSICS, DEFAULT_EXTRINSICS)
        v = np.argmax(labels[:, 32] == POLE)
        assert labels[v, 32] == POLE
        pts, px = back_project(depth, DEFAULT_INTRINSICS, DEFAULT_EXTRINSICS, mask=labels == POLE)
        # front surface of a 0.3 m pole 5 m ahead
        assert np.min(np.hypot(pts[:, 0], pts[:, 1])) == pytest.approx(4.7, abs=0.05)

    def test_deterministic_and_noise(self):
        w = bare_world()
        a = w.render((0.0, 1.0, 1.4), DEFAULT_INTRINSICS, DEFAULT_EXTRINSICS)
        b = w.render((0.0, 1.0, 1.4), DEFAULT_INTRINSICS, DEFAULT_EXTRINSICS)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
        with pytest.raises(ValueError):
            w.render((0.0, 1.0, 1.4), DEFAULT_INTRINSICS, DEFAULT_EXTRINSICS, None, 3.0)
        noisy = w.render((0.0, 1.0, 1.4), DEFAULT_INTRINSICS, DEFAULT_EXTRINSICS, np.random.default_rng(0), 3.0)
        assert noisy[0].tobytes() != a[0].tobytes() and noisy[2].tobytes() == a[2].tobytes()

    def test_generated_obstacles_off_road(self):
        w = World.generate(PathSpec("s_curve", 40.0), np.random.default_rng(4), n_obstacles=20)
        d = w.path.cross_track(w.obstacles[:, :2])
        assert np.all(d - w.obstacles[:, 2] > w.road_half_width)


class TestGnss:
    def test_zero_noise_is_exact(self):
        w = bare_world()
        fix = sample_gnss(w, 1.5, 7.0, None)
        np.testing.assert_allclose(fix_to_enu(w.origin, fix), [1.5, 7.0], atol=1e-6)

    def test_noise_needs_rng(self):
        with pytest.raises(ValueError):
            sample_gnss(bare_world(), 0.0, 0.0, None, sigma=1.0)

    def test_bias_zone_shifts_right(self):
        w = bare_world()
        zone = BiasZone.across_path(w.path, 10.0, 20.0, 5.0)
        assert zone.contains(0.0, 15.0) and not zone.contains(0.0, 25.0)
        inside = fix_to_enu(w.origin, sample_gnss(w, 0.0, 15.0, None, zones=[zone]))
        outside = fix_to_enu(w.origin, sample_gnss(w, 0.0, 25.0, None, zones=[zone]))
        np.testing.assert_allclose(inside, [5.0, 15.0], atol=1e-6)
        np.testing.assert_allclose(outside, [0.0, 25.0], atol=1e-6)
        assert w.path.project(np.array(inside))[1][0] == pytest.approx(5.0, abs=1e-6)

    def test_noise_statistics(self):
        w = bare_world()
        rng = np.random.default_rng(1)
        pts = np.array([fix_to_enu(w.origin, sample_gnss(w, 0.0, 0.0, rng, sigma=2.0)) for _ in range(2000)])
        assert np.abs(pts.mean(axis=0)).max() < 0.2
        np.testing.assert_allclose(pts.std(axis=0), 2.0, rtol=0.08)


def test_point_in_polygon():
    square = np.array([(0, 0), (2, 0), (2, 2), (0, 2)], dtype=float)
    assert point_in_polygon((1, 1), square)
    assert not point_in_polygon((3, 1), square)
    assert not point_in_polygon((1, -0.1), square)
