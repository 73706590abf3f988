import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqnav.bevmap import (
    DEFAULT_GRID,
    CameraIntrinsics,
    CameraToRobot,
    GridSpec,
    back_project,
    build_bev,
    colorize,
    ema_fuse,
    grid_index,
    pool_grid,
    reproject,
    splat,
)
from seqnav.errors import AlphaOutOfRange, ClassOutOfRange, DimensionMismatch

INTR_4 = CameraIntrinsics(2.0, 2.0, 2.0, 2.0, 4, 4)


def random_extrinsics(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
    return CameraToRobot(rot, rng.normal(size=3))


class TestBackProject:
    def test_principal_point(self):
        depth = np.zeros((4, 4))
        depth[2, 2] = 2.0
        pts, pix = back_project(depth, INTR_4, CameraToRobot.identity())
        np.testing.assert_array_equal(pts, [[0.0, 0.0, 2.0]])
        np.testing.assert_array_equal(pix, [[2, 2]])

    def test_all_invalid(self):
        depth = np.full((4, 4), np.nan)
        depth[0, 0] = 0.0
        depth[1, 1] = -1.0
        pts, pix = back_project(depth, INTR_4, CameraToRobot.identity())
        assert pts.shape == (0, 3) and pix.shape == (0, 2)

    def test_four_by_four_closed_form(self):
        depth = 1.0 + np.arange(16, dtype=np.float64).reshape(4, 4) / 4.0
        ext = CameraToRobot.from_mount(height=0.5, pitch=0.0)
        pts, pix = back_project(depth, INTR_4, ext)
        assert len(pts) == 16
        # hand form: optical (xc, yc, zc) -> robot (zc, -xc, 0.5 - yc)
        for k, (u, v) in enumerate(pix):
            d = depth[v, u]
            xc, yc = (u - 2.0) * d / 2.0, (v - 2.0) * d / 2.0
            np.testing.assert_allclose(pts[k], [d, -xc, 0.5 - yc], atol=1e-15)
        # row-major order
        np.testing.assert_array_equal(pix[:5], [[0, 0], [1, 0], [2, 0], [3, 0], [0, 1]])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            back_project(np.ones((3, 4)), INTR_4, CameraToRobot.identity())

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        intr = CameraIntrinsics.from_fov(64, 32, math.radians(90))
        for _ in range(20):
            ext = random_extrinsics(rng)
            depth = rng.uniform(0.5, 30.0, size=(32, 64))
            pts, pix = back_project(depth, intr, ext)
            err = np.abs(reproject(pts, intr, ext) - pix)
            assert err.max() < 1e-6


class TestGridIndex:
    def test_lower_corner(self):
        assert grid_index((0.01, -16.0)) == (0, 0)

    def test_upper_corner(self):
        # floor(15.99 / 0.125) = floor(127.92); floor(31.99 / 0.125) = floor(255.92)
        assert grid_index((15.99, 15.99)) == (127, 255)

    @pytest.mark.parametrize("p", [(-1.0, 0.0), (0.0, 0.0), (16.0, 0.0), (5.0, 16.0), (5.0, -16.01)])
    def test_absent(self, p):
        assert grid_index(p) is None

    def test_cell_centers_identity(self):
        spec = DEFAULT_GRID
        for i in range(spec.rows):
            for j in range(spec.cols):
                assert grid_index(spec.cell_center(i, j), spec) == (i, j)


class TestSplat:
    def test_empty(self):
        g = splat(np.zeros((0, 3)), np.zeros(0, dtype=int))
        assert g.shape == (128, 256, 20) and not g.any()

    def test_single_point(self):
        p = DEFAULT_GRID.cell_center(10, 128)
        g = splat(np.array([[p[0], p[1], 0.0]]), np.array([3]))
        assert np.count_nonzero(g) == 1
        assert g[10, 128, 3] == 1.0

    def test_majority(self):
        x, y = DEFAULT_GRID.cell_center(40, 7)
        pts = np.array([[x, y, 0.0], [x + 0.01, y, 0.0], [x, y - 0.01, 0.0]])
        # brute-force over the multiset {2, 2, 7}
        labels = [2, 2, 7]
        counts = {c: labels.count(c) for c in set(labels)}
        expected = min(c for c in counts if counts[c] == max(counts.values()))
        g = splat(pts, np.array(labels))
        assert expected == 2
        assert g[40, 7].tolist() == np.eye(20)[2].tolist()

    def test_tie_breaks(self):
        x, y = DEFAULT_GRID.cell_center(3, 3)
        pts = np.array([[x, y, 0.0], [x, y, 0.0]])
        assert splat(pts, np.array([5, 1]))[3, 3, 1] == 1.0
        assert splat(pts, np.array([5, 1]), tie_break="higher")[3, 3, 5] == 1.0

    def test_max_reducer(self):
        x, y = DEFAULT_GRID.cell_center(3, 3)
        g = splat(np.array([[x, y, 0.0], [x, y, 0.0]]), np.array([5, 1]), reducer="max")
        assert g[3, 3].sum() == 2.0

    def test_class_out_of_range(self):
        with pytest.raises(ClassOutOfRange):
            splat(np.array([[1.0, 0.0, 0.0]]), np.array([20]))

    def test_height_ceiling(self):
        g = splat(np.array([[1.0, 0.0, 3.0]]), np.array([1]))
        assert not g.any()
        g = splat(np.array([[1.0, 0.0, 3.0]]), np.array([1]), height_ceiling=None)
        assert g.sum() == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        spec = GridSpec(rows=8, cols=8, classes=4, cell_x=1.0, cell_y=1.0, half_width=4.0)
        pts = np.column_stack([rng.uniform(0.01, 7.99, 60), rng.uniform(-3.99, 3.99, 60), np.zeros(60)])
        cls = rng.integers(0, 4, 60)
        g = splat(pts, cls, spec)
        perm = rng.permutation(60)
        # only compare cells with a unique majority
        i = np.floor(pts[:, 0]).astype(int)
        j = np.floor(pts[:, 1] + 4).astype(int)
        g2 = splat(pts[perm], cls[perm], spec)
        for a in range(8):
            for b in range(8):
                sel = cls[(i == a) & (j == b)]
                if sel.size:
                    c = np.bincount(sel, minlength=4)
                    if (c == c.max()).sum() == 1:
                        np.testing.assert_array_equal(g[a, b], g2[a, b])
        # channel sparsity
        assert set(np.unique(g.sum(axis=-1))) <= {0.0, 1.0}


class TestEma:
    def test_alpha_one_is_current(self):
        rng = np.random.default_rng(1)
        cur, prev = rng.random((4, 4, 3)), rng.random((4, 4, 3))
        out = ema_fuse(cur, prev, 1.0)
        assert out.tobytes() == cur.tobytes()

    def test_fixed_point(self):
        g = np.random.default_rng(2).random((4, 4, 3))
        np.testing.assert_array_equal(ema_fuse(g, g, 0.3), g)

    def test_half(self):
        cur = np.zeros((2, 2, 2))
        cur[..., 0] = 1.0
        out = ema_fuse(cur, np.zeros_like(cur), 0.5)
        assert (out[..., 0] == 0.5).all() and (out[..., 1] == 0.0).all()

    def test_errors(self):
        with pytest.raises(DimensionMismatch):
            ema_fuse(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
        for a in (0.0, -0.1, 1.5):
            with pytest.raises(AlphaOutOfRange):
                ema_fuse(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), a)

    def test_channel_sums_bounded(self):
        rng = np.random.default_rng(3)
        spec = GridSpec(rows=8, cols=8, classes=4, cell_x=1.0, cell_y=1.0, half_width=4.0)
        fused = None
        for _ in range(10):
            pts = np.column_stack([rng.uniform(0.01, 7.99, 40), rng.uniform(-3.99, 3.99, 40), np.zeros(40)])
            g = splat(pts, rng.integers(0, 4, 40), spec)
            fused = g if fused is None else ema_fuse(g, fused, rng.uniform(0.05, 1.0))
            s = fused.sum(axis=-1)
            assert s.min() >= 0.0 and s.max() <= 1.0 + 1e-12


class TestBuildBev:
    def test_fronto_parallel_wall(self):
        # fx = 32, cx = 31.5: y = 3.9375 - u/8, so j = floor(159.5 - u) = 159 - u
        intr = CameraIntrinsics(32.0, 32.0, 31.5, 15.5, 64, 32)
        ext = CameraToRobot.from_mount(height=0.0, pitch=0.0)
        depth = np.full((32, 64), 4.0)
        labels = np.full((32, 64), 9)
        g = build_bev(labels, depth, intr, ext)
        expected = np.zeros_like(g)
        expected[32, 96:160, 9] = 1.0
        np.testing.assert_array_equal(g, expected)

    def test_scores_use_argmax(self):
        intr = CameraIntrinsics(32.0, 32.0, 31.5, 15.5, 64, 32)
        ext = CameraToRobot.from_mount(height=0.0, pitch=0.0)
        scores = np.zeros((32, 64, 20))
        scores[..., 4] = 0.9
        scores[..., 7] = 0.2
        g = build_bev(scores, np.full((32, 64), 4.0), intr, ext)
        assert g[32, 96:160, 4].all() and g.sum() == 64

    def test_first_frame_passthrough_and_fixed_point(self):
        rng = np.random.default_rng(4)
        intr = CameraIntrinsics.from_fov(64, 32, math.radians(90))
        ext = CameraToRobot.from_mount(0.5, 0.3)
        depth = rng.uniform(0.5, 10.0, (32, 64))
        labels = rng.integers(0, 20, (32, 64))
        first = build_bev(labels, depth, intr, ext)
        pts, pix = back_project(depth, intr, ext)
        np.testing.assert_array_equal(first, splat(pts, labels[pix[:, 1], pix[:, 0]]))
        second = build_bev(labels, depth, intr, ext, prev_fused=first, alpha=0.5)
        np.testing.assert_array_equal(second, first)


def test_pool_and_colorize():
    g = np.zeros((128, 256, 20))
    g[0, 0, 0] = 1.0
    p = pool_grid(g, 16)
    assert p.shape == (8, 16, 20) and p[0, 0, 0] == 1.0 / 256
    img = colorize(g)
    assert img.shape == (128, 256, 3) and img.dtype == np.uint8
    # cell (0, 0) is nearest and rightmost: bottom-right of the image
    assert tuple(img[-1, -1]) == (128, 64, 128)
    assert tuple(img[0, 0]) == (255, 255, 255)
