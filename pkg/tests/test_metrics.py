import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqnav.controller import ControlAction
from seqnav.errors import LengthMismatch, NoValidPixels, ShapeMismatch
from seqnav.metrics import EvalReport, aggregate, aggregate_reports, ctrl_mae, depth_mae, iou, wp_mae
from seqnav.planner import WaypointPlan


def two_class_fixture():
    # class 0: pred {(0,0),(0,1)}, truth {(0,0),(1,0)} -> 1/3
    # class 1: pred {(1,0),(1,1)}, truth {(0,1),(1,1)} -> 1/3
    pred = np.zeros((2, 2, 2), dtype=bool)
    truth = np.zeros((2, 2, 2), dtype=bool)
    pred[0, 0, 0] = pred[0, 1, 0] = True
    truth[0, 0, 0] = truth[1, 0, 0] = True
    pred[1, 0, 1] = pred[1, 1, 1] = True
    truth[0, 1, 1] = truth[1, 1, 1] = True
    return pred, truth


class TestIou:
    def test_identical(self):
        a = np.random.default_rng(0).random((4, 4, 3)) > 0.5
        assert iou(a, a) == 1.0

    def test_disjoint(self):
        a = np.zeros((2, 2, 1), bool)
        b = np.zeros((2, 2, 1), bool)
        a[0, 0, 0] = b[1, 1, 0] = True
        assert iou(a, b) == 0.0

    def test_two_by_two_fixture(self):
        pred, truth = two_class_fixture()
        assert iou(pred, truth) == 1 / 3

    def test_empty_class_skipped_or_counted(self):
        pred, truth = two_class_fixture()
        p3 = np.concatenate([pred, np.zeros((2, 2, 1), bool)], axis=-1)
        t3 = np.concatenate([truth, np.zeros((2, 2, 1), bool)], axis=-1)
        assert iou(p3, t3) == 1 / 3
        assert iou(p3, t3, empty_as_one=True) == pytest.approx((1 / 3 + 1 / 3 + 1) / 3)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            iou(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_spatial_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        p, t = rng.random((5, 5, 3)) > 0.5, rng.random((5, 5, 3)) > 0.5
        perm = rng.permutation(25)
        pp = p.reshape(25, 3)[perm].reshape(5, 5, 3)
        tp = t.reshape(25, 3)[perm].reshape(5, 5, 3)
        assert iou(p, t) == iou(pp, tp)


class TestDepth:
    def test_zero_and_offset(self):
        d = np.random.default_rng(1).uniform(1, 10, (4, 4))
        assert depth_mae(d, d) == 0.0
        assert depth_mae(d + 0.5, d) == pytest.approx(0.5, abs=1e-12)

    def test_invalid_pixels_ignored(self):
        truth = np.array([[1.0, 0.0], [np.nan, 2.0]])
        pred = np.array([[2.0, 100.0], [100.0, 2.5]])
        assert depth_mae(pred, truth) == 0.75

    def test_errors(self):
        with pytest.raises(NoValidPixels):
            depth_mae(np.ones((2, 2)), np.zeros((2, 2)))
        with pytest.raises(ShapeMismatch):
            depth_mae(np.ones((2, 2)), np.ones((2, 3)))


class TestWaypointAndControl:
    def test_wp_zero_and_offset(self):
        w = np.arange(10.0).reshape(5, 2)
        assert wp_mae(w, w) == 0.0
        assert wp_mae(w + 0.1, w) == pytest.approx(0.2, abs=1e-12)

    def test_wp_fixture(self):
        a = np.zeros((5, 2))
        b = np.array([[1, 0], [0, -2], [0.5, 0.5], [0, 0], [3, 1]], dtype=float)
        # per-waypoint L1: 1, 2, 1, 0, 4
        assert wp_mae(a, b) == 8 / 5
        assert wp_mae(WaypointPlan.from_waypoints(a), WaypointPlan.from_waypoints(b)) == 8 / 5

    def test_wp_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            wp_mae(np.zeros((5, 2)), np.zeros((4, 2)))

    def test_ctrl(self):
        a = ControlAction(0.3, 0.0, 0.0)
        assert ctrl_mae(a, a) == 0.0
        assert ctrl_mae(a, ControlAction()) == pytest.approx(0.1, abs=1e-15)
        assert ctrl_mae(ControlAction(0.1, -0.2, 0.4), ControlAction(-0.1, 0.1, 0.4)) == pytest.approx(0.5 / 3)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_triangle_inequalities(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (rng.normal(0, 2, (5, 2)) for _ in range(3))
        assert wp_mae(a, c) <= wp_mae(a, b) + wp_mae(b, c) + 1e-12
        u, v, w = (rng.uniform(-1, 1, 3) for _ in range(3))
        assert ctrl_mae(u, w) <= ctrl_mae(u, v) + ctrl_mae(v, w) + 1e-12


def test_aggregate_population_std():
    m, s = aggregate([1.0, 2.0, 3.0])
    assert m == 2.0 and s == pytest.approx((2 / 3) ** 0.5)


def test_report_round_trip():
    r = EvalReport(0.8, 0.3, 0.5, 0.05, {"r0": {"ctrl_mae": 0.05}})
    assert json.loads(r.to_json())["iou"] == 0.8
    assert "ctrl_mae" in r.to_text()
    agg = aggregate_reports([r, EvalReport(0.6, 0.3, 0.5, 0.07)])
    assert agg["iou"][0] == pytest.approx(0.7) and agg["iou"][1] == pytest.approx(0.1)
    with pytest.raises(ValueError):
        EvalReport(1.2, 0, 0, 0)
