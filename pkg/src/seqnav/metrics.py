"""Offline evaluation metrics: segmentation IoU, depth, waypoint and control MAE."""

from __future__ import annotations

import json
import statistics
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import LengthMismatch, NoValidPixels, ShapeMismatch


def _as_array(x) -> np.ndarray:
    if hasattr(x, "waypoints"):
        return np.asarray(x.waypoints, dtype=np.float64)
    if hasattr(x, "as_array"):
        return x.as_array()
    return np.asarray(x, dtype=np.float64)


def iou(pred: np.ndarray, truth: np.ndarray, empty_as_one: bool = False) -> float:
    """Mean per-class IoU of binary ``(..., C)`` masks.

    Classes absent from both inputs are skipped unless ``empty_as_one``.
    If every class is absent the masks agree trivially and 1.0 is returned.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"{pred.shape} vs {truth.shape}")
    p = pred.reshape(-1, pred.shape[-1]).astype(bool)
    t = truth.reshape(-1, truth.shape[-1]).astype(bool)
    inter = np.count_nonzero(p & t, axis=0)
    union = np.count_nonzero(p | t, axis=0)
    present = union > 0
    scores = list(inter[present] / union[present])
    if empty_as_one:
        scores += [1.0] * int(np.count_nonzero(~present))
    if not scores:
        return 1.0
    return float(np.mean(scores))


def depth_mae(pred: np.ndarray, truth: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Mean absolute error over pixels whose ground-truth depth is valid."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"{pred.shape} vs {truth.shape}")
    valid = np.isfinite(truth) & (truth > 0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise NoValidPixels("no valid depth pixels")
    return float(np.mean(np.abs(pred[valid] - truth[valid])))


def wp_mae(pred, truth) -> float:
    """Mean over waypoints of the per-waypoint L1 distance."""
    p, t = _as_array(pred), _as_array(truth)
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 2:
        raise LengthMismatch(f"{p.shape} vs {t.shape}")
    return float(np.mean(np.abs(p - t).sum(axis=1)))


def ctrl_mae(pred, truth) -> float:
    p, t = _as_array(pred), _as_array(truth)
    if p.shape != (3,) or t.shape != (3,):
        raise ShapeMismatch("control actions are 3-vectors")
    return float(np.abs(p - t).sum() / 3.0)


@dataclass
class EvalReport:
    iou: float
    depth_mae: float
    wp_mae: float
    ctrl_mae: float
    per_route: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if min(self.iou, self.depth_mae, self.wp_mae, self.ctrl_mae) < 0 or self.iou > 1:
            raise ValueError("metric out of range")

    def summary(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "per_route"}

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def to_text(self) -> str:
        lines = [f"{k:10s} {v:.6f}" for k, v in self.summary().items()]
        for name, vals in sorted(self.per_route.items()):
            lines.append(f"  {name}: " + ", ".join(f"{k}={v:.4f}" for k, v in sorted(vals.items())))
        return "\n".join(lines)


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation across runs."""
    if not values:
        raise ValueError("nothing to aggregate")
    return statistics.fmean(values), statistics.pstdev(values)


def aggregate_reports(reports: Sequence[EvalReport]) -> dict[str, tuple[float, float]]:
    return {k: aggregate([r.summary()[k] for r in reports]) for k in ("iou", "depth_mae", "wp_mae", "ctrl_mae")}
