"""Semantic bird's-eye-view grids from segmentation scores and depth.

Robot frame for 3-D points: ``x`` forward, ``y`` left, ``z`` up, origin on
the ground below the robot base. Grid row ``i`` grows forward from the
robot, column ``j`` grows from the right edge (``y = -16``) to the left.

Per-point arithmetic is written out component by component in a fixed
order so that results are reproducible bit-for-bit against a scalar loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import AlphaOutOfRange, ClassOutOfRange, DimensionMismatch

NUM_CLASSES = 20
DEFAULT_ALPHA = 0.5
DEFAULT_HEIGHT_CEILING = 2.5

# Cityscapes train-id palette plus a void colour for the 20th channel.
PALETTE = np.array(
    [
        (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156), (190, 153, 153),
        (153, 153, 153), (250, 170, 30), (220, 220, 0), (107, 142, 35), (152, 251, 152),
        (70, 130, 180), (220, 20, 60), (255, 0, 0), (0, 0, 142), (0, 0, 70),
        (0, 60, 100), (0, 80, 100), (0, 0, 230), (119, 11, 32), (0, 0, 0),
    ],
    dtype=np.uint8,
)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_fov(cls, width: int, height: int, hfov: float) -> "CameraIntrinsics":
        """Square pixels with horizontal field of view ``hfov`` (radians)."""
        f = 0.5 * width / math.tan(0.5 * hfov)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


@dataclass(frozen=True)
class CameraToRobot:
    """Rigid transform taking camera optical-frame points into the robot frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise DimensionMismatch("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraToRobot":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_mount(cls, height: float, pitch: float, forward: float = 0.0) -> "CameraToRobot":
        """Forward-looking camera ``height`` m above ground, tilted down by ``pitch`` rad."""
        optical = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        c, s = math.cos(pitch), math.sin(pitch)
        tilt = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        return cls(tilt @ optical, np.array([forward, 0.0, height]))


@dataclass(frozen=True)
class GridSpec:
    rows: int = 128
    cols: int = 256
    classes: int = NUM_CLASSES
    cell_x: float = 0.125
    cell_y: float = 0.125
    half_width: float = 16.0

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.rows, self.cols, self.classes)

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        return ((i + 0.5) * self.cell_x, (j + 0.5) * self.cell_y - self.half_width)


DEFAULT_GRID = GridSpec()


def valid_depth_mask(depth: np.ndarray) -> np.ndarray:
    return np.isfinite(depth) & (depth > 0)


def back_project(
    depth: np.ndarray,
    intr: CameraIntrinsics,
    ext: CameraToRobot,
    mask: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Lift valid depth pixels into robot-frame points.

    Returns ``(points, pixels)``: an ``(N, 3)`` float array and the ``(N, 2)``
    integer ``(u, v)`` source pixels, in row-major pixel order.
    """
    depth = np.asarray(depth)
    if depth.shape != (intr.height, intr.width):
        raise DimensionMismatch(f"depth {depth.shape} vs intrinsics {(intr.height, intr.width)}")
    ok = valid_depth_mask(depth)
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)
    v, u = np.nonzero(ok)
    d = depth[v, u].astype(np.float64)
    xc = (u - intr.cx) * d / intr.fx
    yc = (v - intr.cy) * d / intr.fy
    zc = d
    r, t = ext.rotation, ext.translation
    xr = r[0, 0] * xc + r[0, 1] * yc + r[0, 2] * zc + t[0]
    yr = r[1, 0] * xc + r[1, 1] * yc + r[1, 2] * zc + t[1]
    zr = r[2, 0] * xc + r[2, 1] * yc + r[2, 2] * zc + t[2]
    return np.stack([xr, yr, zr], axis=1), np.stack([u, v], axis=1)


def reproject(points: np.ndarray, intr: CameraIntrinsics, ext: CameraToRobot) -> np.ndarray:
    """Project robot-frame points back to sub-pixel ``(u, v)`` coordinates."""
    cam = (np.asarray(points, dtype=np.float64) - ext.translation) @ ext.rotation
    return np.stack(
        [intr.fx * cam[:, 0] / cam[:, 2] + intr.cx, intr.fy * cam[:, 1] / cam[:, 2] + intr.cy],
        axis=1,
    )


def grid_index(p, spec: GridSpec = DEFAULT_GRID) -> Optional[tuple[int, int]]:
    """Cell ``(i, j)`` containing robot-frame point ``p``, or ``None`` if off-grid."""
    x, y = float(p[0]), float(p[1])
    if not x > 0:
        return None
    i = math.floor(x / spec.cell_x)
    j = math.floor((y + spec.half_width) / spec.cell_y)
    if 0 <= i < spec.rows and 0 <= j < spec.cols:
        return i, j
    return None


def grid_indices(points: np.ndarray, spec: GridSpec = DEFAULT_GRID):
    """Vectorised :func:`grid_index`; returns ``(i, j, inside)``."""
    x = points[:, 0]
    y = points[:, 1]
    i = np.floor(x / spec.cell_x)
    j = np.floor((y + spec.half_width) / spec.cell_y)
    inside = (x > 0) & (i >= 0) & (i < spec.rows) & (j >= 0) & (j < spec.cols)
    return i.astype(np.int64), j.astype(np.int64), inside


def splat(
    points: np.ndarray,
    classes: np.ndarray,
    spec: GridSpec = DEFAULT_GRID,
    reducer: str = "majority",
    tie_break: str = "lower",
    height_ceiling: Optional[float] = DEFAULT_HEIGHT_CEILING,
) -> np.ndarray:
    """Drop class-labelled points into the grid.

    ``majority`` writes the one-hot of the most frequent class per cell;
    ``max`` writes the union of the one-hots (multi-hot cells possible).
    Points above ``height_ceiling`` (robot frame z) are ignored.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    if len(points) != len(classes):
        raise DimensionMismatch("one class id per point required")
    if classes.size and (classes.min() < 0 or classes.max() >= spec.classes):
        raise ClassOutOfRange(f"class ids must lie in [0, {spec.classes})")
    grid = np.zeros(spec.shape, dtype=np.float64)
    if not len(points):
        return grid
    i, j, keep = grid_indices(points, spec)
    if height_ceiling is not None:
        keep &= points[:, 2] <= height_ceiling
    cell = i[keep] * spec.cols + j[keep]
    cls = classes[keep]
    flat = grid.reshape(spec.rows * spec.cols, spec.classes)
    if reducer == "max":
        flat[cell, cls] = 1.0
        return grid
    if reducer != "majority":
        raise ValueError(f"unknown reducer {reducer!r}")
    if tie_break not in ("lower", "higher"):
        raise ValueError(f"unknown tie_break {tie_break!r}")
    if not cell.size:
        return grid
    keys, counts = np.unique(cell * spec.classes + cls, return_counts=True)
    touched, label = np.divmod(keys, spec.classes)
    # per cell: highest count first, then the preferred class id
    order = np.lexsort((label if tie_break == "lower" else -label, -counts, touched))
    first = np.ones(order.size, dtype=bool)
    first[1:] = touched[order][1:] != touched[order][:-1]
    touched, winner = touched[order][first], label[order][first]
    flat[touched, winner] = 1.0
    return grid


def ema_fuse(current: np.ndarray, previous_fused: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    if current.shape != previous_fused.shape:
        raise DimensionMismatch(f"{current.shape} vs {previous_fused.shape}")
    if not 0.0 < alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha must lie in (0, 1], got {alpha}")
    if alpha == 1.0:
        return current.copy()
    # same convex combination; this form keeps current == previous an exact fixed point
    out = np.subtract(current, previous_fused)
    out *= alpha
    out += previous_fused
    return out


def seg_argmax(seg_scores: np.ndarray) -> np.ndarray:
    return np.argmax(seg_scores, axis=-1)


def build_bev(
    seg: np.ndarray,
    depth: np.ndarray,
    intr: CameraIntrinsics,
    ext: CameraToRobot,
    prev_fused: Optional[np.ndarray] = None,
    alpha: float = DEFAULT_ALPHA,
    spec: GridSpec = DEFAULT_GRID,
    reducer: str = "majority",
    height_ceiling: Optional[float] = DEFAULT_HEIGHT_CEILING,
) -> np.ndarray:
    """Back-project, splat the per-pixel argmax class, and fuse with ``prev_fused``.

    ``seg`` is either ``(H, W, C)`` class scores or an ``(H, W)`` class-id map.
    """
    seg = np.asarray(seg)
    if seg.shape[:2] != (intr.height, intr.width):
        raise DimensionMismatch(f"segmentation {seg.shape} vs intrinsics")
    labels = seg if seg.ndim == 2 else seg_argmax(seg)
    points, pixels = back_project(depth, intr, ext)
    grid = splat(points, labels[pixels[:, 1], pixels[:, 0]], spec, reducer, height_ceiling=height_ceiling)
    if prev_fused is None:
        return grid
    return ema_fuse(grid, prev_fused, alpha)


def pool_grid(grid: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool rows and columns by ``factor``; channels are kept."""
    h, w, c = grid.shape
    if h % factor or w % factor:
        raise DimensionMismatch(f"grid {grid.shape} not divisible by {factor}")
    return grid.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def colorize(grid: np.ndarray, background: int = 255) -> np.ndarray:
    """RGB render, robot at the bottom centre and the robot's left on the image left."""
    strength = grid.max(axis=-1)
    label = grid.argmax(axis=-1)
    rgb = PALETTE[label % len(PALETTE)].astype(np.float64)
    bg = float(background)
    img = strength[..., None] * rgb + (1.0 - strength[..., None]) * bg
    img = np.rint(img).astype(np.uint8)
    return img[::-1, ::-1]
