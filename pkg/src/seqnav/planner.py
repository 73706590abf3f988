"""Temporal fusion, waypoint rollout and motion references.

Arrays follow a trailing-dimension convention so every operation also
accepts a leading batch axis: ``z`` is ``(..., D)``, ``h`` is ``(..., H)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateAim, DimensionMismatch
from .geodesy import LocalPoint, wrap_angle

NUM_WAYPOINTS = 5
DEFAULT_HIDDEN = 64
DEFAULT_GAMMA = 1.0
AIM_TOLERANCE = 1e-9
ANCILLARY_DIM = 5  # p1.x, p1.y, p2.x, p2.y, speed


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class GruParams:
    W_r: np.ndarray
    W_u: np.ndarray
    W_h: np.ndarray
    b_r: np.ndarray
    b_u: np.ndarray
    b_h: np.ndarray

    def __post_init__(self) -> None:
        for name in ("W_r", "W_u", "W_h", "b_r", "b_u", "b_h"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h = self.b_r.shape[0] if self.b_r.ndim == 1 else -1
        if h < 1 or self.W_r.ndim != 2 or self.W_r.shape[0] != h or self.W_r.shape[1] <= h:
            raise DimensionMismatch("W_r must be hidden x (input + hidden)")
        for name in ("W_u", "W_h"):
            if getattr(self, name).shape != self.W_r.shape:
                raise DimensionMismatch(f"{name} shape {getattr(self, name).shape} != {self.W_r.shape}")
        for name in ("b_u", "b_h"):
            if getattr(self, name).shape != (h,):
                raise DimensionMismatch(f"{name} must have shape ({h},)")
        for name in ("W_r", "W_u", "W_h", "b_r", "b_u", "b_h"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def hidden_dim(self) -> int:
        return self.b_r.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_r.shape[1] - self.hidden_dim

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int = DEFAULT_HIDDEN) -> "GruParams":
        w = np.zeros((hidden_dim, input_dim + hidden_dim))
        b = np.zeros(hidden_dim)
        return cls(w, w.copy(), w.copy(), b, b.copy(), b.copy())

    @classmethod
    def random(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator, scale: float = 0.3) -> "GruParams":
        shape = (hidden_dim, input_dim + hidden_dim)
        return cls(
            rng.normal(0, scale, shape), rng.normal(0, scale, shape), rng.normal(0, scale, shape),
            rng.normal(0, scale, hidden_dim), rng.normal(0, scale, hidden_dim), rng.normal(0, scale, hidden_dim),
        )


class GruTerms(NamedTuple):
    r: np.ndarray
    u: np.ndarray
    h_tilde: np.ndarray
    h_new: np.ndarray


def gru_terms(z: np.ndarray, h_prev: np.ndarray, params: GruParams) -> GruTerms:
    """One GRU update with its gate activations exposed."""
    z = np.asarray(z, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if z.shape[-1] != params.input_dim:
        raise DimensionMismatch(f"input dim {z.shape[-1]} != {params.input_dim}")
    if h_prev.shape[-1] != params.hidden_dim:
        raise DimensionMismatch(f"hidden dim {h_prev.shape[-1]} != {params.hidden_dim}")
    d = params.input_dim
    batch = np.broadcast_shapes(z.shape[:-1], h_prev.shape[:-1])
    h_prev = np.broadcast_to(h_prev, batch + h_prev.shape[-1:])
    zh = np.concatenate([np.broadcast_to(z, batch + z.shape[-1:]), h_prev], axis=-1)
    r = sigmoid(zh @ params.W_r.T + params.b_r)
    u = sigmoid(zh @ params.W_u.T + params.b_u)
    h_tilde = np.tanh(zh[..., :d] @ params.W_h[:, :d].T + (r * h_prev) @ params.W_h[:, d:].T + params.b_h)
    h_new = (1.0 - u) * h_prev + u * h_tilde
    return GruTerms(r, u, h_tilde, h_new)


def gru_step(z: np.ndarray, h_prev: np.ndarray, params: GruParams) -> np.ndarray:
    return gru_terms(z, h_prev, params).h_new


def fuse_inputs(
    f_rgb: np.ndarray,
    f_bev: np.ndarray,
    p1: LocalPoint,
    p2: LocalPoint,
    speed: float,
) -> np.ndarray:
    """Concatenate ``[f_rgb, f_bev, p1.x, p1.y, p2.x, p2.y, speed]``."""
    tail = np.array([p1.x, p1.y, p2.x, p2.y, speed], dtype=np.float64)
    return np.concatenate([np.asarray(f_rgb, dtype=np.float64).ravel(), np.asarray(f_bev, dtype=np.float64).ravel(), tail])


@dataclass(frozen=True)
class RolloutHeads:
    """Per-step affine maps ``dw_l = W[l] @ h + b[l]``; ``W`` is ``(N, 2, H)``, ``b`` is ``(N, 2)``."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        W = np.asarray(self.W, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if W.ndim != 3 or W.shape[1] != 2 or b.shape != W.shape[:2]:
            raise DimensionMismatch(f"heads need W (N, 2, H) and b (N, 2); got {W.shape}, {b.shape}")
        if W.shape[0] != NUM_WAYPOINTS:
            raise DimensionMismatch(f"expected {NUM_WAYPOINTS} heads, got {W.shape[0]}")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def hidden_dim(self) -> int:
        return self.W.shape[2]

    @classmethod
    def zeros(cls, hidden_dim: int) -> "RolloutHeads":
        return cls(np.zeros((NUM_WAYPOINTS, 2, hidden_dim)), np.zeros((NUM_WAYPOINTS, 2)))

    @classmethod
    def random(cls, hidden_dim: int, rng: np.random.Generator, scale: float = 0.3) -> "RolloutHeads":
        return cls(rng.normal(0, scale, (NUM_WAYPOINTS, 2, hidden_dim)), rng.normal(0, scale, (NUM_WAYPOINTS, 2)))


def prefix_sum(deltas: np.ndarray) -> np.ndarray:
    """Sequential left-to-right running sum along axis ``-2``."""
    out = np.empty_like(deltas)
    acc = np.zeros_like(deltas[..., 0, :])
    for ell in range(deltas.shape[-2]):
        acc = acc + deltas[..., ell, :]
        out[..., ell, :] = acc
    return out


@dataclass(frozen=True)
class WaypointPlan:
    """Local-frame waypoints (x right, y forward) built from per-step deltas."""

    deltas: np.ndarray

    def __post_init__(self) -> None:
        d = np.asarray(self.deltas, dtype=np.float64)
        if d.shape != (NUM_WAYPOINTS, 2):
            raise DimensionMismatch(f"plan needs ({NUM_WAYPOINTS}, 2) deltas, got {d.shape}")
        object.__setattr__(self, "deltas", d)
        object.__setattr__(self, "waypoints", prefix_sum(d))

    @classmethod
    def from_waypoints(cls, waypoints: np.ndarray) -> "WaypointPlan":
        w = np.asarray(waypoints, dtype=np.float64)
        if w.shape != (NUM_WAYPOINTS, 2):
            raise DimensionMismatch(f"plan needs ({NUM_WAYPOINTS}, 2) waypoints, got {w.shape}")
        return cls(np.diff(w, axis=0, prepend=np.zeros((1, 2))))

    def point(self, ell: int) -> LocalPoint:
        """Waypoint ``ell`` in 1..N; ``ell = 0`` is the robot origin."""
        if ell == 0:
            return LocalPoint(0.0, 0.0)
        x, y = self.waypoints[ell - 1]
        return LocalPoint(float(x), float(y))


def rollout_waypoints(h: np.ndarray, heads: RolloutHeads) -> np.ndarray:
    """Waypoints ``(..., N, 2)`` for hidden state(s) ``h`` of shape ``(..., H)``."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != heads.hidden_dim:
        raise DimensionMismatch(f"hidden dim {h.shape[-1]} != heads {heads.hidden_dim}")
    deltas = np.einsum("lkh,...h->...lk", heads.W, h) + heads.b
    return prefix_sum(deltas)


def rollout_plan(h: np.ndarray, heads: RolloutHeads) -> WaypointPlan:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (heads.hidden_dim,):
        raise DimensionMismatch(f"expected a single hidden state of size {heads.hidden_dim}")
    return WaypointPlan(np.einsum("lkh,h->lk", heads.W, h) + heads.b)


@dataclass(frozen=True)
class MotionReference:
    theta_ref: float
    v_ref: float
    aim: LocalPoint


def motion_reference(plan: WaypointPlan, gamma: float = DEFAULT_GAMMA) -> MotionReference:
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    w1, w2 = plan.waypoints[0], plan.waypoints[1]
    ax = 0.5 * (w1[0] + w2[0])
    ay = 0.5 * (w1[1] + w2[1])
    if math.hypot(ax, ay) < AIM_TOLERANCE:
        raise DegenerateAim("aim point at the robot origin; hold the previous reference")
    theta = wrap_angle(math.atan2(ay, ax))
    v = gamma * math.hypot(w1[0] - w2[0], w1[1] - w2[1])
    return MotionReference(theta, v, LocalPoint(float(ax), float(ay)))


def route_slots(f_rgb_dim: int, f_bev_dim: int) -> slice:
    """Index range of the ancillary block inside a fused input vector."""
    start = f_rgb_dim + f_bev_dim
    return slice(start, start + ANCILLARY_DIM)


def route_following_params(
    f_rgb_dim: int,
    f_bev_dim: int,
    hidden_dim: int = DEFAULT_HIDDEN,
    scale: float = 0.01,
    steer: Sequence[float] = (1.0, 0.0),
    pace: float = 0.1,
) -> tuple[GruParams, RolloutHeads]:
    """Hand-built planner that steers at the route points.

    The update gate is held open so ``h`` tracks ``tanh(scale * p)`` on four
    hidden units. The first waypoint is ``steer[0] * p1 + steer[1] * p2`` and
    every later step adds ``pace * p2``, so the aim follows the near target
    while the reference speed scales with the distance to ``p2``.
    Perception features are ignored.
    """
    if hidden_dim < 4:
        raise DimensionMismatch("route following needs at least 4 hidden units")
    d = f_rgb_dim + f_bev_dim + ANCILLARY_DIM
    gru = GruParams.zeros(d, hidden_dim)
    W_h = gru.W_h.copy()
    base = route_slots(f_rgb_dim, f_bev_dim).start
    for k in range(4):
        W_h[k, base + k] = scale
    b_u = np.full(hidden_dim, 20.0)
    gru = GruParams(gru.W_r, gru.W_u, W_h, gru.b_r, b_u, gru.b_h)
    W = np.zeros((NUM_WAYPOINTS, 2, hidden_dim))
    c1, c2 = steer
    for axis in (0, 1):
        W[0, axis, axis] = c1 / scale
        W[0, axis, 2 + axis] = c2 / scale
        W[1:, axis, 2 + axis] = pace / scale
    return gru, RolloutHeads(W, np.zeros((NUM_WAYPOINTS, 2)))
