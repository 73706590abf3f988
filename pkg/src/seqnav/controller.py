"""PID and command-specific MLP controllers with confidence-gated blending.

Control actions are normalised ``(x, y, theta)`` in ``[-1, 1]``: ``x`` is a
lateral step, ``y`` forward motion and ``theta`` yaw rate. Positive heading
error means the aim point lies counter-clockwise of straight ahead (to the
robot's left), and both ``x`` and ``theta`` follow its sign.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from .errors import DegenerateAim, DimensionMismatch, NonPositiveInterval
from .geodesy import DEFAULT_TAU1, DEFAULT_TAU2, Command, LocalPoint, infer_command, wrap_angle
from .planner import (
    DEFAULT_GAMMA,
    GruParams,
    MotionReference,
    RolloutHeads,
    WaypointPlan,
    gru_step,
    motion_reference,
    rollout_plan,
    sigmoid,
)

DEFAULT_EPSILON = 0.05
INTEGRAL_CLAMP = 1.0
# the robot's own heading expressed in its local frame (y forward)
HEADING_IN_LOCAL = math.pi / 2


def clamp_unit(v: float) -> float:
    return min(1.0, max(-1.0, v))


@dataclass(frozen=True)
class ControlAction:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self) -> None:
        for name in ("x", "y", "theta"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or abs(v) > 1.0:
                raise ValueError(f"{name}={v} outside [-1, 1]")
            object.__setattr__(self, name, v)

    @classmethod
    def clamped(cls, x: float, y: float, theta: float) -> "ControlAction":
        return cls(clamp_unit(x), clamp_unit(y), clamp_unit(theta))

    @classmethod
    def from_array(cls, a) -> "ControlAction":
        return cls.clamped(float(a[0]), float(a[1]), float(a[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def norm(self, kind: str = "l2") -> float:
        if kind == "l2":
            return math.sqrt(self.x * self.x + self.y * self.y + self.theta * self.theta)
        if kind == "linf":
            return max(abs(self.x), abs(self.y), abs(self.theta))
        raise ValueError(f"unknown norm {kind!r}")


ZERO_ACTION = ControlAction()


@dataclass(frozen=True)
class PidState:
    kp: float
    ki: float
    kd: float
    integral_clamp: float = INTEGRAL_CLAMP
    integral: float = 0.0
    prev_error: Optional[float] = None

    def __post_init__(self) -> None:
        if min(self.kp, self.ki, self.kd) < 0:
            raise ValueError("PID gains must be non-negative")
        if not self.integral_clamp > 0:
            raise ValueError("integral clamp must be positive")
        if abs(self.integral) > self.integral_clamp:
            raise ValueError("integral exceeds its clamp")

    def reset(self) -> "PidState":
        return replace(self, integral=0.0, prev_error=None)


LATERAL_PID = PidState(1.0, 0.05, 0.1)
LONGITUDINAL_PID = PidState(0.8, 0.05, 0.0)


def pid_step(state: PidState, error: float, dt: float) -> tuple[float, PidState]:
    """Discrete PID; no derivative kick on the first sample after a reset."""
    if not dt > 0:
        raise NonPositiveInterval(f"dt must be positive, got {dt}")
    c = state.integral_clamp
    integral = min(c, max(-c, state.integral + error * dt))
    deriv = 0.0 if state.prev_error is None else (error - state.prev_error) / dt
    out = state.kp * error + state.ki * integral + state.kd * deriv
    return out, replace(state, integral=integral, prev_error=error)


def steering_map(u_lat: float, u_lon: float) -> ControlAction:
    """Lateral output drives both strafe and yaw rate; longitudinal output drives forward motion."""
    return ControlAction.clamped(u_lat, u_lon, u_lat)


def pid_control(
    ref: MotionReference,
    theta_meas: float,
    v_meas: float,
    lat: PidState,
    lon: PidState,
    dt: float,
) -> tuple[ControlAction, PidState, PidState]:
    e_lat = wrap_angle(ref.theta_ref - theta_meas)
    u_lat, lat = pid_step(lat, e_lat, dt)
    u_lon, lon = pid_step(lon, ref.v_ref - v_meas, dt)
    return steering_map(u_lat, u_lon), lat, lon


@dataclass(frozen=True)
class MlpHead:
    """``clamp(W2 @ tanh(W1 @ h + b1) + b2)``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self) -> None:
        W1, b1, W2, b2 = (np.asarray(a, dtype=np.float64) for a in (self.W1, self.b1, self.W2, self.b2))
        if W1.ndim != 2 or b1.shape != (W1.shape[0],) or W2.shape != (3, W1.shape[0]) or b2.shape != (3,):
            raise DimensionMismatch("MLP head needs W1 (M, H), b1 (M,), W2 (3, M), b2 (3,)")
        for name, a in zip(("W1", "b1", "W2", "b2"), (W1, b1, W2, b2)):
            object.__setattr__(self, name, a)

    @classmethod
    def zeros(cls, hidden_dim: int, width: int = 16) -> "MlpHead":
        return cls(np.zeros((width, hidden_dim)), np.zeros(width), np.zeros((3, width)), np.zeros(3))

    @classmethod
    def random(cls, hidden_dim: int, width: int, rng: np.random.Generator, scale: float = 0.3) -> "MlpHead":
        return cls(
            rng.normal(0, scale, (width, hidden_dim)), rng.normal(0, scale, width),
            rng.normal(0, scale, (3, width)), rng.normal(0, scale, 3),
        )

    def raw(self, h: np.ndarray) -> np.ndarray:
        if h.shape[-1] != self.W1.shape[1]:
            raise DimensionMismatch(f"hidden dim {h.shape[-1]} != head input {self.W1.shape[1]}")
        return np.tanh(h @ self.W1.T + self.b1) @ self.W2.T + self.b2


class MlpHeads:
    """One head per command; lookups are counted so tests can observe head selection."""

    def __init__(self, heads: Mapping[Command, MlpHead]) -> None:
        if set(heads) != set(Command):
            raise DimensionMismatch("one head per command required")
        dims = {(h.W1.shape[1]) for h in heads.values()}
        if len(dims) != 1:
            raise DimensionMismatch("heads disagree on hidden size")
        self._heads = dict(heads)
        self.access_counts: Counter = Counter()

    @classmethod
    def zeros(cls, hidden_dim: int, width: int = 16) -> "MlpHeads":
        return cls({c: MlpHead.zeros(hidden_dim, width) for c in Command})

    @classmethod
    def random(cls, hidden_dim: int, width: int, rng: np.random.Generator, scale: float = 0.3) -> "MlpHeads":
        return cls({c: MlpHead.random(hidden_dim, width, rng, scale) for c in Command})

    def head(self, cmd: Command) -> MlpHead:
        self.access_counts[cmd] += 1
        return self._heads[cmd]


def mlp_control(h: np.ndarray, cmd: Command, heads: MlpHeads) -> ControlAction:
    return ControlAction.from_array(heads.head(cmd).raw(np.asarray(h, dtype=np.float64)))


@dataclass(frozen=True)
class BlendWeights:
    """``beta[0, i]`` weights the MLP action and ``beta[1, i]`` the PID action;
    column 0 applies to ``(x, y)`` and column 1 to ``theta``."""

    beta: np.ndarray

    def __post_init__(self) -> None:
        b = np.asarray(self.beta, dtype=np.float64)
        if b.shape != (2, 2):
            raise DimensionMismatch("beta must be 2x2")
        if not np.all((b >= 0.0) & (b <= 1.0)):
            raise ValueError("beta entries must lie in [0, 1]")
        object.__setattr__(self, "beta", b)

    @classmethod
    def fixed(cls) -> "BlendWeights":
        return cls(np.full((2, 2), 0.5))

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "BlendWeights":
        return cls(sigmoid(np.asarray(logits, dtype=np.float64)))


def gate(u_mlp: ControlAction, u_pid: ControlAction, epsilon: float = DEFAULT_EPSILON, norm: str = "l2") -> str:
    """Name of the active branch: ``blend``, ``mlp``, ``pid`` or ``zero``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    m = u_mlp.norm(norm) >= epsilon
    p = u_pid.norm(norm) >= epsilon
    if m and p:
        return "blend"
    if m:
        return "mlp"
    if p:
        return "pid"
    return "zero"


def mix(u_mlp: ControlAction, u_pid: ControlAction, beta: BlendWeights) -> ControlAction:
    b = beta.beta
    return ControlAction.clamped(
        b[0, 0] * u_mlp.x + b[1, 0] * u_pid.x,
        b[0, 0] * u_mlp.y + b[1, 0] * u_pid.y,
        b[0, 1] * u_mlp.theta + b[1, 1] * u_pid.theta,
    )


def blend(
    u_mlp: ControlAction,
    u_pid: ControlAction,
    beta: BlendWeights,
    epsilon: float = DEFAULT_EPSILON,
    norm: str = "l2",
) -> ControlAction:
    branch = gate(u_mlp, u_pid, epsilon, norm)
    if branch == "blend":
        return mix(u_mlp, u_pid, beta)
    if branch == "mlp":
        return u_mlp
    if branch == "pid":
        return u_pid
    return ZERO_ACTION


# -- full policy ---------------------------------------------------------------


@dataclass(frozen=True)
class PolicyParams:
    gru: GruParams
    heads: RolloutHeads
    mlp: MlpHeads
    beta: BlendWeights = field(default_factory=BlendWeights.fixed)
    epsilon: float = DEFAULT_EPSILON
    gamma: float = DEFAULT_GAMMA
    lat: PidState = LATERAL_PID
    lon: PidState = LONGITUDINAL_PID
    norm: str = "l2"
    tau1: float = DEFAULT_TAU1
    tau2: float = DEFAULT_TAU2


@dataclass(frozen=True)
class PolicyState:
    h: np.ndarray
    lat: PidState
    lon: PidState
    reference: Optional[MotionReference] = None

    @classmethod
    def initial(cls, params: PolicyParams) -> "PolicyState":
        return cls(np.zeros(params.gru.hidden_dim), params.lat.reset(), params.lon.reset())


@dataclass(frozen=True)
class Diagnostics:
    h: np.ndarray
    plan: WaypointPlan
    reference: MotionReference
    command: Command
    u_mlp: ControlAction
    u_pid: ControlAction
    u_final: ControlAction
    branch: str
    degenerate_aim: bool


def control_policy(
    z: np.ndarray,
    state: PolicyState,
    p1: LocalPoint,
    p2: LocalPoint,
    v_meas: float,
    dt: float,
    params: PolicyParams,
) -> tuple[ControlAction, PolicyState, Diagnostics]:
    """One control tick: GRU, rollout, PID, command, MLP, blend."""
    h = gru_step(z, state.h, params.gru)
    plan = rollout_plan(h, params.heads)
    degenerate = False
    try:
        ref = motion_reference(plan, params.gamma)
    except DegenerateAim:
        degenerate = True
        ref = state.reference or MotionReference(HEADING_IN_LOCAL, 0.0, LocalPoint(0.0, 0.0))
    u_pid, lat, lon = pid_control(ref, HEADING_IN_LOCAL, v_meas, state.lat, state.lon, dt)
    cmd = infer_command(p1, p2, params.tau1, params.tau2)
    u_mlp = mlp_control(h, cmd, params.mlp)
    branch = gate(u_mlp, u_pid, params.epsilon, params.norm)
    u = blend(u_mlp, u_pid, params.beta, params.epsilon, params.norm)
    diag = Diagnostics(h, plan, ref, cmd, u_mlp, u_pid, u, branch, degenerate)
    return u, PolicyState(h, lat, lon, ref), diag
