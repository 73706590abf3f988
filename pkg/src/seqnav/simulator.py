"""Closed-loop simulation of a holonomic base in the synthetic world.

Heading is a yaw angle, counter-clockwise from east. Positive ``theta``
actions turn counter-clockwise (left) and positive ``x`` actions strafe to
the robot's left. The compass bearing of a yaw ``psi`` is ``pi/2 - psi``.
"""

from __future__ import annotations

import math
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .bevmap import DEFAULT_ALPHA, build_bev, colorize
from .controller import ZERO_ACTION, ControlAction, Diagnostics, PolicyParams, PolicyState, control_policy
from .errors import BadLog, ConfigMismatch
from .geodesy import BearingTracker, GeoFix, LocalPoint, RouteCursor, fix_to_enu, wrap_angle
from .planner import fuse_inputs, gru_step
from .tensorfile import write_records
from .world import DEFAULT_EXTRINSICS, DEFAULT_INTRINSICS, BiasZone, World, sample_gnss


@dataclass(frozen=True)
class RobotState:
    east: float
    north: float
    heading: float
    speed: float = 0.0

    def __post_init__(self) -> None:
        vals = (self.east, self.north, self.heading, self.speed)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite robot state {vals}")
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.east, self.north])

    @property
    def pose(self) -> tuple[float, float, float]:
        return (self.east, self.north, self.heading)

    @property
    def bearing(self) -> float:
        return wrap_angle(math.pi / 2 - self.heading)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1.0 / 30.0
    v_max: float = 1.0
    lateral_gain: float = 0.3
    omega_max: float = 1.0
    gnss_sigma: float = 0.0
    gnss_hz: float = 30.0
    bearing_baseline: float = 0.5
    bias_zones: tuple[BiasZone, ...] = ()
    goal_radius: float = 1.0
    max_ticks: int = 6000
    max_cross_track: float = 10.0
    max_gnss_speed: float = 3.0
    bev_alpha: float = DEFAULT_ALPHA
    bev_every: int = 0
    pixel_noise: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ConfigMismatch("dt must be positive")
        if not (self.goal_radius > 0 and self.max_cross_track > 0 and self.gnss_hz > 0):
            raise ConfigMismatch("radii and rates must be positive")

    @property
    def gnss_period(self) -> int:
        return max(1, int(round(1.0 / (self.gnss_hz * self.dt))))

    @property
    def bearing_stride(self) -> int:
        """Number of fixes spanned by the bearing/speed baseline."""
        return max(1, int(round(self.bearing_baseline * self.gnss_hz)))


def step(state: RobotState, action: ControlAction, cfg: SimConfig) -> RobotState:
    """Holonomic update: rotate first, then translate in the new body frame.

    Forward motion is scaled by ``v_max``; lateral motion additionally by
    ``lateral_gain``.
    """
    heading = wrap_angle(state.heading + action.theta * cfg.omega_max * cfg.dt)
    c, s = math.cos(heading), math.sin(heading)
    k = cfg.v_max * cfg.dt
    lat = action.x * cfg.lateral_gain
    de = k * (action.y * c - lat * s)
    dn = k * (action.y * s + lat * c)
    east, north = state.east + de, state.north + dn
    return RobotState(east, north, heading, math.hypot(de, dn) / cfg.dt)


# -- policies -------------------------------------------------------------------


@dataclass
class SimObservation:
    t: float
    rgb: np.ndarray
    depth: np.ndarray
    labels: np.ndarray
    bev: np.ndarray
    gnss: GeoFix
    bearing: float
    speed: float
    p1: LocalPoint
    p2: LocalPoint
    dt: float


class Policy(Protocol):
    def reset(self) -> None: ...

    def act(self, obs: SimObservation) -> tuple[ControlAction, Optional[Diagnostics]]: ...


class ZeroPolicy:
    def reset(self) -> None:
        pass

    def act(self, obs: SimObservation) -> tuple[ControlAction, Optional[Diagnostics]]:
        return ZERO_ACTION, None


Featurizer = Callable[[SimObservation], tuple[np.ndarray, np.ndarray]]


class PipelinePolicy:
    """Perception features, then the planner/controller with persistent state."""

    def __init__(self, params: PolicyParams, featurizer: Featurizer, feature_dims: tuple[int, int]) -> None:
        expected = feature_dims[0] + feature_dims[1] + 5
        if params.gru.input_dim != expected:
            raise ConfigMismatch(f"GRU expects {params.gru.input_dim} inputs, perception gives {expected}")
        self.params = params
        self.featurizer = featurizer
        self.reset()

    def reset(self) -> None:
        self.state = PolicyState.initial(self.params)

    def act(self, obs: SimObservation) -> tuple[ControlAction, Optional[Diagnostics]]:
        f_rgb, f_bev = self.featurizer(obs)
        z = fuse_inputs(f_rgb, f_bev, obs.p1, obs.p2, obs.speed)
        u, self.state, diag = control_policy(z, self.state, obs.p1, obs.p2, obs.speed, obs.dt, self.params)
        return u, diag


def oracle_featurizer(perception) -> Featurizer:
    def features(obs: SimObservation) -> tuple[np.ndarray, np.ndarray]:
        return perception.rgb_features(obs.labels, obs.depth), perception.bev_features(obs.bev)

    return features


class WindowedPolicy:
    """Runs the recurrent planner over the last ``K`` frames from a zero state every tick.

    This mirrors training, where each sample is a fresh K-frame window. Frames
    in the window are ``stride`` ticks apart; PID state persists across ticks.
    """

    def __init__(self, params: PolicyParams, featurizer: Featurizer, K: int = 1, stride: int = 1) -> None:
        if K < 1 or stride < 1:
            raise ConfigMismatch("window length and stride must be >= 1")
        self.params, self.featurizer, self.K, self.stride = params, featurizer, K, stride
        self.reset()

    def reset(self) -> None:
        self.state = PolicyState.initial(self.params)
        self.history: deque = deque(maxlen=(self.K - 1) * self.stride + 1)

    def act(self, obs: SimObservation) -> tuple[ControlAction, Optional[Diagnostics]]:
        self.history.append(self.featurizer(obs))
        frames = list(self.history)[::-1][:: self.stride][::-1]
        h = np.zeros(self.params.gru.hidden_dim)
        for f_rgb, f_bev in frames[:-1]:
            h = gru_step(fuse_inputs(f_rgb, f_bev, obs.p1, obs.p2, obs.speed), h, self.params.gru)
        z = fuse_inputs(*frames[-1], obs.p1, obs.p2, obs.speed)
        st = PolicyState(h, self.state.lat, self.state.lon, self.state.reference)
        u, self.state, diag = control_policy(z, st, obs.p1, obs.p2, obs.speed, obs.dt, self.params)
        return u, diag


def route_following_policy(dim: int = 8, gamma: float = 2.5, pace: float = 0.1) -> PipelinePolicy:
    """Hand-built planner that aims along the route points; the PID branch drives."""
    from .controller import MlpHeads
    from .perception import OraclePerception
    from .planner import route_following_params

    gru, heads = route_following_params(dim, dim, dim, pace=pace)
    params = PolicyParams(gru, heads, MlpHeads.zeros(dim), gamma=gamma)
    return PipelinePolicy(params, oracle_featurizer(OraclePerception(dim=dim)), (dim, dim))


def checkpoint_policy(path: str) -> WindowedPolicy:
    """Policy from a saved training checkpoint, fed with the trained encoders.

    Window length, frame stride and input pooling come from the checkpoint
    metadata when present.
    """
    from .learning import FeatureSpec, encode, load_checkpoint_meta, policy_params

    params, cfg, meta = load_checkpoint_meta(path)
    fs = FeatureSpec(int(meta.get("image_factor", 4)), int(meta.get("bev_factor", 16)))
    K, stride = int(meta.get("K", 1)), int(meta.get("stride", 1))

    def features(obs: SimObservation) -> tuple[np.ndarray, np.ndarray]:
        return encode(params, fs.image_input(obs.rgb, obs.depth), fs.bev_input(obs.bev))

    return WindowedPolicy(policy_params(params, cfg), features, K, stride)


# -- episodes -------------------------------------------------------------------

LOG_FIELDS = (
    [("tick", "i"), ("t", "f"), ("east", "f"), ("north", "f"), ("heading", "f"), ("speed", "f"),
     ("gnss_lat", "f"), ("gnss_lon", "f"), ("bearing", "f"), ("gnss_speed", "f"),
     ("p1x", "f"), ("p1y", "f"), ("p2x", "f"), ("p2y", "f"),
     ("along", "f"), ("cross_track", "f"), ("command", "s"), ("branch", "s"),
     ("theta_ref", "f"), ("v_ref", "f"), ("h_absmax", "f")]
    + [(f"wp{i}{a}", "f") for i in range(1, 6) for a in "xy"]
    + [(f"{src}_{c}", "f") for src in ("mlp", "pid", "final") for c in ("x", "y", "theta")]
)


@dataclass
class EpisodeLog:
    records: list = field(default_factory=list)
    outcome: str = ""
    path_xy: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    route_xy: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    bev_snapshots: list = field(default_factory=list)

    @property
    def positions(self) -> np.ndarray:
        return np.array([[r["east"], r["north"]] for r in self.records]).reshape(-1, 2)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    @property
    def max_cross_track(self) -> float:
        return float(self.column("cross_track").max()) if self.records else 0.0

    def distance_travelled(self) -> float:
        p = self.positions
        return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum()) if len(p) > 1 else 0.0

    def write(self, directory: str) -> list[str]:
        os.makedirs(directory, exist_ok=True)
        diag = os.path.join(directory, "diagnostics.txt")
        write_records(diag, LOG_FIELDS, self.records)
        with open(os.path.join(directory, "outcome.txt"), "w", encoding="utf-8") as f:
            f.write(self.outcome + "\n")
        return [diag] + replay(self, directory)


def _record(tick, t, state, fix, bearing, gnss_speed, p1, p2, along, ct, u, diag) -> dict:
    rec = {
        "tick": tick, "t": t, "east": state.east, "north": state.north, "heading": state.heading,
        "speed": state.speed, "gnss_lat": fix.lat, "gnss_lon": fix.lon, "bearing": bearing,
        "gnss_speed": gnss_speed, "p1x": p1.x, "p1y": p1.y, "p2x": p2.x, "p2y": p2.y,
        "along": along, "cross_track": ct,
    }
    if diag is None:
        rec.update(command="", branch="", theta_ref=math.nan, v_ref=math.nan, h_absmax=0.0)
        wps = np.full((5, 2), math.nan)
        mlp = pid = (math.nan,) * 3
    else:
        rec.update(
            command=diag.command.name, branch=diag.branch, theta_ref=diag.reference.theta_ref,
            v_ref=diag.reference.v_ref, h_absmax=float(np.max(np.abs(diag.h))),
        )
        wps = diag.plan.waypoints
        mlp, pid = diag.u_mlp.as_array(), diag.u_pid.as_array()
    for i in range(5):
        rec[f"wp{i + 1}x"], rec[f"wp{i + 1}y"] = float(wps[i, 0]), float(wps[i, 1])
    for src, vec in (("mlp", mlp), ("pid", pid), ("final", u.as_array())):
        for c, v in zip(("x", "y", "theta"), vec):
            rec[f"{src}_{c}"] = float(v)
    return rec


def start_state(world: World) -> RobotState:
    e, n = world.path.xy[0]
    return RobotState(float(e), float(n), math.pi / 2 - float(world.path.bearing[0]))


def run_episode(
    world: World,
    route: Sequence[GeoFix],
    policy: Policy,
    cfg: SimConfig = SimConfig(),
    intr=DEFAULT_INTRINSICS,
    ext=DEFAULT_EXTRINSICS,
    initial: Optional[RobotState] = None,
) -> EpisodeLog:
    """Tick perception, GNSS, route transform, BEV, policy and kinematics until termination."""
    if len(route) < 2:
        raise ConfigMismatch("route needs at least two points")
    rng = np.random.default_rng(cfg.seed)
    state = initial or start_state(world)
    policy.reset()
    tracker = BearingTracker(cfg.bearing_stride, initial=state.bearing, max_speed=cfg.max_gnss_speed)
    cursor = RouteCursor(route)
    goal = np.array(fix_to_enu(world.origin, route[-1]))
    log = EpisodeLog(path_xy=world.path.xy[::20].copy(),
                     route_xy=np.array([fix_to_enu(world.origin, f) for f in route]))
    fused = None
    fix = None
    for tick in range(cfg.max_ticks):
        t = tick * cfg.dt
        if tick % cfg.gnss_period == 0:
            fix = sample_gnss(world, state.east, state.north, rng if cfg.gnss_sigma > 0 or cfg.bias_zones else None,
                              cfg.gnss_sigma, cfg.bias_zones)
            tracker.update(t, fix)
        bearing = tracker.value
        p1, p2 = cursor.update(fix, bearing)
        rgb, depth, labels = world.render(state.pose, intr, ext, rng if cfg.pixel_noise > 0 else None, cfg.pixel_noise)
        fused = build_bev(labels, depth, intr, ext, fused, cfg.bev_alpha)
        if cfg.bev_every and tick % cfg.bev_every == 0:
            log.bev_snapshots.append((tick, fused.copy()))
        obs = SimObservation(t, rgb, depth, labels, fused, fix, bearing, tracker.speed, p1, p2, cfg.dt)
        u, diag = policy.act(obs)
        along, signed = world.path.project(state.position)
        log.records.append(_record(tick, t, state, fix, bearing, tracker.speed, p1, p2,
                                   float(along[0]), float(abs(signed[0])), u, diag))
        if np.hypot(*(state.position - goal)) < cfg.goal_radius:
            log.outcome = "goal"
            return log
        if abs(signed[0]) > cfg.max_cross_track:
            log.outcome = "blowout"
            return log
        state = step(state, u, cfg)
    log.outcome = "budget"
    return log


EXIT_CODES = {"goal": 0, "budget": 2, "blowout": 3}


# -- replay -----------------------------------------------------------------------


def _svg_polyline(points: np.ndarray, to_px, colour: str, width: float = 1.5) -> str:
    coords = " ".join("%.2f,%.2f" % to_px(x, y) for x, y in points)
    return f'<polyline points="{coords}" fill="none" stroke="{colour}" stroke-width="{width}"/>'


def trajectory_svg(log: EpisodeLog, size: int = 480) -> str:
    pos = log.positions
    pts = np.vstack([pos, log.path_xy, log.route_xy])
    lo, hi = pts.min(axis=0) - 2.0, pts.max(axis=0) + 2.0
    scale = (size - 20) / max(hi - lo)

    def to_px(x, y):
        return 10 + (x - lo[0]) * scale, size - 10 - (y - lo[1]) * scale

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    if len(log.path_xy):
        parts.append(_svg_polyline(log.path_xy, to_px, "#999999", 6.0))
    parts.append(_svg_polyline(pos, to_px, "#d62728"))
    for x, y in log.route_xy:
        px, py = to_px(x, y)
        parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" fill="#1f77b4"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def controls_svg(log: EpisodeLog, width: int = 640, height: int = 240) -> str:
    t = log.column("t")
    span = max(t[-1] - t[0], 1e-9)

    def to_px(x, y):
        return 10 + (x - t[0]) / span * (width - 20), height / 2 - y * (height / 2 - 10)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="10" y1="{height / 2}" x2="{width - 10}" y2="{height / 2}" stroke="#cccccc"/>']
    for name, colour in (("final_x", "#1f77b4"), ("final_y", "#2ca02c"), ("final_theta", "#d62728")):
        parts.append(_svg_polyline(np.column_stack([t, log.column(name)]), to_px, colour, 1.0))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def replay(log: EpisodeLog, directory: str) -> list[str]:
    """Write trajectory/control SVGs and BEV PNG snapshots; returns the written paths."""
    if not log.records:
        return []
    needed = {"t", "east", "north", "final_x", "final_y", "final_theta"}
    for k, r in enumerate(log.records):
        if not needed <= r.keys():
            raise BadLog(f"record {k} lacks {sorted(needed - r.keys())}")
        if not all(math.isfinite(r[n]) for n in needed):
            raise BadLog(f"record {k} has non-finite values")
    from PIL import Image

    os.makedirs(directory, exist_ok=True)
    out = []
    for name, text in (("trajectory.svg", trajectory_svg(log)), ("controls.svg", controls_svg(log))):
        path = os.path.join(directory, name)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        out.append(path)
    for tick, grid in log.bev_snapshots:
        path = os.path.join(directory, f"bev_{tick:05d}.png")
        Image.fromarray(colorize(grid)).save(path, optimize=False)
        out.append(path)
    return out
