"""Observation sets, routes on disk, K-frame windows and the synthetic route generator.

A generated route is an expert drive through a :class:`~seqnav.world.World`:
a pure-pursuit follower with full state access moves a holonomic base along
the centre line while the camera renders every tick and the GNSS receiver
reports at a lower rate. Waypoint labels are the expert's own future positions.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bevmap import NUM_CLASSES, CameraIntrinsics, CameraToRobot, build_bev
from .controller import ControlAction
from .errors import InvalidSpec, RouteTooShort, TruncatedPayload
from .geodesy import BearingTracker, GeoFix, LocalPoint, RouteCursor, global_to_local, wrap_angle
from .perception import one_hot
from .planner import NUM_WAYPOINTS, WaypointPlan
from .simulator import RobotState, SimConfig, step
from .tensorfile import read_records, read_tensors, write_records, write_tensors
from .world import BiasZone, PathSpec, World, sample_gnss

SPLITS = ("train", "val", "test")
DEFAULT_SPLIT_COUNTS = (16, 5, 5)


@dataclass(frozen=True)
class ExpertSpec:
    """Pure-pursuit teleoperator stand-in with an optional Ornstein-Uhlenbeck yaw disturbance."""

    lookahead: float = 1.0
    cruise: float = 0.8
    heading_gain: float = 1.5
    disturbance_sigma: float = 0.0
    disturbance_tau: float = 1.0

    def validate(self) -> None:
        if not (self.lookahead > 0 and 0 < self.cruise <= 1 and self.heading_gain > 0 and self.disturbance_tau > 0):
            raise InvalidSpec("expert lookahead, cruise, gain and tau must be positive (cruise <= 1)")
        if self.disturbance_sigma < 0:
            raise InvalidSpec("disturbance sigma must be non-negative")


@dataclass(frozen=True)
class SceneSpec:
    path: PathSpec = field(default_factory=PathSpec)
    road_half_width: float = 1.5
    n_obstacles: int = 12
    gnss_sigma: float = 0.0
    gnss_hz: float = 1.0
    frame_rate: float = 30.0
    # keep every n-th camera frame
    sample_every: int = 1
    # (s_start, s_end, lateral bias, extra sigma) along the path
    bias_zones: tuple = ()
    route_spacing: float = 5.0
    wp_spacing: float = 1.0
    image_width: int = 64
    image_height: int = 32
    hfov_deg: float = 90.0
    camera_height: float = 0.5
    camera_pitch: float = 0.25
    pixel_noise: float = 0.0
    expert: ExpertSpec = field(default_factory=ExpertSpec)
    max_seconds: float = 600.0

    def validate(self) -> None:
        self.path.validate()
        self.expert.validate()
        positive = {
            "road_half_width": self.road_half_width, "gnss_hz": self.gnss_hz, "frame_rate": self.frame_rate,
            "route_spacing": self.route_spacing, "wp_spacing": self.wp_spacing, "hfov_deg": self.hfov_deg,
            "camera_height": self.camera_height, "max_seconds": self.max_seconds,
        }
        for name, v in positive.items():
            if not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
                raise InvalidSpec(f"{name} must be positive, got {v!r}")
        if self.gnss_hz > self.frame_rate:
            raise InvalidSpec("GNSS rate cannot exceed the camera frame rate")
        if self.gnss_sigma < 0 or self.pixel_noise < 0 or self.n_obstacles < 0:
            raise InvalidSpec("noise levels and obstacle count must be non-negative")
        if self.sample_every < 1 or self.image_width < 1 or self.image_height < 1:
            raise InvalidSpec("sample_every and image size must be >= 1")
        for zone in self.bias_zones:
            if len(zone) != 4 or not zone[0] < zone[1]:
                raise InvalidSpec(f"bias zone {zone!r} must be (s_start < s_end, lateral, extra_sigma)")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.image_width, self.image_height, math.radians(self.hfov_deg))

    @property
    def extrinsics(self) -> CameraToRobot:
        return CameraToRobot.from_mount(height=self.camera_height, pitch=self.camera_pitch)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["path"] = PathSpec(**d["path"])
        d["expert"] = ExpertSpec(**d["expert"])
        d["bias_zones"] = tuple(tuple(z) for z in d.get("bias_zones", ()))
        return cls(**d)


@dataclass(frozen=True)
class ObservationSet:
    """One synchronized frame: RGB-D, labels, GNSS, route points, expert control and waypoint labels."""

    rgb: np.ndarray
    depth: np.ndarray
    labels: np.ndarray
    gnss: GeoFix
    route_pts: tuple
    control: ControlAction
    wp_truth: WaypointPlan
    speed: float
    timestamp: float
    bearing: float
    pose: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3) or self.labels.shape != (h, w):
            raise ValueError("rgb, depth and labels must share the image size")
        if len(self.route_pts) < 2:
            raise ValueError("an observation needs at least two route points")

    @property
    def seg_truth(self) -> np.ndarray:
        """Binary masks ``(H, W, C)``."""
        return one_hot(self.labels, NUM_CLASSES)

    def route_local(self) -> tuple[LocalPoint, LocalPoint]:
        """Route points in the robot frame implied by the GNSS fix and bearing."""
        return (global_to_local(self.route_pts[0], self.gnss, self.bearing),
                global_to_local(self.route_pts[1], self.gnss, self.bearing))

    def bev(self, intr: CameraIntrinsics, ext: CameraToRobot) -> np.ndarray:
        """Single-frame BEV from ground-truth labels."""
        return build_bev(self.labels, self.depth, intr, ext)


@dataclass
class Route:
    frames: list
    split: str
    spec: SceneSpec
    seed: int
    route_fixes: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError("a route needs at least one frame")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")

    def __len__(self) -> int:
        return len(self.frames)


def window(route: Route, K: int) -> list[tuple[ObservationSet, ...]]:
    """Sliding stride-1 windows of ``K`` consecutive frames; the last frame carries the labels."""
    if K not in (1, 2, 3):
        raise ValueError("K must be 1, 2 or 3")
    n = len(route.frames)
    if n < K:
        raise RouteTooShort(f"route has {n} frames, window needs {K}")
    return [tuple(route.frames[i : i + K]) for i in range(n - K + 1)]


# -- generator ----------------------------------------------------------------------


def _expert_action(world: World, state: RobotState, spec: ExpertSpec, disturbance: float) -> ControlAction:
    s, _ = world.path.project(state.position)
    target = world.path.point_at(float(s[0]) + spec.lookahead)
    d = target - state.position
    c, sn = math.cos(state.heading), math.sin(state.heading)
    forward = d[0] * c + d[1] * sn
    left = -d[0] * sn + d[1] * c
    err = math.atan2(left, forward)
    return ControlAction.clamped(0.0, spec.cruise * max(0.0, math.cos(err)), spec.heading_gain * err + disturbance)


def _future_waypoints(track: np.ndarray, i: int, spacing: float, tail: np.ndarray) -> np.ndarray:
    """Points at arc length ``spacing * l`` ahead of ``track[i]`` along the driven track.

    The track is extended by ``tail`` (a unit direction) past its end.
    """
    rest = track[i:]
    seg = np.linalg.norm(np.diff(rest, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    out = np.empty((NUM_WAYPOINTS, 2))
    for ell in range(NUM_WAYPOINTS):
        s = spacing * (ell + 1)
        if s <= cum[-1] and len(rest) > 1:
            out[ell] = [np.interp(s, cum, rest[:, 0]), np.interp(s, cum, rest[:, 1])]
        else:
            out[ell] = rest[-1] + (s - cum[-1]) * tail
    return out


def _to_robot_frame(points: np.ndarray, east: float, north: float, yaw: float) -> np.ndarray:
    d = points - np.array([east, north])
    c, s = math.cos(yaw), math.sin(yaw)
    # x right, y forward
    return np.column_stack([d[:, 0] * s - d[:, 1] * c, d[:, 0] * c + d[:, 1] * s])


def synth_route(spec: SceneSpec, seed: int, split: str = "train") -> Route:
    """Drive the expert along a generated world and record observation sets."""
    if not isinstance(spec, SceneSpec):
        raise InvalidSpec("spec must be a SceneSpec")
    spec.validate()
    rng = np.random.default_rng(seed)
    world = World.generate(spec.path, rng, spec.n_obstacles, spec.road_half_width)
    zones = tuple(BiasZone.across_path(world.path, a, b, lat, extra_sigma=sig) for a, b, lat, sig in spec.bias_zones)
    route_fixes = world.route_fixes(spec.route_spacing)
    intr, ext = spec.intrinsics, spec.extrinsics
    dt = 1.0 / spec.frame_rate
    cfg = SimConfig(dt=dt)
    gnss_period = max(1, int(round(spec.frame_rate / spec.gnss_hz)))

    # expert drive with full state access
    e0, n0 = world.path.xy[0]
    state = RobotState(float(e0), float(n0), math.pi / 2 - float(world.path.bearing[0]))
    states, actions = [state], []
    disturbance = 0.0
    decay = math.exp(-dt / spec.expert.disturbance_tau)
    kick = spec.expert.disturbance_sigma * math.sqrt(1.0 - decay * decay)
    max_ticks = int(spec.max_seconds * spec.frame_rate)
    for _ in range(max_ticks):
        if spec.expert.disturbance_sigma > 0:
            disturbance = decay * disturbance + kick * rng.standard_normal()
        u = _expert_action(world, state, spec.expert, disturbance)
        actions.append(u)
        s, _ = world.path.project(state.position)
        if float(s[0]) >= world.path.length - 0.5:
            break
        state = step(state, u, cfg)
        states.append(state)
    states = states[: len(actions)]
    track = np.array([st.position for st in states])
    end_dir = np.array([math.cos(states[-1].heading), math.sin(states[-1].heading)])

    tracker = BearingTracker(1, initial=wrap_angle(float(world.path.bearing[0])))
    cursor = RouteCursor(route_fixes)
    frames = []
    fix: Optional[GeoFix] = None
    for tick, (st, u) in enumerate(zip(states, actions)):
        t = tick * dt
        if tick % gnss_period == 0:
            noisy = spec.gnss_sigma > 0 or bool(zones)
            fix = sample_gnss(world, st.east, st.north, rng if noisy else None, spec.gnss_sigma, zones)
            tracker.update(t, fix)
        cursor.update(fix, tracker.value)
        if tick % spec.sample_every:
            continue
        rgb, depth, labels = world.render(st.pose, intr, ext, rng if spec.pixel_noise > 0 else None, spec.pixel_noise)
        future = _future_waypoints(track, tick, spec.wp_spacing, end_dir)
        wp = WaypointPlan.from_waypoints(_to_robot_frame(future, st.east, st.north, st.heading))
        frames.append(ObservationSet(
            rgb=rgb, depth=depth, labels=labels, gnss=fix, route_pts=cursor.points(), control=u,
            wp_truth=wp, speed=tracker.speed, timestamp=t, bearing=tracker.value, pose=st.pose,
        ))
    return Route(frames, split, spec, seed, route_fixes)


def vary_spec(base: SceneSpec, rng: np.random.Generator) -> SceneSpec:
    """Random path shape and heading around ``base``."""
    kind = str(rng.choice(["straight", "s_curve", "arc"]))
    path = PathSpec(
        kind=kind,
        length=base.path.length,
        heading=float(rng.uniform(-math.pi, math.pi)),
        curvature=float(rng.uniform(0.02, 0.05) * rng.choice([-1.0, 1.0])),
        wavelength=float(rng.uniform(30.0, 50.0)),
    )
    d = base.to_dict()
    d["path"] = asdict(path)
    return SceneSpec.from_dict(d)


def generate_splits(
    base: SceneSpec,
    seed: int,
    counts: Sequence[int] = DEFAULT_SPLIT_COUNTS,
) -> dict[str, list[Route]]:
    """Train/val/test routes with varied path shapes; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    out: dict[str, list[Route]] = {}
    for split, n in zip(SPLITS, counts):
        out[split] = []
        for _ in range(n):
            route_seed = int(rng.integers(0, 2**31 - 1))
            out[split].append(synth_route(vary_spec(base, rng), route_seed, split))
    return out


# -- on-disk format -----------------------------------------------------------------

RECORD_FIELDS = [
    ("timestamp", "f"), ("gnss_lat", "f"), ("gnss_lon", "f"),
    ("r1_lat", "f"), ("r1_lon", "f"), ("r2_lat", "f"), ("r2_lon", "f"),
    ("ctrl_x", "f"), ("ctrl_y", "f"), ("ctrl_theta", "f"),
    ("speed", "f"), ("bearing", "f"), ("east", "f"), ("north", "f"), ("yaw", "f"),
]


def write_route(route: Route, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    meta = {
        "split": route.split, "seed": route.seed, "spec": route.spec.to_dict(),
        "route_fixes": [[f.lat, f.lon] for f in route.route_fixes],
    }
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    fr = route.frames
    write_tensors(os.path.join(directory, "frames.sqnv"), {
        "rgb": np.stack([o.rgb for o in fr]),
        "depth": np.stack([o.depth for o in fr]).astype(np.float32),
        "labels": np.stack([o.labels for o in fr]),
        "wp_deltas": np.stack([o.wp_truth.deltas for o in fr]),
    })
    rows = []
    for o in fr:
        (r1, r2) = o.route_pts[:2]
        rows.append({
            "timestamp": o.timestamp, "gnss_lat": o.gnss.lat, "gnss_lon": o.gnss.lon,
            "r1_lat": r1.lat, "r1_lon": r1.lon, "r2_lat": r2.lat, "r2_lon": r2.lon,
            "ctrl_x": o.control.x, "ctrl_y": o.control.y, "ctrl_theta": o.control.theta,
            "speed": o.speed, "bearing": o.bearing, "east": o.pose[0], "north": o.pose[1], "yaw": o.pose[2],
        })
    write_records(os.path.join(directory, "records.txt"), RECORD_FIELDS, rows)


def read_route(directory: str) -> Route:
    with open(os.path.join(directory, "meta.json"), encoding="utf-8") as f:
        meta = json.load(f)
    tensors = read_tensors(os.path.join(directory, "frames.sqnv"))
    _, rows = read_records(os.path.join(directory, "records.txt"))
    n = len(rows)
    for name in ("rgb", "depth", "labels", "wp_deltas"):
        if name not in tensors or tensors[name].shape[0] != n:
            raise TruncatedPayload(f"{directory}: tensor {name!r} does not cover {n} records")
    frames = []
    for i, r in enumerate(rows):
        frames.append(ObservationSet(
            rgb=tensors["rgb"][i], depth=tensors["depth"][i], labels=tensors["labels"][i],
            gnss=GeoFix(r["gnss_lat"], r["gnss_lon"]),
            route_pts=(GeoFix(r["r1_lat"], r["r1_lon"]), GeoFix(r["r2_lat"], r["r2_lon"])),
            control=ControlAction(r["ctrl_x"], r["ctrl_y"], r["ctrl_theta"]),
            wp_truth=WaypointPlan(tensors["wp_deltas"][i]),
            speed=r["speed"], timestamp=r["timestamp"], bearing=r["bearing"],
            pose=(r["east"], r["north"], r["yaw"]),
        ))
    fixes = [GeoFix(lat, lon) for lat, lon in meta.get("route_fixes", [])]
    return Route(frames, meta["split"], SceneSpec.from_dict(meta["spec"]), int(meta["seed"]), fixes)


def write_splits(splits: dict[str, list[Route]], directory: str) -> list[str]:
    paths = []
    for split, routes in splits.items():
        for k, route in enumerate(routes):
            p = os.path.join(directory, split, f"route_{k:03d}")
            write_route(route, p)
            paths.append(p)
    return paths


def read_split(directory: str, split: str) -> list[Route]:
    root = os.path.join(directory, split)
    if not os.path.isdir(root):
        return []
    return [read_route(os.path.join(root, d)) for d in sorted(os.listdir(root))]


def world_for(route: Route) -> World:
    """Rebuild the world a route was generated in (same seed, same draws)."""
    rng = np.random.default_rng(route.seed)
    return World.generate(route.spec.path, rng, route.spec.n_obstacles, route.spec.road_half_width)
