"""Synthetic ground-plane world shared by the dataset generator and the simulator.

World frame is a local east/north/up (ENU) plane in meters around a GeoFix
origin. Robot poses are ``(east, north, yaw)`` with yaw measured
counter-clockwise from east; the compass bearing of the same heading is
``pi/2 - yaw``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .bevmap import PALETTE, CameraIntrinsics, CameraToRobot
from .errors import InvalidSpec
from .geodesy import GeoFix, enu_to_fix

ROAD = 0
BUILDING = 2
POLE = 5
VEGETATION = 8
TERRAIN = 9
SKY = 10

DEFAULT_ORIGIN = GeoFix(34.70, 137.40)
PATH_STEP = 0.05


@dataclass(frozen=True)
class PathSpec:
    """Centre-line description; curvature follows ``curvature * cos(2 pi s / wavelength)`` for S-curves."""

    kind: str = "straight"
    length: float = 50.0
    heading: float = 0.0
    curvature: float = 0.04
    wavelength: float = 40.0

    def validate(self) -> None:
        if self.kind not in ("straight", "s_curve", "arc"):
            raise InvalidSpec(f"unknown path kind {self.kind!r}")
        if not self.length > 0:
            raise InvalidSpec("path length must be positive")
        if self.kind == "s_curve" and not self.wavelength > 0:
            raise InvalidSpec("S-curve wavelength must be positive")

    def bearing_at(self, s):
        """Analytic compass bearing of the tangent at arc length ``s``."""
        s = np.asarray(s, dtype=np.float64)
        if self.kind == "straight":
            return self.heading + 0.0 * s
        if self.kind == "arc":
            return self.heading + self.curvature * s
        k = 2.0 * math.pi / self.wavelength
        return self.heading + self.curvature / k * np.sin(k * s)


class Path:
    """Densely sampled centre line with projection helpers."""

    def __init__(self, spec: PathSpec, start: tuple[float, float] = (0.0, 0.0)) -> None:
        spec.validate()
        self.spec = spec
        n = int(math.ceil(spec.length / PATH_STEP))
        s = np.linspace(0.0, spec.length, n + 1)
        b = spec.bearing_at(s)
        ds = np.diff(s)
        bm = spec.bearing_at(0.5 * (s[1:] + s[:-1]))
        east = np.concatenate([[0.0], np.cumsum(np.sin(bm) * ds)]) + start[0]
        north = np.concatenate([[0.0], np.cumsum(np.cos(bm) * ds)]) + start[1]
        self.s = s
        self.xy = np.column_stack([east, north])
        self.bearing = b
        self._tree = cKDTree(self.xy)

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        return np.array([np.interp(s, self.s, self.xy[:, 0]), np.interp(s, self.s, self.xy[:, 1])])

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Arc length and signed cross-track offset (positive = right of the path).

        Beyond either end of the path the distance to the end point is used.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        _, idx = self._tree.query(pts)
        best_d = np.full(len(pts), np.inf)
        best_s = np.zeros(len(pts))
        best_sign = np.ones(len(pts))
        for off in (-1, 0):
            a = np.clip(idx + off, 0, len(self.s) - 2)
            p0, p1 = self.xy[a], self.xy[a + 1]
            seg = p1 - p0
            L2 = np.einsum("ij,ij->i", seg, seg)
            t = np.clip(np.einsum("ij,ij->i", pts - p0, seg) / L2, 0.0, 1.0)
            foot = p0 + t[:, None] * seg
            d = np.linalg.norm(pts - foot, axis=1)
            cross = seg[:, 0] * (pts[:, 1] - p0[:, 1]) - seg[:, 1] * (pts[:, 0] - p0[:, 0])
            better = d < best_d
            best_d = np.where(better, d, best_d)
            best_s = np.where(better, self.s[a] + t * np.sqrt(L2), best_s)
            best_sign = np.where(better, np.where(cross > 0, -1.0, 1.0), best_sign)
        return best_s, best_d * best_sign

    def cross_track(self, points: np.ndarray) -> np.ndarray:
        return np.abs(self.project(points)[1])

    def route_points(self, spacing: float = 5.0) -> np.ndarray:
        """ENU points every ``spacing`` meters, always including the goal."""
        stations = list(np.arange(spacing, self.length, spacing))
        if not stations or self.length - stations[-1] > 1e-9:
            stations.append(self.length)
        return np.array([self.point_at(s) for s in stations])


@dataclass
class World:
    path: Path
    road_half_width: float = 1.5
    # rows of (east, north, radius, height, class id)
    obstacles: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))
    origin: GeoFix = DEFAULT_ORIGIN
    max_range: float = 40.0

    @classmethod
    def generate(
        cls,
        spec: PathSpec,
        rng: np.random.Generator,
        n_obstacles: int = 12,
        road_half_width: float = 1.5,
        origin: GeoFix = DEFAULT_ORIGIN,
    ) -> "World":
        path = Path(spec)
        obs = []
        while len(obs) < n_obstacles:
            s = rng.uniform(0.0, path.length + 10.0)
            side = rng.choice([-1.0, 1.0])
            off = side * rng.uniform(road_half_width + 1.5, road_half_width + 8.0)
            b = float(spec.bearing_at(min(s, path.length)))
            base = path.point_at(s)
            east = base[0] + off * math.cos(b)
            north = base[1] - off * math.sin(b)
            kind = rng.choice([VEGETATION, POLE, BUILDING])
            radius = {VEGETATION: 0.6, POLE: 0.15, BUILDING: 1.5}[int(kind)]
            height = {VEGETATION: 3.0, POLE: 2.5, BUILDING: 5.0}[int(kind)]
            obs.append((east, north, radius, height, float(kind)))
        return cls(path, road_half_width, np.array(obs, dtype=np.float64).reshape(-1, 5), origin)

    def terrain_class(self, east: np.ndarray, north: np.ndarray) -> np.ndarray:
        d = self.path.cross_track(np.column_stack([east, north]))
        return np.where(d <= self.road_half_width, ROAD, TERRAIN).astype(np.uint8)

    def to_fix(self, east: float, north: float) -> GeoFix:
        return enu_to_fix(self.origin, east, north)

    def route_fixes(self, spacing: float = 5.0) -> list[GeoFix]:
        return [self.to_fix(e, n) for e, n in self.path.route_points(spacing)]

    def render(
        self,
        pose: Sequence[float],
        intr: CameraIntrinsics,
        ext: CameraToRobot,
        rng: Optional[np.random.Generator] = None,
        pixel_noise: float = 0.0,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Ray-cast the scene from robot ``pose``.

        Returns ``(rgb uint8 HxWx3, depth float32 HxW with 0 = invalid, labels uint8 HxW)``.
        """
        east, north, yaw = (float(v) for v in pose)
        h, w = intr.height, intr.width
        v, u = np.mgrid[0:h, 0:w]
        cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones((h, w))], axis=-1)
        d_robot = cam.reshape(-1, 3) @ ext.rotation.T
        o_robot = ext.translation
        c, s = math.cos(yaw), math.sin(yaw)
        d_world = np.column_stack(
            [c * d_robot[:, 0] - s * d_robot[:, 1], s * d_robot[:, 0] + c * d_robot[:, 1], d_robot[:, 2]]
        )
        o_world = np.array([east + c * o_robot[0] - s * o_robot[1], north + s * o_robot[0] + c * o_robot[1], o_robot[2]])

        n = len(d_world)
        t_hit = np.full(n, np.inf)
        label = np.full(n, SKY, dtype=np.uint8)
        down = d_world[:, 2] < -1e-12
        t_ground = np.where(down, -o_world[2] / np.where(down, d_world[:, 2], -1.0), np.inf)
        t_hit = np.where(down, t_ground, t_hit)
        ground_idx = np.flatnonzero(down)
        if ground_idx.size:
            gp = o_world[None, :2] + t_ground[ground_idx, None] * d_world[ground_idx, :2]
            label[ground_idx] = self.terrain_class(gp[:, 0], gp[:, 1])
        for ox, oy, rad, height, kind in self.obstacles:
            dx, dy = d_world[:, 0], d_world[:, 1]
            fx, fy = o_world[0] - ox, o_world[1] - oy
            a = dx * dx + dy * dy
            b = 2.0 * (fx * dx + fy * dy)
            cc = fx * fx + fy * fy - rad * rad
            disc = b * b - 4.0 * a * cc
            ok = (disc >= 0) & (a > 1e-12)
            t = np.where(ok, (-b - np.sqrt(np.where(ok, disc, 0.0))) / (2.0 * np.where(ok, a, 1.0)), np.inf)
            z = o_world[2] + t * d_world[:, 2]
            hit = ok & (t > 0) & (z >= 0) & (z <= height) & (t < t_hit)
            t_hit = np.where(hit, t, t_hit)
            label = np.where(hit, np.uint8(kind), label)
        depth = np.where(np.isfinite(t_hit) & (t_hit <= self.max_range), t_hit, 0.0).astype(np.float32)
        label = label.reshape(h, w)
        depth = depth.reshape(h, w)

        shade = np.where(depth > 0, 1.0 - 0.4 * np.minimum(depth, self.max_range) / self.max_range, 1.0)
        rgb = PALETTE[label].astype(np.float64) * shade[..., None]
        if pixel_noise > 0:
            if rng is None:
                raise ValueError("pixel noise requires an rng")
            rgb = rgb + rng.normal(0.0, pixel_noise, rgb.shape)
        rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
        return rgb, depth, label


DEFAULT_INTRINSICS = CameraIntrinsics.from_fov(64, 32, math.radians(90.0))
DEFAULT_EXTRINSICS = CameraToRobot.from_mount(height=0.5, pitch=0.25)


def point_in_polygon(point: Sequence[float], polygon: np.ndarray) -> bool:
    x, y = float(point[0]), float(point[1])
    poly = np.asarray(polygon, dtype=np.float64)
    inside = False
    j = len(poly) - 1
    for i in range(len(poly)):
        xi, yi = poly[i]
        xj, yj = poly[j]
        if (yi > y) != (yj > y) and x < (xj - xi) * (y - yi) / (yj - yi) + xi:
            inside = not inside
        j = i
    return inside


@dataclass(frozen=True)
class BiasZone:
    """Polygon (ENU vertices) inside which GNSS fixes are offset and noisier."""

    polygon: tuple
    bias: tuple[float, float]
    extra_sigma: float = 0.0

    def contains(self, east: float, north: float) -> bool:
        return point_in_polygon((east, north), np.asarray(self.polygon))

    @classmethod
    def across_path(cls, path: Path, s_start: float, s_end: float, lateral: float, half_width: float = 25.0, extra_sigma: float = 0.0) -> "BiasZone":
        """Zone covering the path between two stations; ``lateral`` biases to the path's right."""
        pts = []
        stations = np.linspace(s_start, s_end, 8)
        for sign in (1.0, -1.0):
            seq = stations if sign > 0 else stations[::-1]
            for s in seq:
                b = float(path.spec.bearing_at(s))
                p = path.point_at(s)
                pts.append((p[0] + sign * half_width * math.cos(b), p[1] - sign * half_width * math.sin(b)))
        b_mid = float(path.spec.bearing_at(0.5 * (s_start + s_end)))
        bias = (lateral * math.cos(b_mid), -lateral * math.sin(b_mid))
        return cls(tuple(pts), bias, extra_sigma)


def sample_gnss(
    world: World,
    east: float,
    north: float,
    rng: Optional[np.random.Generator],
    sigma: float = 0.0,
    zones: Sequence[BiasZone] = (),
) -> GeoFix:
    """Noisy GNSS fix of an ENU position."""
    de, dn = 0.0, 0.0
    total_sigma = sigma
    for z in zones:
        if z.contains(east, north):
            de += z.bias[0]
            dn += z.bias[1]
            total_sigma = math.hypot(total_sigma, z.extra_sigma)
    if total_sigma > 0:
        if rng is None:
            raise ValueError("GNSS noise requires an rng")
        de += rng.normal(0.0, total_sigma)
        dn += rng.normal(0.0, total_sigma)
    return world.to_fix(east + de, north + dn)
