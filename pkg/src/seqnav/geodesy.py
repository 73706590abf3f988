"""Latitude/longitude mathematics for route following.

Angles are stored in radians everywhere except on :class:`GeoFix`, which
keeps degrees because that is what GNSS receivers and route files carry.

Local frame convention: ``x`` points to the robot's right, ``y`` points
forward. Bearings are compass-like, measured clockwise from north.
"""

from __future__ import annotations

import enum
import math
from collections import Counter, deque
from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import CoincidentFixes, NonPositiveInterval

COINCIDENCE_TOLERANCE_M = 0.01
DEFAULT_TAU1 = 1.0
DEFAULT_TAU2 = 2.5


def wrap_angle(angle: float) -> float:
    """Wrap ``angle`` (radians) into ``(-pi, pi]``."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    if wrapped == -math.pi:
        return math.pi
    return wrapped


def _normalize_lon(lon: float) -> float:
    lon = math.fmod(lon, 360.0)
    if lon > 180.0:
        lon -= 360.0
    elif lon <= -180.0:
        lon += 360.0
    return lon


@dataclass(frozen=True)
class GeoFix:
    """A GNSS position in degrees; longitude is normalised to (-180, 180]."""

    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite fix: {self.lat}, {self.lon}")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        object.__setattr__(self, "lon", _normalize_lon(float(self.lon)))
        object.__setattr__(self, "lat", float(self.lat))

    @property
    def lat_rad(self) -> float:
        return math.radians(self.lat)

    @property
    def lon_rad(self) -> float:
        return math.radians(self.lon)


@dataclass(frozen=True)
class Ellipsoid:
    semi_major_a: float
    eccentricity_sq_e2: float

    def __post_init__(self) -> None:
        if not self.semi_major_a > 0:
            raise ValueError("semi-major axis must be positive")
        if not 0.0 <= self.eccentricity_sq_e2 < 1.0:
            raise ValueError("eccentricity squared must lie in [0, 1)")


WGS84 = Ellipsoid(6378137.0, 0.00669437999014)


@dataclass(frozen=True)
class LocalPoint:
    """Offset in the robot frame, meters (x right, y forward)."""

    x: float
    y: float


class Command(enum.Enum):
    LEFT = 0
    STRAIGHT = 1
    RIGHT = 2


def _delta_lon_rad(lon_from: float, lon_to: float) -> float:
    return math.radians(_normalize_lon(lon_to - lon_from))


def curvature_radii(phi_c: float, ell: Ellipsoid = WGS84) -> tuple[float, float]:
    """Meridional and prime-vertical radii of curvature at latitude ``phi_c`` (radians).

    Returns ``(C_m, C_e)`` in meters.
    """
    if abs(phi_c) > math.pi / 2 + 1e-15:
        raise ValueError(f"latitude out of range: {phi_c}")
    a, e2 = ell.semi_major_a, ell.eccentricity_sq_e2
    s = math.sin(phi_c)
    w = 1.0 - e2 * s * s
    c_m = a * (1.0 - e2) / (w * math.sqrt(w))
    c_e = a / math.sqrt(w)
    return c_m, c_e


def great_circle_distance(a: GeoFix, b: GeoFix, ell: Ellipsoid = WGS84) -> float:
    """Haversine distance on a sphere of radius C_e at the midpoint latitude."""
    phi1, phi2 = a.lat_rad, b.lat_rad
    dphi = math.radians(b.lat - a.lat)
    dlam = _delta_lon_rad(a.lon, b.lon)
    _, radius = curvature_radii(0.5 * (phi1 + phi2), ell)
    s_phi = math.sin(0.5 * dphi)
    s_lam = math.sin(0.5 * dlam)
    h = s_phi * s_phi + math.cos(phi1) * math.cos(phi2) * s_lam * s_lam
    h = min(1.0, max(0.0, h))
    return 2.0 * radius * math.asin(math.sqrt(h))


def bearing(
    prev: GeoFix,
    curr: GeoFix,
    ell: Ellipsoid = WGS84,
    tolerance_m: float = COINCIDENCE_TOLERANCE_M,
) -> float:
    """Initial bearing from ``prev`` to ``curr`` in radians, clockwise from north.

    Raises
    ------
    CoincidentFixes
        If the fixes are closer than ``tolerance_m``; the caller should keep
        its last valid bearing.
    """
    if great_circle_distance(prev, curr, ell) < tolerance_m:
        raise CoincidentFixes(f"fixes {prev} and {curr} closer than {tolerance_m} m")
    phi1, phi2 = prev.lat_rad, curr.lat_rad
    dphi = math.radians(curr.lat - prev.lat)
    dlam = _delta_lon_rad(prev.lon, curr.lon)
    num = math.sin(dlam) * math.cos(phi2)
    # cos(p1)sin(p2) - sin(p1)cos(p2)cos(dl), rewritten so nearby fixes do not cancel
    s_half = math.sin(0.5 * dlam)
    den = math.sin(dphi) + 2.0 * math.sin(phi1) * math.cos(phi2) * s_half * s_half
    return wrap_angle(math.atan2(num, den))


def global_to_local(
    route_pt: GeoFix, robot: GeoFix, beta: float, ell: Ellipsoid = WGS84
) -> LocalPoint:
    """Project ``route_pt`` into the robot frame of a robot at ``robot`` with bearing ``beta``."""
    phi_c = robot.lat_rad
    c_m, c_e = curvature_radii(phi_c, ell)
    dx = c_e * math.cos(phi_c) * _delta_lon_rad(robot.lon, route_pt.lon)
    dy = c_m * math.radians(route_pt.lat - robot.lat)
    cb, sb = math.cos(beta), math.sin(beta)
    return LocalPoint(cb * dx - sb * dy, sb * dx + cb * dy)


def velocity_from_fixes(prev: GeoFix, curr: GeoFix, dt: float, ell: Ellipsoid = WGS84) -> float:
    if not dt > 0:
        raise NonPositiveInterval(f"dt must be positive, got {dt}")
    return great_circle_distance(prev, curr, ell) / dt


def infer_command(
    p1: LocalPoint,
    p2: LocalPoint,
    tau1: float = DEFAULT_TAU1,
    tau2: float = DEFAULT_TAU2,
    conflicts: Optional[Counter] = None,
) -> Command:
    """Threshold the lateral offsets of the next two route points.

    Left is tested first. When the Right condition also holds the call is
    counted under ``conflicts["left_right"]`` if a counter is supplied.
    """
    if not (tau1 > 0 and tau2 > 0):
        raise ValueError("thresholds must be positive")
    left = p1.x <= -tau1 or p2.x <= -tau2
    right = p1.x >= tau1 or p2.x >= tau2
    if left:
        if right and conflicts is not None:
            conflicts["left_right"] += 1
        return Command.LEFT
    if right:
        return Command.RIGHT
    return Command.STRAIGHT


# -- plumbing between a metric world frame and fixes -------------------------


def enu_to_fix(origin: GeoFix, east: float, north: float, ell: Ellipsoid = WGS84) -> GeoFix:
    """Inverse equirectangular map of a metric offset around ``origin``."""
    phi0 = origin.lat_rad
    c_m, c_e = curvature_radii(phi0, ell)
    lat = origin.lat + math.degrees(north / c_m)
    lon = origin.lon + math.degrees(east / (c_e * math.cos(phi0)))
    return GeoFix(lat, lon)


def fix_to_enu(origin: GeoFix, fix: GeoFix, ell: Ellipsoid = WGS84) -> tuple[float, float]:
    phi0 = origin.lat_rad
    c_m, c_e = curvature_radii(phi0, ell)
    east = c_e * math.cos(phi0) * _delta_lon_rad(origin.lon, fix.lon)
    north = c_m * math.radians(fix.lat - origin.lat)
    return east, north


class BearingTracker:
    """Bearing from a stream of fixes with hold-last-valid semantics.

    The bearing is computed between the newest fix and the one ``stride``
    updates earlier. ``max_speed`` (m/s), when set, rejects pairs whose
    implied speed is physically impossible, which is how a GNSS jump shows up.
    """

    def __init__(
        self,
        stride: int = 1,
        initial: Optional[float] = None,
        ell: Ellipsoid = WGS84,
        tolerance_m: float = COINCIDENCE_TOLERANCE_M,
        max_speed: Optional[float] = None,
    ) -> None:
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.stride = stride
        self.ell = ell
        self.tolerance_m = tolerance_m
        self.max_speed = max_speed
        self.value = initial
        self.speed = 0.0
        self.rejected = 0
        self._fixes: deque[tuple[float, GeoFix]] = deque(maxlen=stride + 1)

    def update(self, t: float, fix: GeoFix) -> Optional[float]:
        self._fixes.append((t, fix))
        if len(self._fixes) <= self.stride:
            return self.value
        t0, f0 = self._fixes[0]
        dist = great_circle_distance(f0, fix, self.ell)
        speed = dist / (t - t0) if t > t0 else math.inf
        if self.max_speed is not None and speed > self.max_speed:
            self.rejected += 1
            return self.value
        self.speed = speed
        try:
            self.value = bearing(f0, fix, self.ell, self.tolerance_m)
        except CoincidentFixes:
            pass
        return self.value


class RouteCursor:
    """Tracks which two route points lie ahead of the robot.

    The cursor only moves forward. A point counts as passed once the robot
    is within ``reach_radius`` of it or has crossed, to within
    ``pass_ahead`` meters, the line through it perpendicular to the next
    route segment. Passing is judged from positions only, so a noisy
    bearing cannot skip points. The last point is repeated as ``p2``.
    """

    def __init__(
        self,
        route: Sequence[GeoFix],
        pass_ahead: float = 0.5,
        reach_radius: float = 1.0,
        ell: Ellipsoid = WGS84,
    ) -> None:
        if len(route) < 2:
            raise ValueError("a route needs at least two points")
        self.route = list(route)
        self.pass_ahead = pass_ahead
        self.reach_radius = reach_radius
        self.ell = ell
        self.index = 0

    def _passed(self, fix: GeoFix, i: int) -> bool:
        # north-up offsets (beta = 0) of the point and the following one
        p = global_to_local(self.route[i], fix, 0.0, self.ell)
        q = global_to_local(self.route[i + 1], fix, 0.0, self.ell)
        if math.hypot(p.x, p.y) < self.reach_radius:
            return True
        sx, sy = q.x - p.x, q.y - p.y
        norm = math.hypot(sx, sy)
        if norm == 0.0:
            return True
        # robot offset from the point, projected on the outgoing segment
        return (-p.x * sx - p.y * sy) / norm >= -self.pass_ahead

    def update(self, fix: GeoFix, beta: float) -> tuple[LocalPoint, LocalPoint]:
        last = len(self.route) - 1
        while self.index < last and self._passed(fix, self.index):
            self.index += 1
        p1 = global_to_local(self.route[self.index], fix, beta, self.ell)
        p2 = global_to_local(self.route[min(self.index + 1, last)], fix, beta, self.ell)
        return p1, p2

    def points(self) -> tuple[GeoFix, GeoFix]:
        last = len(self.route) - 1
        return self.route[self.index], self.route[min(self.index + 1, last)]
