"""Arc-length-parameterized reference path and Frenet-frame conversions.

Sign convention: lateral offsets l and d are positive to the LEFT of the
path (+90 deg from the tangent).  The line is immutable after
construction; all queries are read-only.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .vehicle import VehicleState, wrap_angle

DEFAULT_RESOLUTION = 0.5   # m, station spacing
PROJECTION_BAND = 20.0     # m, max |l| for a trusted projection


class ProjectionError(ValueError):
    """Raised when a Frenet conversion is geometrically invalid."""


@dataclass(frozen=True)
class FrenetPose:
    s: float            # station, m
    l: float            # signed lateral offset, m, left positive
    match_index: int    # nearest station index
    clamped: bool = False  # true when past an endpoint or outside the band


@dataclass(frozen=True)
class LateralErrorState:
    """Tracking error (d, d_dot, e_phi, e_phi_dot) of Fig.-3 style geometry."""

    d: float          # m
    d_dot: float      # m/s
    e_phi: float      # rad, wrapped
    e_phi_dot: float  # rad/s

    def as_vector(self) -> np.ndarray:
        return np.array([self.d, self.d_dot, self.e_phi, self.e_phi_dot])


class ReferenceLine:
    """C2 path resampled at uniform arc-length stations.

    Built from waypoints via cubic-spline interpolation (not-a-knot ends,
    so curvature stays meaningful at the extremes).  Stations are spaced
    exactly ``resolution`` apart; any sub-resolution tail of the raw
    spline is dropped.
    """

    def __init__(self, stations, points, resolution):
        self.stations = np.asarray(stations, dtype=float)
        self.points = np.asarray(points, dtype=float)
        self.resolution = float(resolution)
        if len(self.stations) < 2:
            raise ValueError("reference line needs at least 2 stations")
        self._sx = CubicSpline(self.stations, self.points[:, 0])
        self._sy = CubicSpline(self.stations, self.points[:, 1])
        self.headings = self._heading(self.stations)
        self.curvatures = self._curvature(self.stations)
        max_kres = np.max(np.abs(self.curvatures)) * self.resolution
        if max_kres >= 0.5:
            raise ValueError(f"curvature too high for station spacing: "
                             f"|kappa|*resolution = {max_kres:.3f} >= 0.5")

    @property
    def length(self) -> float:
        return float(self.stations[-1])

    def point_at(self, s):
        return np.stack([self._sx(s), self._sy(s)], axis=-1)

    def heading_at(self, s):
        return self._heading(s)

    def curvature_at(self, s):
        return self._curvature(s)

    def _heading(self, s):
        return np.arctan2(self._sy(s, 1), self._sx(s, 1))

    def _curvature(self, s):
        dx, dy = self._sx(s, 1), self._sy(s, 1)
        ddx, ddy = self._sx(s, 2), self._sy(s, 2)
        return (dx * ddy - dy * ddx) / np.power(dx * dx + dy * dy, 1.5)


def build_reference(waypoints, resolution: float = DEFAULT_RESOLUTION) -> ReferenceLine:
    """Fit a C2 reference line through waypoints and resample uniformly."""
    wp = np.asarray(waypoints, dtype=float)
    if wp.ndim != 2 or wp.shape[0] < 2 or wp.shape[1] != 2:
        raise ValueError("need at least 2 (x, y) waypoints")
    seg = np.hypot(np.diff(wp[:, 0]), np.diff(wp[:, 1]))
    if np.any(seg < 1e-9):
        raise ValueError("duplicate consecutive waypoints")

    # Chord-length parameterization, then a dense arc-length table.
    u = np.concatenate([[0.0], np.cumsum(seg)])
    sx, sy = CubicSpline(u, wp[:, 0]), CubicSpline(u, wp[:, 1])
    n_fine = max(20 * len(wp), int(u[-1] / max(resolution, 1e-6)) * 8 + 1)
    uf = np.linspace(0.0, u[-1], n_fine)
    xf, yf = sx(uf), sy(uf)
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(xf), np.diff(yf)))])

    n_stations = int(math.floor(arc[-1] / resolution)) + 1
    if n_stations < 2:
        raise ValueError("waypoints span less than one station spacing")
    stations = np.arange(n_stations) * resolution
    u_of_s = np.interp(stations, arc, uf)
    points = np.stack([sx(u_of_s), sy(u_of_s)], axis=1)
    return ReferenceLine(stations, points, resolution)


def project(ref: ReferenceLine, point) -> FrenetPose:
    """Project a world point onto the line (nearest-vertex seed + Newton).

    Past the endpoints or outside the lateral band the result is clamped
    to the closest valid station and flagged.  Ties between equidistant
    stations break toward the smaller s.
    """
    p = np.asarray(point, dtype=float)
    d2 = np.sum((ref.points - p) ** 2, axis=1)
    idx = int(np.argmin(d2))  # argmin returns the first (smallest-s) minimizer
    s = float(ref.stations[idx])

    clamped = False
    for _ in range(40):
        r = ref.point_at(s)
        dr = np.array([ref._sx(s, 1), ref._sy(s, 1)])
        ddr = np.array([ref._sx(s, 2), ref._sy(s, 2)])
        diff = p - r
        g = float(diff @ dr)
        gp = float(-(dr @ dr) + diff @ ddr)
        if abs(gp) < 1e-14:
            break
        step = g / gp
        s_new = min(max(s - step, 0.0), ref.length)
        if abs(s_new - s) < 1e-12:
            s = s_new
            break
        s = s_new

    r = ref.point_at(s)
    dr = np.array([ref._sx(s, 1), ref._sy(s, 1)])
    tangent = dr / np.hypot(dr[0], dr[1])
    diff = p - r
    l = float(-diff[0] * tangent[1] + diff[1] * tangent[0])

    # Residual tangential component at an endpoint means the true minimum
    # lies off the line.
    g_end = float(diff @ dr)
    if (s <= 0.0 and g_end < -1e-9) or (s >= ref.length and g_end > 1e-9):
        clamped = True
    if abs(l) > PROJECTION_BAND:
        clamped = True

    match_index = int(round(s / ref.resolution))
    match_index = min(max(match_index, 0), len(ref.stations) - 1)
    return FrenetPose(s=s, l=l, match_index=match_index, clamped=clamped)


def frenet_to_cartesian(ref: ReferenceLine, s: float, l: float):
    """Map (s, l) to (x, y, theta).  Heading assumes constant l."""
    if not (-1e-9 <= s <= ref.length + 1e-9):
        raise ProjectionError(f"station {s} outside [0, {ref.length}]")
    s = min(max(s, 0.0), ref.length)
    kappa = float(ref.curvature_at(s))
    if 1.0 - kappa * l <= 0.0:
        raise ProjectionError(f"offset {l} beyond curvature singularity 1/kappa = {1.0 / kappa:.3f}")
    theta = float(ref.heading_at(s))
    x0, y0 = ref.point_at(s)
    return (float(x0 - l * math.sin(theta)),
            float(y0 + l * math.cos(theta)),
            theta)


def error_state(ref: ReferenceLine, state: VehicleState) -> LateralErrorState:
    """Lateral tracking error of a vehicle state against the line.

    d_dot = |v| sin(e_phi); s_dot = |v| cos(e_phi) / (1 - kappa d);
    e_phi_dot = yaw_rate - s_dot * kappa.
    """
    pose = project(ref, (state.x, state.y))
    if pose.clamped:
        raise ProjectionError("vehicle projection clamped (off the end or out of band)")
    kappa = float(ref.curvature_at(pose.s))
    theta_r = float(ref.heading_at(pose.s))
    e_phi = wrap_angle(state.theta - theta_r)
    denom = 1.0 - kappa * pose.l
    if denom <= 0.0:
        raise ProjectionError("1 - kappa*d <= 0: Frenet rate singularity")
    v = abs(state.v)
    s_dot = v * math.cos(e_phi) / denom
    return LateralErrorState(d=pose.l,
                             d_dot=v * math.sin(e_phi),
                             e_phi=e_phi,
                             e_phi_dot=state.yaw_rate - s_dot * kappa)
