"""Closed race-track centerline as an arclength-parameterized periodic spline."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from scipy.interpolate import CubicSpline

from .vehicle import PX, PY, THETA

MAX_KNOT_SPACING = 0.03
_CLOSURE_TOL = 1e-9


@dataclass(frozen=True)
class Centerline:
    """Closed loop of waypoints.

    ``waypoints`` repeats its first point as the last one.  ``orientation``
    is +1 for counterclockwise and -1 for clockwise tracks.
    """

    waypoints: np.ndarray
    width: float
    orientation: int = 1

    def __post_init__(self) -> None:
        pts = np.asarray(self.waypoints, dtype=float)
        object.__setattr__(self, "waypoints", pts)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("waypoints must be a list of [x, y] pairs")
        if not np.all(np.isfinite(pts)):
            raise ValueError("waypoints must be finite")
        if len(pts) < 5:
            raise ValueError("a closed centerline needs at least 4 distinct waypoints")
        if np.linalg.norm(pts[0] - pts[-1]) > _CLOSURE_TOL:
            raise ValueError("centerline is open: last waypoint must repeat the first")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(seg <= _CLOSURE_TOL):
            raise ValueError("centerline has repeated consecutive waypoints")
        if not self.width > 0:
            raise ValueError("track width must be positive")
        if self.orientation not in (1, -1):
            raise ValueError("orientation must be +1 (ccw) or -1 (cw)")

    @property
    def length(self) -> float:
        """Polyline length, a lower bound of the smooth track length."""
        return float(np.sum(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)))


class TrackSpline:
    """Periodic cubic spline ``theta -> (x, y)`` with near-unit speed.

    ``theta`` may be any real number; it is wrapped modulo ``length`` at
    evaluation time only.
    """

    def __init__(self, knots: np.ndarray, points: np.ndarray, width: float, orientation: int = 1):
        self._spline = CubicSpline(knots, points, bc_type="periodic")
        self._d1 = self._spline.derivative(1)
        self._d2 = self._spline.derivative(2)
        self.knots = knots
        self.length = float(knots[-1])
        self.width = float(width)
        self.orientation = orientation

    def wrap(self, theta):
        return np.mod(theta, self.length)

    def position(self, theta) -> np.ndarray:
        return self._spline(self.wrap(theta))

    def tangent(self, theta) -> np.ndarray:
        return self._d1(self.wrap(theta))

    def curvature_vector(self, theta) -> np.ndarray:
        return self._d2(self.wrap(theta))

    def eval_center(self, theta):
        """Return ``(px, py, dpx, dpy)`` at progress ``theta``."""
        s = self.wrap(theta)
        p = self._spline(s)
        d = self._d1(s)
        return p[..., 0], p[..., 1], d[..., 0], d[..., 1]

    def heading(self, theta):
        d = self.tangent(theta)
        return np.arctan2(d[..., 1], d[..., 0])

    def project(self, point, theta_guess: float | None = None, window: float = 0.5) -> float:
        """Progress of the centerline point closest to ``point``.

        With ``theta_guess`` the search is restricted to a window around it
        and the returned value is unwrapped near the guess.
        """
        point = np.asarray(point, dtype=float)
        if theta_guess is None:
            grid = np.linspace(0.0, self.length, int(self.length / 0.01) + 1)
        else:
            grid = theta_guess + np.linspace(-window, window, int(2 * window / 0.005) + 1)
        d2 = np.sum((self.position(grid) - point) ** 2, axis=-1)
        best = float(grid[int(np.argmin(d2))])
        # two Newton refinements on the squared distance
        for _ in range(3):
            p = self.position(best)
            d1 = self.tangent(best)
            dd = self.curvature_vector(best)
            r = p - point
            grad = 2.0 * r @ d1
            hess = 2.0 * (d1 @ d1 + r @ dd)
            if hess <= 0:
                break
            best -= grad / hess
        return best


def _periodic_arclength(spline: CubicSpline, period: float, n_seg: int) -> np.ndarray:
    """Cumulative arclength at ``n_seg + 1`` equally spaced parameters."""
    gl_x, gl_w = np.polynomial.legendre.leggauss(5)
    edges = np.linspace(0.0, period, n_seg + 1)
    h = np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    s = mid[:, None] + 0.5 * h[:, None] * gl_x[None, :]
    speed = np.linalg.norm(spline.derivative(1)(s), axis=-1)
    seg = 0.5 * h * (speed @ gl_w)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _resample(spline: CubicSpline, period: float, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    fine = 4000
    param = np.linspace(0.0, period, fine + 1)
    arc = _periodic_arclength(spline, period, fine)
    total = arc[-1]
    n = max(int(math.ceil(total / spacing)), 8)
    knots = np.linspace(0.0, total, n + 1)
    pts = spline(np.interp(knots, arc, param))
    pts[-1] = pts[0]
    return knots, pts


def fit_spline(centerline: Centerline, spacing: float = MAX_KNOT_SPACING) -> TrackSpline:
    """Fit an approximately arclength-parameterized periodic spline.

    Waypoints are first parameterized by cumulative chord length, then
    resampled twice at uniform arclength with at most ``spacing`` between
    knots.
    """
    pts = centerline.waypoints
    chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    first = CubicSpline(chord, pts, bc_type="periodic")
    knots, rs = _resample(first, chord[-1], spacing)
    second = CubicSpline(knots, rs, bc_type="periodic")
    knots, rs = _resample(second, knots[-1], spacing)
    return TrackSpline(knots, rs, centerline.width, centerline.orientation)


def track_constraint(x, spline: TrackSpline, width: float | None = None):
    """Squared distance to the centerline point at ``theta`` minus ``(D/2)^2``."""
    D = spline.width if width is None else width
    x = np.asarray(x, dtype=float)
    px, py, _, _ = spline.eval_center(x[..., THETA])
    return (x[..., PX] - px) ** 2 + (x[..., PY] - py) ** 2 - (0.5 * D) ** 2


def contouring_lag_errors(x, theta_hat, spline: TrackSpline):
    """Linearized contouring and lag errors about progress ``theta_hat``."""
    x = np.asarray(x, dtype=float)
    px, py, dx, dy = spline.eval_center(theta_hat)
    dtheta = x[..., THETA] - theta_hat
    ex = x[..., PX] - px - dx * dtheta
    ey = x[..., PY] - py - dy * dtheta
    return dy * ex - dx * ey, dx * ex + dy * ey


def rounded_rectangle(
    length: float = 2.4,
    width: float = 1.6,
    radius: float = 0.45,
    spacing: float = 0.01,
) -> np.ndarray:
    """Counterclockwise rounded-rectangle loop starting mid bottom straight."""
    a = length / 2 - radius
    b = width / 2 - radius
    if a < 0 or b < 0:
        raise ValueError("corner radius too large for the rectangle")
    pieces = []

    def line(p0, p1):
        n = max(int(np.ceil(np.linalg.norm(np.subtract(p1, p0)) / spacing)), 1)
        t = np.linspace(0.0, 1.0, n, endpoint=False)[:, None]
        pieces.append((1 - t) * np.asarray(p0) + t * np.asarray(p1))

    def arc(cx, cy, a0):
        n = max(int(np.ceil(0.5 * np.pi * radius / spacing)), 2)
        t = a0 + np.linspace(0.0, 0.5 * np.pi, n, endpoint=False)
        pieces.append(np.stack([cx + radius * np.cos(t), cy + radius * np.sin(t)], axis=1))

    line((0.0, -width / 2), (a, -width / 2))
    arc(a, -b, -0.5 * np.pi)
    line((length / 2, -b), (length / 2, b))
    arc(a, b, 0.0)
    line((a, width / 2), (-a, width / 2))
    arc(-a, b, 0.5 * np.pi)
    line((-length / 2, b), (-length / 2, -b))
    arc(-a, -b, np.pi)
    line((-a, -width / 2), (0.0, -width / 2))
    pts = np.concatenate(pieces)
    return np.vstack([pts, pts[:1]])


def circle(radius: float = 1.0, spacing: float = 0.01) -> np.ndarray:
    """Counterclockwise circle starting at angle -pi/2 (heading +x)."""
    n = int(np.ceil(2 * np.pi * radius / spacing))
    t = -0.5 * np.pi + np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    pts = np.stack([radius * np.cos(t), radius * np.sin(t)], axis=1)
    return np.vstack([pts, pts[:1]])


def load_track(path: str | Path) -> Centerline:
    """Read a track file with ``width``, ``waypoints`` and optional ``orientation``.

    ``waypoints`` may instead be a generator spec, e.g.
    ``{rounded_rectangle: {length: 2.4, width: 1.6, radius: 0.45}}``.
    """
    path = Path(path)
    with path.open() as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict) or "width" not in data or "waypoints" not in data:
        raise ValueError(f"{path}: track file needs 'width' and 'waypoints'")
    wp = data["waypoints"]
    if isinstance(wp, dict):
        (kind, kwargs), = wp.items()
        generators = {"rounded_rectangle": rounded_rectangle, "circle": circle}
        if kind not in generators:
            raise ValueError(f"{path}: unknown waypoint generator {kind!r}")
        wp = generators[kind](**(kwargs or {}))
    orientation = data.get("orientation", "ccw")
    orientation = {"ccw": 1, "cw": -1, 1: 1, -1: -1}.get(orientation)
    if orientation is None:
        raise ValueError(f"{path}: orientation must be 'ccw' or 'cw'")
    return Centerline(np.asarray(wp, dtype=float), float(data["width"]), orientation)
