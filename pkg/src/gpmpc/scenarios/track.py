"""Closed race track: periodic cubic-spline centerline parameterised by arc length."""

import math

import numpy as np
from scipy.interpolate import CubicSpline

# Default course (metres), counter-clockwise: start/finish straight, tight
# 180-degree hairpins at both ends (radius 0.4) and a chicane on the back straight.
DEFAULT_WAYPOINTS = [
    (0.0, 0.0), (0.3, 0.0), (0.6, 0.0), (0.9, 0.0), (1.2, 0.0), (1.5, 0.0), (1.8, 0.0),
    (2.0, 0.054), (2.146, 0.2), (2.2, 0.4), (2.146, 0.6), (2.0, 0.746), (1.8, 0.8),
    (1.6, 0.799), (1.4, 0.793), (1.2, 0.756), (1.0, 0.693), (0.8, 0.693), (0.6, 0.756),
    (0.4, 0.793), (0.2, 0.799), (0.0, 0.8), (-0.2, 0.746), (-0.346, 0.6), (-0.4, 0.4),
    (-0.346, 0.2), (-0.2, 0.054),
]


class Track:
    """Centerline ``C(theta)`` with unit tangent, heading and curvature.

    The waypoints are joined by a periodic cubic spline in chord length, which is
    then resampled densely and re-fitted against cumulative arc length so that
    ``theta`` measures distance along the centerline.
    """

    def __init__(self, waypoints=None, half_width=0.185, resolution=4000):
        pts = np.asarray(DEFAULT_WAYPOINTS if waypoints is None else waypoints, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
            raise ValueError("need at least three 2-D waypoints")
        if not half_width > 0:
            raise ValueError("half width must be positive")
        self.half_width = float(half_width)
        if np.allclose(pts[0], pts[-1]):
            pts = pts[:-1]
        closed = np.vstack([pts, pts[:1]])
        chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(closed, axis=0), axis=1))])
        rough = CubicSpline(chord, closed, bc_type="periodic")
        t = np.linspace(0.0, chord[-1], resolution + 1)
        dense = rough(t)
        seg = np.linalg.norm(np.diff(dense, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        dense[-1] = dense[0]
        self.length = float(s[-1])
        self._spline = CubicSpline(s, dense, bc_type="periodic")
        self._d1 = self._spline.derivative(1)
        self._d2 = self._spline.derivative(2)
        self._grid = np.linspace(0.0, self.length, resolution, endpoint=False)
        self._grid_pts = self._spline(self._grid)

    def wrap(self, theta):
        return np.mod(theta, self.length)

    def point(self, theta):
        return self._spline(self.wrap(theta))

    def tangent(self, theta):
        d = self._d1(self.wrap(theta))
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def heading(self, theta):
        d = self._d1(self.wrap(theta))
        return np.arctan2(d[..., 1], d[..., 0])

    def curvature(self, theta):
        th = self.wrap(theta)
        d1, d2 = self._d1(th), self._d2(th)
        num = d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]
        return num / np.linalg.norm(d1, axis=-1) ** 3

    def project(self, xy, theta_guess=None, window=0.5):
        """Arc length of the closest centerline point to ``xy``.

        With ``theta_guess`` only a window around it is searched (avoids jumping
        between nearby branches of the course); the result is refined by a few
        Newton steps on the tangential error.
        """
        xy = np.asarray(xy, dtype=float)
        if theta_guess is None:
            d = np.sum((self._grid_pts - xy) ** 2, axis=1)
            th = float(self._grid[np.argmin(d)])
        else:
            cand = theta_guess + np.linspace(-window, window, 201)
            d = np.sum((self.point(cand) - xy) ** 2, axis=1)
            th = float(cand[np.argmin(d)])
        for _ in range(3):
            c = self.point(th)
            t = self.tangent(th)
            k = self.curvature(th)
            r = xy - c
            g = float(r @ t)
            n = np.array([-t[1], t[0]])
            denom = 1.0 - k * float(r @ n)
            if abs(denom) < 1e-6:
                break
            th += g / denom
        return float(self.wrap(th))

    def lateral_error(self, xy, theta):
        """Signed distance from the centerline (positive to the left)."""
        t = self.tangent(theta)
        r = np.asarray(xy) - self.point(theta)
        return float(t[0] * r[1] - t[1] * r[0])


def track_eval(track, theta):
    """``(C(theta), unit tangent)`` for ``theta`` in ``[0, L)``."""
    return track.point(theta), track.tangent(theta)


def circle_track(radius, n_points=24, half_width=0.2):
    ang = np.linspace(0.0, 2.0 * math.pi, n_points, endpoint=False)
    return Track(np.column_stack([radius * np.cos(ang), radius * np.sin(ang)]), half_width)
