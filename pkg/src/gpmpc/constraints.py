"""Probabilistic reachable sets and deterministic tightening of constraints on the mean.

Polytope constructors split the violation budget ``1 - p`` evenly over faces
(or state dimensions) by the union bound. ``literal_quantile=True`` switches to
the quantile arguments ``p / n_j`` and ``(p + 1) / (2 n_x)`` exactly as they are
often printed; those do not tighten correctly for large ``n_j`` and exist only
for comparison.
"""

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .prob import GaussianBelief, chi2_2_quantile, mvn_sample, std_normal_quantile


class PrsKind(enum.Enum):
    HALF_SPACE = "half_space"
    SLAB = "slab"
    POLYTOPE_FACES = "polytope_faces"
    MARGINAL_BOX = "marginal_box"
    BALL = "ball"


@dataclass(frozen=True)
class PrsSpec:
    kind: PrsKind
    level: float

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise ValueError(f"probability level must lie in (0, 1), got {self.level}")


@dataclass(frozen=True)
class HalfSpace:
    h: np.ndarray
    b: float

    def __post_init__(self):
        h = np.atleast_1d(np.asarray(self.h, dtype=float))
        if not np.any(h):
            raise ValueError("half-space normal must be nonzero")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "b", float(self.b))

    def contains(self, x, tol=0.0):
        return np.atleast_2d(x) @ self.h <= self.b + tol


@dataclass(frozen=True)
class Slab:
    """``|h^T x| <= b``."""

    h: np.ndarray
    b: float
    infeasible: bool = False

    def contains(self, x, tol=0.0):
        return np.abs(np.atleast_2d(x) @ np.asarray(self.h)) <= self.b + tol


@dataclass(frozen=True)
class Polytope:
    H: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if H.shape[0] != b.size:
            raise ValueError("H and b disagree on the number of faces")
        if np.any(~np.any(H, axis=1)):
            raise ValueError("polytope has a zero row")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "b", b)

    def contains(self, x, tol=0.0):
        return np.all(np.atleast_2d(x) @ self.H.T <= self.b + tol, axis=1)


@dataclass(frozen=True)
class TrackTube:
    center: Callable
    half_width: float

    def __post_init__(self):
        if not self.half_width > 0:
            raise ValueError("tube half-width must be positive")


@dataclass(frozen=True)
class Ball:
    """Disc of radius ``radius`` around ``center`` (a tube cross-section)."""

    center: np.ndarray
    radius: float
    infeasible: bool = False

    def contains(self, x, tol=0.0):
        return np.linalg.norm(np.atleast_2d(x) - self.center, axis=1) <= self.radius + tol


def _spread(h, sigma):
    return math.sqrt(max(float(h @ sigma @ h), 0.0))


def tighten_halfspace(c, sigma, p):
    return HalfSpace(c.h, c.b - std_normal_quantile(p) * _spread(c.h, np.asarray(sigma)))


def tighten_slab(h, b, sigma, p):
    """Tightened slab; ``infeasible`` flags a non-positive bound."""
    h = np.atleast_1d(np.asarray(h, dtype=float))
    bound = float(b) - std_normal_quantile((p + 1.0) / 2.0) * _spread(h, np.asarray(sigma))
    return Slab(h, bound, infeasible=bound <= 0.0)


def face_level(p, n_faces, literal_quantile=False):
    if literal_quantile:
        return p / n_faces
    return 1.0 - (1.0 - p) / n_faces


def tighten_polytope_faces(poly, sigma, p, literal_quantile=False):
    sigma = np.asarray(sigma)
    q = std_normal_quantile(face_level(p, poly.H.shape[0], literal_quantile))
    spread = np.sqrt(np.maximum(np.einsum("ji,ik,jk->j", poly.H, sigma, poly.H), 0.0))
    return Polytope(poly.H, poly.b - q * spread)


def pontryagin_diff_box(poly, r):
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("box radii must be nonnegative")
    # correctly rounded row sums: the result does not depend on summation order
    shift = np.array([math.fsum(np.abs(h) * r) for h in poly.H])
    return Polytope(poly.H, poly.b - shift)


def marginal_box_radii(sigma, p, literal_quantile=False):
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    n = sigma.shape[0]
    if literal_quantile:
        level = (p + 1.0) / (2.0 * n)
    else:
        level = (1.0 - (1.0 - p) / n + 1.0) / 2.0
    std = np.sqrt(np.maximum(np.diag(sigma), 0.0))
    return std_normal_quantile(level) * std


def tighten_marginal_box(poly, sigma, p, literal_quantile=False):
    return pontryagin_diff_box(poly, marginal_box_radii(sigma, p, literal_quantile))


def lambda_max_2x2(m):
    a, b, d = m[0, 0], 0.5 * (m[0, 1] + m[1, 0]), m[1, 1]
    return 0.5 * (a + d) + math.sqrt(0.25 * (a - d) ** 2 + b * b)


def tube_radius(half_width, sigma_xy, p=None, chi2=None):
    """Effective radius ``r - sqrt(chi2 * lambda_max)``; pass ``p`` or ``chi2``."""
    if chi2 is None:
        chi2 = chi2_2_quantile(p)
    return half_width - math.sqrt(chi2 * max(lambda_max_2x2(np.asarray(sigma_xy)), 0.0))


def tighten_track_tube(tube, theta, sigma_xy, p=None, chi2=None):
    """Tightened disc around ``C(theta)``; ``infeasible`` flags a non-positive radius."""
    r = tube_radius(tube.half_width, sigma_xy, p, chi2)
    center = np.asarray(tube.center(theta), dtype=float)[:2]
    return Ball(center, r, infeasible=r <= 0.0)


def empirical_violation(original, mean, sigma, n, seed):
    """Fraction of Gaussian samples around ``mean`` that leave ``original``.

    ``original`` is any set object with a vectorised ``contains``.
    """
    samples = mvn_sample(GaussianBelief(mean, sigma), n, seed)
    return 1.0 - float(np.mean(original.contains(samples)))
