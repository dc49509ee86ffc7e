"""Probabilistic and linear-algebra primitives shared by the rest of the package."""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

PSD_TOL = 1e-10
DEFAULT_JITTER = 1e-9


class NumericalError(RuntimeError):
    """Raised when a factorization or a covariance recursion breaks down."""


def _std_normal_cdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@lru_cache(maxsize=4096)
def std_normal_quantile(p):
    """Inverse CDF of the standard normal, by bisection on the erf-based CDF.

    Bisection runs to an interval width of 1e-12, so the absolute error is far
    below 1e-9 everywhere the CDF is resolvable in double precision.
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    lo, hi = -40.0, 40.0
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        if _std_normal_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def chi2_2_quantile(p):
    """Quantile of the chi-squared distribution with two degrees of freedom."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {p}")
    return -2.0 * math.log1p(-p)


def symmetrize_and_jitter(m, jitter=0.0, tol=PSD_TOL):
    """Return ``(m + m.T) / 2 + jitter * I``, checking it is PSD up to ``tol``."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    out = 0.5 * (m + m.T)
    if jitter:
        out = out + jitter * np.eye(m.shape[0])
    if out.size:
        min_eig = np.linalg.eigvalsh(out)[0]
        if min_eig < -tol:
            raise NumericalError(f"matrix is indefinite: min eigenvalue {min_eig:.3e}")
    return out


def symmetrize(m):
    """Cheap symmetrization without the eigenvalue check (used in hot loops)."""
    return 0.5 * (m + m.T)


def robust_cholesky(m, jitter=DEFAULT_JITTER, max_tries=8):
    """Lower Cholesky factor, escalating diagonal jitter by 10x on failure.

    Returns ``(L, used_jitter)``.
    """
    m = np.asarray(m, dtype=float)
    try:
        return np.linalg.cholesky(m), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = max(float(np.mean(np.abs(np.diag(m)))), 1.0) if m.size else 1.0
    eye = np.eye(m.shape[0])
    jit = jitter
    for _ in range(max_tries):
        try:
            return np.linalg.cholesky(m + jit * scale * eye), jit * scale
        except np.linalg.LinAlgError:
            jit *= 10.0
    raise NumericalError("Cholesky factorization failed after jitter escalation")


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(
                f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", symmetrize_and_jitter(cov))


def make_rng(seed):
    """Counter-based Philox generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.Philox(int(seed)))


def mvn_sample(belief, n, seed):
    """Draw ``n`` samples from a Gaussian belief, shape ``(n, dim)``."""
    mean, cov = belief.mean, belief.cov
    if not np.any(cov):
        return np.tile(mean, (n, 1))
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        # PSD but singular: factor through the eigen-decomposition instead
        w, v = np.linalg.eigh(cov)
        if w[0] < -PSD_TOL:
            raise NumericalError(f"cannot sample from indefinite covariance (min eig {w[0]:.3e})")
        chol = v * np.sqrt(np.clip(w, 0.0, None))
    rng = make_rng(seed)
    return mean + rng.standard_normal((n, mean.size)) @ chol.T
