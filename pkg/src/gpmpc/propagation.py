"""Propagation of Gaussian state beliefs through nominal dynamics plus a GP.

Feedback convention: the ancillary policy is ``u = mu_u - K (x - mu_x)``, so
``cov(x, u) = -Sigma_x K^T`` and ``var(u) = K Sigma_x K^T``.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from .prob import NumericalError, PSD_TOL, symmetrize


class PropagationMethod(enum.Enum):
    MEAN_EQUIVALENT = "mean_equivalent"
    TAYLOR = "taylor"
    MOMENT_MATCHING = "moment_matching"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"me": cls.MEAN_EQUIVALENT, "ta": cls.TAYLOR, "mm": cls.MOMENT_MATCHING}
        key = str(value).lower()
        return aliases.get(key) or cls(key)


def fd_jacobian(step, x, u, h=1e-6):
    """Central finite-difference Jacobian of ``step`` w.r.t. ``[x; u]``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    nx, nu = x.size, u.size
    base = np.asarray(step(x, u))
    jac = np.empty((base.size, nx + nu))
    for i in range(nx + nu):
        dx = np.zeros(nx)
        du = np.zeros(nu)
        if i < nx:
            dx[i] = h
        else:
            du[i - nx] = h
        jac[:, i] = (np.asarray(step(x + dx, u + du)) - np.asarray(step(x - dx, u - du))) / (2 * h)
    return jac


class NominalModel:
    """Known discrete-time dynamics ``x+ = f(x, u)`` with GP subspace ``bd``.

    ``gp_input_map`` lists indices into the concatenated vector ``[x; u]`` that
    form the GP input. ``jacobian`` returns ``d f / d [x; u]``; when omitted a
    central finite difference (step 1e-6) is used.
    """

    def __init__(self, n_x, n_u, step, bd, gp_input_map, jacobian=None):
        self.n_x = int(n_x)
        self.n_u = int(n_u)
        self.step = step
        self.bd = np.atleast_2d(np.asarray(bd, dtype=float))
        if self.bd.shape[0] != self.n_x:
            raise ValueError(f"bd must have {self.n_x} rows, got {self.bd.shape}")
        if np.linalg.matrix_rank(self.bd) < self.bd.shape[1]:
            raise ValueError("bd must have full column rank")
        self.n_d = self.bd.shape[1]
        self.gp_input_map = np.asarray(gp_input_map, dtype=int)
        self._jacobian = jacobian
        self.bd_pinv = np.linalg.pinv(self.bd)
        sel = np.zeros((self.gp_input_map.size, self.n_x + self.n_u))
        sel[np.arange(self.gp_input_map.size), self.gp_input_map] = 1.0
        self.selector = sel

    def jacobian(self, x, u):
        if self._jacobian is not None:
            return np.asarray(self._jacobian(x, u), dtype=float)
        return fd_jacobian(self.step, x, u)

    def gp_input(self, x, u):
        return np.concatenate([np.atleast_1d(x), np.atleast_1d(u)])[self.gp_input_map]

    def residual_target(self, x, u, x_next):
        """GP training target ``bd^+ (x_next - f(x, u))``."""
        return self.bd_pinv @ (np.asarray(x_next) - self.step(x, u))


def linear_nominal(a, b, bd, gp_input_map, offset=None):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float).reshape(a.shape[0], -1)
    c = np.zeros(a.shape[0]) if offset is None else np.asarray(offset, dtype=float)
    jac = np.hstack([a, b])
    return NominalModel(a.shape[0], b.shape[1], lambda x, u: a @ x + b @ u + c, bd,
                        gp_input_map, jacobian=lambda x, u: jac)


@dataclass(frozen=True)
class GpMoments:
    """Approximate moments of ``d(z)`` for ``z ~ N(mean_z, sigma_z)``.

    ``gain`` satisfies ``cross = sigma_z @ gain.T`` where ``cross = cov(z, d)``.
    ``mean_cov`` is the part of ``cov`` caused by the posterior mean varying
    with the uncertain input (``cov`` minus the expected posterior variance).
    """

    mean: np.ndarray
    cov: np.ndarray
    cross: np.ndarray
    gain: np.ndarray
    mean_cov: np.ndarray | None = None


def _moment_matching(gp, m, s):
    n_d, n_z = gp.n_d, gp.n_z
    if gp.prior_mean is not None:
        raise ValueError("exact moment matching requires a zero prior mean")
    nu = gp.support - m
    eye = np.eye(n_z)
    inv_ls = 1.0 / gp.length_scales
    mean = np.zeros(n_d)
    gain = np.zeros((n_d, n_z))
    log_k = np.empty((n_d, nu.shape[0]))
    for a in range(n_d):
        lam = np.diag(gp.length_scales[a])
        inv_sl = np.linalg.inv(s + lam)
        quad = np.einsum("ji,ik,jk->j", nu, inv_sl, nu)
        det = np.linalg.det(s * inv_ls[a] + eye)
        q = gp.sf2[a] / math.sqrt(det) * np.exp(-0.5 * quad)
        beta_q = gp.alpha[a] * q
        mean[a] = np.sum(beta_q)
        gain[a] = inv_sl @ (nu.T @ beta_q)
        log_k[a] = math.log(gp.sf2[a]) - 0.5 * np.sum(nu * nu * inv_ls[a], axis=1)
    cov = np.zeros((n_d, n_d))
    mean_cov = np.zeros((n_d, n_d))
    for a in range(n_d):
        ua = nu * inv_ls[a]
        for b in range(a, n_d):
            ub = nu * inv_ls[b]
            r = s * (inv_ls[a] + inv_ls[b]) + eye
            t = np.linalg.solve(r, s)
            t = 0.5 * (t + t.T)
            qa = np.einsum("ik,kl,il->i", ua, t, ua)
            qb = np.einsum("jk,kl,jl->j", ub, t, ub)
            cross = ua @ t @ ub.T
            logq = (log_k[a][:, None] + log_k[b][None, :] - 0.5 * math.log(np.linalg.det(r))
                    + 0.5 * (qa[:, None] + qb[None, :] + 2.0 * cross))
            qmat = np.exp(logq)
            e_ab = gp.alpha[a] @ qmat @ gp.alpha[b]
            cov[a, b] = e_ab - mean[a] * mean[b]
            mean_cov[a, b] = mean_cov[b, a] = cov[a, b]
            if a == b:
                cov[a, a] += gp.sf2[a] - np.sum(gp.wmat[a] * qmat)
            cov[b, a] = cov[a, b]
    return mean, cov, gain, mean_cov


def gp_moments(gp, mu_z, sigma_z, method, check_input=True):
    """Mean, covariance and input-output cross-covariance of the GP under an uncertain input.

    ``check_input=False`` skips the eigenvalue check of ``sigma_z`` for callers
    that build it from a covariance recursion.
    """
    method = PropagationMethod.parse(method)
    mu_z = np.asarray(mu_z, dtype=float).reshape(-1)
    s = np.asarray(sigma_z, dtype=float)
    if check_input and s.size and np.min(np.linalg.eigvalsh(symmetrize(s))) < -1e-9:
        raise ValueError("input covariance is indefinite")
    if method is PropagationMethod.MOMENT_MATCHING and np.any(s):
        mean, cov, gain, mean_cov = _moment_matching(gp, mu_z, symmetrize(s))
        return GpMoments(mean, symmetrize(cov), s @ gain.T, gain, mean_cov)
    pred = gp.posterior(mu_z, want_jacobian=method is not PropagationMethod.MEAN_EQUIVALENT)
    if method is PropagationMethod.MEAN_EQUIVALENT:
        gain = np.zeros((gp.n_d, mu_z.size))
        return GpMoments(pred.mean, pred.variance, np.zeros((mu_z.size, gp.n_d)), gain,
                         np.zeros((gp.n_d, gp.n_d)))
    jac = pred.mean_jacobian
    mean_cov = symmetrize(jac @ s @ jac.T)
    return GpMoments(pred.mean, pred.variance + mean_cov, s @ jac.T, jac, mean_cov)


@dataclass(frozen=True)
class JointBelief:
    """Gaussian over ``(x, u, d + w)`` at one prediction step.

    ``jacobian`` is the derivative of the next mean w.r.t. ``[x; u]`` implied by
    the GP gain (the mean-dynamics Jacobian for the Taylor method).
    """

    mu: np.ndarray
    sigma: np.ndarray
    n_x: int
    n_u: int
    jacobian: np.ndarray | None = None

    @property
    def sigma_x(self):
        return self.sigma[:self.n_x, :self.n_x]

    @property
    def sigma_u(self):
        n = self.n_x
        return self.sigma[n:n + self.n_u, n:n + self.n_u]

    @property
    def sigma_zd(self):
        n = self.n_x + self.n_u
        return self.sigma[:n, n:]


def input_covariances(sigma_x, gain):
    """``(Sigma_u, Sigma_xu)`` under the ancillary feedback convention."""
    if gain is None:
        return None, None
    sxu = -sigma_x @ gain.T
    return gain @ sigma_x @ gain.T, sxu


def _masked(moments, mask):
    """Drop the mean correction of outputs with ``mask == 0``; their variance stays."""
    if mask is None:
        return moments
    mask = np.asarray(mask, dtype=float)
    mc = moments.mean_cov
    cov = moments.cov - mc + mask[:, None] * mc * mask[None, :]
    return GpMoments(moments.mean * mask, cov, moments.cross * mask,
                     moments.gain * mask[:, None], mask[:, None] * mc * mask[None, :])


def propagate(nominal, mu_x, sigma_x, gain, mu_u, gp, sigma_w, method,
              mean_mask=None, step_index=None):
    """One prediction step; returns ``(mu_x_next, sigma_x_next, JointBelief)``.

    ``gain`` is the ancillary feedback matrix (``None`` for open loop) and
    ``mean_mask`` optionally zeroes the GP mean of selected output dimensions.
    """
    mu_x = np.asarray(mu_x, dtype=float)
    mu_u = np.atleast_1d(np.asarray(mu_u, dtype=float))
    nx, nu, nd = nominal.n_x, nominal.n_u, nominal.n_d
    nz = nx + nu
    sigma_z = np.zeros((nz, nz))
    sigma_z[:nx, :nx] = sigma_x
    if gain is not None:
        gain = np.atleast_2d(gain)
        su, sxu = input_covariances(sigma_x, gain)
        sigma_z[:nx, nx:] = sxu
        sigma_z[nx:, :nx] = sxu.T
        sigma_z[nx:, nx:] = su
    mu_z = np.concatenate([mu_x, mu_u])
    joint = np.zeros((nz + nd, nz + nd))
    joint[:nz, :nz] = sigma_z
    if sigma_w is not None:
        joint[nz:, nz:] = sigma_w
    sel = None
    mu_d = np.zeros(nd)
    if gp is not None:
        sel = nominal.selector
        mom = gp_moments(gp, sel @ mu_z, sel @ sigma_z @ sel.T, method, check_input=False)
        mom = _masked(mom, mean_mask)
        mu_d = mom.mean
        sigma_zd = sigma_z @ sel.T @ mom.gain.T
        joint[:nz, nz:] = sigma_zd
        joint[nz:, :nz] = sigma_zd.T
        joint[nz:, nz:] += mom.cov
    mu_next = np.asarray(nominal.step(mu_x, mu_u), dtype=float) + nominal.bd @ mu_d
    f_jac = nominal.jacobian(mu_x, mu_u)
    big = np.hstack([f_jac, nominal.bd])
    sigma_next = big @ joint @ big.T
    sigma_next = 0.5 * (sigma_next + sigma_next.T)
    diag = np.diagonal(sigma_next)
    if not np.isfinite(diag.sum()) or not np.isfinite(sigma_next).all():
        raise NumericalError(f"non-finite covariance at step {step_index}")
    if diag.size and diag.min() < -PSD_TOL:
        raise NumericalError(f"propagated covariance indefinite at step {step_index}")
    dyn_jac = f_jac if sel is None else f_jac + nominal.bd @ mom.gain @ sel
    belief = JointBelief(np.concatenate([mu_z, mu_d]), joint, nx, nu, dyn_jac)
    return mu_next, sigma_next, belief


def _gain_at(gains, i):
    if gains is None:
        return None
    gains = np.asarray(gains, dtype=float)
    return gains if gains.ndim == 2 else gains[i]


def rollout(nominal, gp, x0, input_means, gains, sigma_w, method, n_steps=None,
            mean_mask=None):
    """Repeated ``propagate`` from ``(x0, 0)``; returns ``(means, covs, joints)``."""
    input_means = np.atleast_2d(np.asarray(input_means, dtype=float))
    n = input_means.shape[0] if n_steps is None else int(n_steps)
    if input_means.shape[0] < n:
        raise ValueError("not enough input means for the requested horizon")
    nx = nominal.n_x
    means = np.zeros((n + 1, nx))
    covs = np.zeros((n + 1, nx, nx))
    means[0] = x0
    joints = []
    for i in range(n):
        try:
            means[i + 1], covs[i + 1], joint = propagate(
                nominal, means[i], covs[i], _gain_at(gains, i), input_means[i], gp, sigma_w,
                method, mean_mask, step_index=i)
        except NumericalError as exc:
            raise NumericalError(f"rollout step {i}: {exc}") from None
        joints.append(joint)
    return means, covs, joints
