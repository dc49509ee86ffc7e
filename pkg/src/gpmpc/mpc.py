"""Stochastic MPC with GP-augmented dynamics, solved by SQP over the mean inputs.

The problem is condensed: the decision variables are the input means, the
state means follow from a rollout, and each SQP iteration solves one dense QP
built from a Gauss-Newton model of the cost and linearised constraints.
Soft state constraints carry one slack each under an L1 penalty.
"""

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .constraints import Polytope, marginal_box_radii, tighten_polytope_faces
from .prob import NumericalError, std_normal_quantile
from .propagation import PropagationMethod, rollout
from .qp import QpInfeasible, solve_qp
from .sparse import SparseGpModel, cold_start_inducing, select_inducing_from_trajectory

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


# --- LQR -------------------------------------------------------------------


def dare(a, b, q, r, tol=1e-10, max_iter=100000):
    """Fixed-point iteration of the discrete algebraic Riccati equation."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    q, r = np.atleast_2d(q), np.atleast_2d(r)
    p = q.copy()
    for _ in range(max_iter):
        bp = b.T @ p
        k = np.linalg.solve(r + bp @ b, bp @ a)
        p_next = q + a.T @ p @ a - a.T @ p @ b @ k
        p_next = 0.5 * (p_next + p_next.T)
        if not np.all(np.isfinite(p_next)):
            raise NumericalError("Riccati iteration diverged")
        if np.max(np.abs(p_next - p)) <= tol * max(1.0, np.max(np.abs(p_next))):
            p = p_next
            break
        p = p_next
    else:
        raise NumericalError("Riccati iteration did not converge")
    k = np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)
    residual = np.max(np.abs(q + a.T @ p @ a - a.T @ p @ b @ k - p))
    if residual > tol * max(1.0, np.max(np.abs(p))) * 10:
        raise NumericalError(f"Riccati residual {residual:.2e} above tolerance")
    return p, k


def lqr_gains(a, b, q, r, horizon=None, terminal=None):
    """LQR gains for ``u = -K x``.

    With ``horizon=None`` returns ``(K, P)`` from the DARE; otherwise runs the
    backward recursion from ``terminal`` (default ``q``) and returns
    ``([K_0, ..., K_{N-1}], P_0)``.
    """
    if horizon is None:
        p, k = dare(a, b, q, r)
        return k, p
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    p = np.atleast_2d(q if terminal is None else terminal).astype(float)
    gains = []
    for _ in range(horizon):
        k = np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)
        p = q + a.T @ p @ (a - b @ k)
        p = 0.5 * (p + p.T)
        if not np.all(np.isfinite(p)):
            raise NumericalError("Riccati recursion diverged")
        gains.append(k)
    return gains[::-1], p


# --- costs -----------------------------------------------------------------


def _sqrt_psd(m):
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))).T


@dataclass
class CostTerms:
    """Gauss-Newton form: ``value = sum r.r + sum gx.x + sum gu.u + const``."""

    r: np.ndarray
    jx: np.ndarray
    ju: np.ndarray
    gx: np.ndarray
    gu: np.ndarray
    const: float = 0.0

    @property
    def value(self):
        return float(np.sum(self.r * self.r) + self.const)


@dataclass(frozen=True)
class QuadraticCost:
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        for name, psd_only in (("Q", True), ("R", False), ("P", True)):
            m = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            eig = np.linalg.eigvalsh(0.5 * (m + m.T))
            if eig[0] < -1e-10 or (not psd_only and eig[0] <= 0):
                kind = "positive semidefinite" if psd_only else "positive definite"
                raise ValueError(f"{name} must be {kind}, min eigenvalue {eig[0]:.3e}")
            object.__setattr__(self, name, m)
        object.__setattr__(self, "_qh", _sqrt_psd(self.Q))
        object.__setattr__(self, "_rh", _sqrt_psd(self.R))
        object.__setattr__(self, "_ph", _sqrt_psd(self.P))

    def evaluate(self, xs, us, problem):
        n1, nx = xs.shape
        nu = us.shape[1]
        xr, ur = problem.x_ref, problem.u_ref
        ex = xs - xr
        eu = us - ur
        r = np.zeros((n1, nx + nu))
        jx = np.zeros((n1, nx + nu, nx))
        ju = np.zeros((n1, nx + nu, nu))
        r[:-1, :nx] = ex[:-1] @ self._qh.T
        r[:-1, nx:] = eu @ self._rh.T
        r[-1, :nx] = self._ph @ ex[-1]
        jx[:-1, :nx] = self._qh
        ju[:-1, nx:] = self._rh
        jx[-1, :nx] = self._ph
        return CostTerms(r, jx, ju, np.zeros_like(xs), np.zeros_like(us))

    def variance_cost(self, covs, input_covs, means=None):
        total = float(np.einsum("ij,nji->", self.Q, covs[:-1]) + np.trace(self.P @ covs[-1]))
        if input_covs is not None:
            total += float(np.einsum("ij,nji->", self.R, input_covs))
        return total


def expected_cost(means, covs, input_means, input_covs, x_ref, u_ref, cost):
    """Expected quadratic cost of a Gaussian trajectory (stage sums plus terminal)."""
    means = np.asarray(means)
    input_means = np.asarray(input_means)
    total = 0.0
    for i in range(input_means.shape[0]):
        ex = means[i] - x_ref[i]
        eu = input_means[i] - u_ref[i]
        total += ex @ cost.Q @ ex + np.trace(cost.Q @ covs[i]) + eu @ cost.R @ eu
        if input_covs is not None:
            total += np.trace(cost.R @ input_covs[i])
    ex = means[-1] - x_ref[-1]
    return float(total + ex @ cost.P @ ex + np.trace(cost.P @ covs[-1]))


# --- constraints -----------------------------------------------------------


@dataclass
class RowBlock:
    """Linear rows ``a . v_s <= b`` on states (``kind='state'``) or inputs.

    Soft rows with the same ``group`` label share one slack, so the penalty
    applies to the largest violation in the group (for rows that cannot be
    violated together, such as the two sides of a slab). Without groups every
    soft row gets its own slack.
    """

    kind: str
    steps: np.ndarray
    a: np.ndarray
    b: np.ndarray
    soft: bool
    group: np.ndarray | None = None


def _step_range(rng, default):
    if rng is None:
        return range(*default)
    return range(int(rng[0]), int(rng[1]))


@dataclass
class StateConstraint:
    """Polytopic state constraint ``H x <= b`` with chance-constraint tightening.

    ``mode`` selects the reachable set: ``individual`` tightens each face at
    ``level`` separately, ``faces`` splits the violation budget over faces,
    ``marginal_box`` uses the marginal box set. ``b`` may be an array of shape
    ``(N + 1, k)`` for time-varying offsets. Steps outside ``tighten_steps``
    constrain the mean without tightening.
    """

    H: np.ndarray
    b: np.ndarray
    level: float | None = None
    mode: str = "individual"
    steps: tuple | None = None
    tighten_steps: tuple | None = None
    soft: bool = True
    literal_quantile: bool = False

    def rows(self, xs, us, covs, input_covs, problem):
        n = problem.horizon
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        b_all = np.asarray(self.b, dtype=float)
        steps = np.array([i for i in _step_range(self.steps, (1, n + 1)) if 1 <= i <= n],
                         dtype=int)
        if not steps.size:
            return []
        b = b_all[steps] if b_all.ndim == 2 else np.tile(b_all, (steps.size, 1))
        if self.level is not None:
            tight = np.isin(steps, list(_step_range(self.tighten_steps, (1, n + 1))))
            tight &= np.any(covs[steps] != 0, axis=(1, 2))
            if self.mode == "individual":
                spread = np.sqrt(np.maximum(
                    np.einsum("ji,nik,jk->nj", H, covs[steps], H), 0.0))
                b = b - std_normal_quantile(self.level) * spread * tight[:, None]
            else:
                for j in np.flatnonzero(tight):
                    b[j] = self._tightened(H, b[j], covs[steps[j]])
        k = H.shape[0]
        return [RowBlock("state", np.repeat(steps, k), np.tile(H, (steps.size, 1)),
                         b.reshape(-1), self.soft)]

    def _tightened(self, H, b, sigma):
        if self.mode == "individual":
            spread = np.sqrt(np.maximum(np.einsum("ji,ik,jk->j", H, sigma, H), 0.0))
            return b - std_normal_quantile(self.level) * spread
        if self.mode == "faces":
            return tighten_polytope_faces(Polytope(H, b), sigma, self.level,
                                          self.literal_quantile).b
        if self.mode == "marginal_box":
            r = marginal_box_radii(sigma, self.level, self.literal_quantile)
            return b - np.abs(H) @ r
        raise ValueError(f"unknown tightening mode {self.mode!r}")


@dataclass
class InputConstraint:
    """Hard input constraint ``H u <= b``, tightened by ``K Sigma_x K^T`` when ``level`` is set.

    For pairs of opposite rows (``h`` and ``-h``) the tightening is capped so
    the interval shrinks at most to its midpoint instead of becoming empty.
    """

    H: np.ndarray
    b: np.ndarray
    level: float | None = None
    steps: tuple | None = None
    soft: bool = False

    def rows(self, xs, us, covs, input_covs, problem):
        n = problem.horizon
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        b0 = np.asarray(self.b, dtype=float)
        steps = np.array([i for i in _step_range(self.steps, (0, n)) if 0 <= i < n], dtype=int)
        if not steps.size:
            return []
        b = np.tile(b0, (steps.size, 1))
        if self.level is not None and input_covs is not None:
            spread = np.sqrt(np.maximum(
                np.einsum("ji,nik,jk->nj", H, input_covs[steps], H), 0.0))
            shrink = std_normal_quantile(self.level) * spread
            cap = np.full(H.shape[0], np.inf)
            for j, hj in enumerate(H):
                opp = np.flatnonzero(np.all(np.isclose(H, -hj), axis=1))
                if opp.size:
                    cap[j] = 0.5 * (b0[j] + b0[opp[0]])
            b = b - np.minimum(shrink, cap)
        k = H.shape[0]
        return [RowBlock("input", np.repeat(steps, k), np.tile(H, (steps.size, 1)),
                         b.reshape(-1), self.soft)]


def input_box(lower, upper, level=None):
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    eye = np.eye(lower.size)
    return InputConstraint(np.vstack([eye, -eye]), np.concatenate([upper, -lower]), level)


# --- problem and solution ----------------------------------------------------


@dataclass
class MpcProblem:
    nominal: object
    horizon: int
    cost: object
    x_ref: np.ndarray | None = None
    u_ref: np.ndarray | None = None
    constraints: list = field(default_factory=list)
    gp: object | None = None
    gains: np.ndarray | None = None
    method: PropagationMethod = PropagationMethod.TAYLOR
    sigma_w: np.ndarray | None = None
    variance_mode: str = "pre_evaluated"
    penalty: float | None = None
    mean_mask: np.ndarray | None = None
    sparse_inducing: int | None = None
    max_iter: int = 30
    kkt_tol: float = 1e-6
    step_tol: float = 1e-9
    hessian_reg: float = 1e-10
    slack_weight: float = 1e-6

    def __post_init__(self):
        n = int(self.horizon)
        if n < 1:
            raise ValueError("horizon must be at least 1")
        nx, nu = self.nominal.n_x, self.nominal.n_u
        self.horizon = n
        self.x_ref = np.zeros((n + 1, nx)) if self.x_ref is None else np.asarray(self.x_ref, float)
        self.u_ref = np.zeros((n, nu)) if self.u_ref is None else np.asarray(self.u_ref, float)
        if self.x_ref.shape != (n + 1, nx) or self.u_ref.shape != (n, nu):
            raise ValueError(
                f"references must have shapes {(n + 1, nx)} and {(n, nu)}, got "
                f"{self.x_ref.shape} and {self.u_ref.shape}")
        self.method = PropagationMethod.parse(self.method)
        if self.variance_mode not in ("pre_evaluated", "in_loop"):
            raise ValueError(f"unknown variance mode {self.variance_mode!r}")
        if self.penalty is None:
            q = getattr(self.cost, "Q", np.ones((1, 1)))
            self.penalty = 1e4 * float(np.max(q))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def gain_at(self, i):
        if self.gains is None:
            return None
        g = np.asarray(self.gains, dtype=float)
        return g if g.ndim == 2 else g[i]


@dataclass
class MpcSolution:
    input_means: np.ndarray
    state_means: np.ndarray
    covariances: np.ndarray
    cost_value: float
    diagnostics: dict = field(default_factory=dict)
    input_covariances: np.ndarray | None = None
    gp: object | None = None


# --- SQP ---------------------------------------------------------------------


def _mean_step(problem, gp, x, u, want_jac):
    nom = problem.nominal
    x_next = np.asarray(nom.step(x, u), dtype=float)
    jac = nom.jacobian(x, u) if want_jac else None
    if gp is not None:
        z = nom.gp_input(x, u)
        if want_jac:
            pred = gp.posterior(z, want_jacobian=True)
            mean, gjac = pred.mean, pred.mean_jacobian
            if problem.mean_mask is not None:
                gjac = gjac * np.asarray(problem.mean_mask)[:, None]
            jac = jac + nom.bd @ gjac @ nom.selector
        else:
            mean = gp.posterior_mean(z)
        if problem.mean_mask is not None:
            mean = mean * problem.mean_mask
        x_next = x_next + nom.bd @ mean
    return x_next, jac


def mean_rollout(problem, gp, x0, us, want_jac=True):
    n = us.shape[0]
    nx, nu = problem.nominal.n_x, problem.nominal.n_u
    xs = np.zeros((n + 1, nx))
    xs[0] = x0
    a = np.zeros((n, nx, nx)) if want_jac else None
    b = np.zeros((n, nx, nu)) if want_jac else None
    for i in range(n):
        xs[i + 1], jac = _mean_step(problem, gp, xs[i], us[i], want_jac)
        if not np.all(np.isfinite(xs[i + 1])):
            raise NumericalError(f"non-finite state mean at prediction step {i + 1}")
        if want_jac:
            a[i] = jac[:, :nx]
            b[i] = jac[:, nx:]
    return xs, a, b


def _covariances(problem, gp, x0, us):
    """Means, state and input covariances, and mean-dynamics Jacobians along ``us``."""
    if problem.method is PropagationMethod.MOMENT_MATCHING:
        means, covs, joints = rollout(problem.nominal, gp, x0, us, problem.gains,
                                      problem.sigma_w, problem.method,
                                      mean_mask=problem.mean_mask)
        input_covs = None
        if problem.gains is not None:
            input_covs = np.array([j.sigma_u for j in joints])
        nx = problem.nominal.n_x
        jac = np.array([j.jacobian for j in joints])
        return means, covs, input_covs, jac[:, :, :nx], jac[:, :, nx:]
    return _linearized_rollout(problem, gp, x0, us)


def _linearized_rollout(problem, gp, x0, us):
    """Mean-equivalent / Taylor propagation in closed form.

    With ``M = df/d[x;u] + B_d G`` the joint-Gaussian update collapses to
    ``Sigma+ = M Sigma_z M^T + B_d (V + Sigma_w) B_d^T`` where ``G`` is the GP
    mean Jacobian (zero for mean-equivalent) and ``V`` the GP variance. This
    gives the same numbers as ``propagation.rollout`` with far less overhead.
    """
    nom = problem.nominal
    n = us.shape[0]
    nx, nu = nom.n_x, nom.n_u
    nz = nx + nu
    taylor = problem.method is PropagationMethod.TAYLOR
    mask = None if problem.mean_mask is None else np.asarray(problem.mean_mask, dtype=float)
    bd = nom.bd
    sw = None if problem.sigma_w is None else np.atleast_2d(np.asarray(problem.sigma_w, dtype=float))
    means = np.zeros((n + 1, nx))
    covs = np.zeros((n + 1, nx, nx))
    jacs = np.zeros((n, nx, nz))
    input_covs = np.zeros((n, nu, nu)) if problem.gains is not None else None
    means[0] = x0
    gmap = nom.gp_input_map
    sz = np.zeros((nz, nz))
    for i in range(n):
        x, u = means[i], us[i]
        sx = covs[i]
        sz[:nx, :nx] = sx
        gain = problem.gain_at(i)
        if gain is not None:
            sxu = -sx @ gain.T
            su = gain @ sx @ gain.T
            sz[:nx, nx:] = sxu
            sz[nx:, :nx] = sxu.T
            sz[nx:, nx:] = su
            input_covs[i] = su
        f_jac = nom.jacobian(x, u)
        x_next = np.asarray(nom.step(x, u), dtype=float)
        noise = np.zeros((nom.n_d, nom.n_d)) if sw is None else sw.copy()
        m_cov = f_jac
        m_mean = f_jac
        if gp is not None:
            pred = gp.posterior(np.concatenate([x, u])[gmap], want_jacobian=True)
            mu_d, g = pred.mean, pred.mean_jacobian
            if mask is not None:
                mu_d = mu_d * mask
                g = g * mask[:, None]
            x_next = x_next + bd @ mu_d
            gfull = np.zeros((nom.n_d, nz))
            gfull[:, gmap] = g
            m_mean = f_jac + bd @ gfull
            if taylor:
                m_cov = m_mean
            noise += pred.variance
        sig = m_cov @ sz @ m_cov.T + bd @ noise @ bd.T
        covs[i + 1] = 0.5 * (sig + sig.T)
        means[i + 1] = x_next
        jacs[i] = m_mean
        if not np.isfinite(x_next).all() or not np.isfinite(sig).all():
            raise NumericalError(f"non-finite prediction at step {i + 1}")
    return means, covs, input_covs, jacs[:, :, :nx], jacs[:, :, nx:]


def _sensitivities(a, b):
    n, nx, nu = b.shape
    s = np.zeros((n + 1, nx, n * nu))
    for i in range(n):
        s[i + 1] = a[i] @ s[i]
        s[i + 1][:, i * nu:(i + 1) * nu] += b[i]
    return s


def _grouped(v, groups):
    """Sum over groups of the largest positive entry of ``v``."""
    v = np.maximum(v, 0.0)
    if groups is None or not v.size:
        return float(v.sum())
    top = np.zeros(int(groups.max()) + 1)
    np.maximum.at(top, groups, v)
    return float(top.sum())


def _violation(blocks, xs, us):
    soft = 0.0
    hard = 0.0
    for blk in blocks:
        vals = xs[blk.steps] if blk.kind == "state" else us[blk.steps]
        v = np.einsum("kn,kn->k", blk.a, vals) - blk.b
        if blk.soft:
            soft += _grouped(v, blk.group)
        else:
            hard += float(np.maximum(v, 0.0).sum())
    return soft, hard


def _merit(problem, xs, us, blocks, var_cost):
    terms = problem.cost.evaluate(xs, us, problem)
    lin = float(np.sum(terms.gx * xs) + np.sum(terms.gu * us))
    soft, hard = _violation(blocks, xs, us)
    return terms.value + lin + var_cost + problem.penalty * (soft + 10.0 * hard)


def _initial_inputs(problem, warm_start):
    if warm_start is not None:
        us = np.array(warm_start.input_means, dtype=float)
        if us.shape == problem.u_ref.shape:
            return us
    return problem.u_ref.copy()


def _constraint_blocks(problem, xs, us, covs, input_covs):
    blocks = []
    for c in problem.constraints:
        blocks.extend(c.rows(xs, us, covs, input_covs, problem))
    return blocks


def _build_qp(problem, xs, us, sens, terms, blocks):
    n, nu = us.shape
    nv = n * nu
    m = terms.r.shape[1]
    jac = np.einsum("imn,inq->imq", terms.jx, sens)
    for i in range(n):
        jac[i][:, i * nu:(i + 1) * nu] += terms.ju[i]
    jac = jac.reshape(-1, nv)
    r = terms.r.reshape(-1)
    hess = 2.0 * jac.T @ jac
    grad = 2.0 * jac.T @ r + np.einsum("in,inq->q", terms.gx, sens) + terms.gu.reshape(-1)
    rows_soft, rhs_soft, rows_hard, rhs_hard, groups = [], [], [], [], []
    n_groups = 0
    for blk in blocks:
        if blk.kind == "state":
            rows = np.einsum("kn,knq->kq", blk.a, sens[blk.steps])
            rhs = blk.b - np.einsum("kn,kn->k", blk.a, xs[blk.steps])
        else:
            rows = np.zeros((blk.a.shape[0], nv))
            for j, (s, arow) in enumerate(zip(blk.steps, blk.a)):
                rows[j, s * nu:(s + 1) * nu] = arow
            rhs = blk.b - np.einsum("kn,kn->k", blk.a, us[blk.steps])
        (rows_soft if blk.soft else rows_hard).append(rows)
        (rhs_soft if blk.soft else rhs_hard).append(rhs)
        if blk.soft:
            k = rows.shape[0]
            if blk.group is None:
                g = np.arange(k)
            else:
                _, g = np.unique(blk.group, return_inverse=True)
            groups.append(g + n_groups)
            n_groups += int(g.max()) + 1 if k else 0
    a_soft = np.vstack(rows_soft) if rows_soft else np.zeros((0, nv))
    b_soft = np.concatenate(rhs_soft) if rhs_soft else np.zeros(0)
    a_hard = np.vstack(rows_hard) if rows_hard else np.zeros((0, nv))
    b_hard = np.concatenate(rhs_hard) if rhs_hard else np.zeros(0)
    groups = np.concatenate(groups) if groups else np.zeros(0, dtype=int)
    return hess, grad, a_soft, b_soft, groups, a_hard, b_hard


def _solve_subproblem(problem, hess, grad, a_soft, b_soft, groups, a_hard, b_hard):
    nv = grad.size
    nr = a_soft.shape[0]
    ns = int(groups.max()) + 1 if nr else 0
    scale = max(1.0, float(np.max(np.abs(np.diag(hess))))) if nv else 1.0
    h = np.zeros((nv + ns, nv + ns))
    h[:nv, :nv] = hess + problem.hessian_reg * scale * np.eye(nv)
    h[nv:, nv:] = problem.slack_weight * np.eye(ns)
    g = np.concatenate([grad, np.full(ns, problem.penalty)])
    a = np.zeros((nr + ns + a_hard.shape[0], nv + ns))
    a[:nr, :nv] = a_soft
    a[np.arange(nr), nv + groups] = -1.0
    a[nr:nr + ns, nv:] = -np.eye(ns)
    a[nr + ns:, :nv] = a_hard
    b = np.concatenate([b_soft, np.zeros(ns), b_hard])
    res = solve_qp(h, g, a, b)
    return res.x[:nv], res


def solve(problem, x0, warm_start=None, gp=None):
    """Solve the tractable stochastic MPC problem from state ``x0``."""
    t_start = time.perf_counter()
    gp = problem.gp if gp is None else gp
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise NumericalError("initial state is not finite")
    n, nu = problem.horizon, problem.nominal.n_u
    us = _initial_inputs(problem, warm_start)
    nx = problem.nominal.n_x
    covs = np.zeros((n + 1, nx, nx))
    input_covs = None
    uncertain = gp is not None or (problem.sigma_w is not None and np.any(problem.sigma_w))
    blocks = None
    xs_warm = None
    if uncertain and problem.variance_mode == "pre_evaluated":
        xs_warm, covs, input_covs, _, _ = _covariances(problem, gp, x0, us)
        blocks = _constraint_blocks(problem, xs_warm, us, covs, input_covs)
    var_cost = problem.cost.variance_cost(covs, input_covs, xs_warm)
    diag = {"iterations": 0, "kkt_residual": np.inf, "qp_status": [], "merit": [],
            "status": "max_iter", "qp_iterations": 0}
    in_loop = uncertain and problem.variance_mode == "in_loop"

    def evaluate(u_seq):
        if in_loop:
            out = _covariances(problem, gp, x0, u_seq)
            if problem.method is not PropagationMethod.TAYLOR:
                out = (*mean_rollout(problem, gp, x0, u_seq), out[1], out[2])
            else:
                out = (out[0], out[3], out[4], out[1], out[2])
            return out
        return (*mean_rollout(problem, gp, x0, u_seq), covs, input_covs)

    # the full evaluation of an accepted full step is reused by the next iteration
    ev_us, ev = None, None
    for it in range(problem.max_iter):
        if ev_us is not us:
            ev_us, ev = us, evaluate(us)
        xs, a, b, covs, input_covs = ev
        if in_loop:
            var_cost = problem.cost.variance_cost(covs, input_covs, xs)
            blocks = None
        if blocks is None or not uncertain:
            blocks = _constraint_blocks(problem, xs, us, covs, input_covs)
        sens = _sensitivities(a, b)
        terms = problem.cost.evaluate(xs, us, problem)
        hess, grad, a_soft, b_soft, groups, a_hard, b_hard = _build_qp(problem, xs, us, sens,
                                                                       terms, blocks)
        try:
            step, res = _solve_subproblem(problem, hess, grad, a_soft, b_soft, groups, a_hard,
                                          b_hard)
        except QpInfeasible as exc:
            diag["qp_status"].append("infeasible")
            raise SolverError(f"QP subproblem infeasible at SQP iteration {it}: {exc}") from None
        diag["qp_status"].append(res.status)
        diag["qp_iterations"] += res.iterations
        diag["iterations"] = it + 1
        step_u = step.reshape(n, nu)
        viol0 = (_grouped(-b_soft, groups), np.maximum(-b_hard, 0).sum())
        # stationarity of the Lagrangian at the current iterate equals -H step at
        # the QP solution; it is measured relative to the gradient magnitude
        grad_scale = max(1.0, float(np.max(np.abs(grad)))) if grad.size else 1.0
        stationarity = float(np.max(np.abs(hess @ step))) / grad_scale if step.size else 0.0
        kkt = max(stationarity, viol0[0], viol0[1])
        diag["kkt_residual"] = kkt
        lin = float(np.sum(terms.gx * xs) + np.sum(terms.gu * us))
        merit0 = (terms.value + lin + var_cost
                  + problem.penalty * (viol0[0] + 10.0 * viol0[1]))
        if not diag["merit"]:
            diag["merit"].append(merit0)
        if kkt <= problem.kkt_tol:
            diag["status"] = "converged"
            break
        lin_soft = _grouped(a_soft @ step - b_soft, groups)
        lin_hard = np.maximum(a_hard @ step - b_hard, 0).sum()
        model_dec = (-(grad @ step + 0.5 * step @ hess @ step)
                     + problem.penalty * (viol0[0] - lin_soft + 10.0 * (viol0[1] - lin_hard)))
        alpha = 1.0
        accepted = False
        trial_ev = None
        while alpha >= 1e-6:
            trial = us + alpha * step_u
            if alpha == 1.0:
                trial_ev = evaluate(trial)
                xs_t = trial_ev[0]
            else:
                trial_ev = None
                xs_t = mean_rollout(problem, gp, x0, trial, want_jac=False)[0]
            merit_t = _merit(problem, xs_t, trial, blocks, var_cost)
            if merit_t <= merit0 - 1e-4 * alpha * max(model_dec, 0.0):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            diag["status"] = "line_search"
            break
        us = trial
        if trial_ev is not None:
            ev_us, ev = us, trial_ev
        diag["merit"].append(merit_t)
        if alpha * np.max(np.abs(step)) <= problem.step_tol:
            diag["status"] = "step"
            break
    if ev_us is not us:
        ev_us, ev = us, evaluate(us)
    xs, _, _, covs, input_covs = ev
    if in_loop:
        var_cost = problem.cost.variance_cost(covs, input_covs, xs)
    terms = problem.cost.evaluate(xs, us, problem)
    value = terms.value + float(np.sum(terms.gx * xs) + np.sum(terms.gu * us)) + var_cost
    diag["solve_time"] = time.perf_counter() - t_start
    diag["constraint_blocks"] = blocks
    return MpcSolution(us, xs, covs, value, diag, input_covs, gp)


def shift_solution(solution):
    """Warm start for the next step: drop the first input, repeat the last."""
    us = np.vstack([solution.input_means[1:], solution.input_means[-1:]])
    xs = np.vstack([solution.state_means[1:], solution.state_means[-1:]])
    covs = np.concatenate([solution.covariances[1:], solution.covariances[-1:]])
    return MpcSolution(us, xs, covs, solution.cost_value, {"shifted": True}, None, solution.gp)


def _active_gp(problem, warm, seed=0):
    if problem.gp is None or problem.sparse_inducing is None:
        return problem.gp
    base = problem.gp
    nom = problem.nominal
    if warm is not None:
        traj = np.array([nom.gp_input(x, u) for x, u in zip(warm.state_means[:-1],
                                                             warm.input_means)])
        z_ind = select_inducing_from_trajectory(traj, problem.sparse_inducing)
    else:
        ref = np.array([nom.gp_input(x, u) for x, u in zip(problem.x_ref[:-1], problem.u_ref)])
        z_ind = cold_start_inducing(base.dataset, problem.sparse_inducing, ref, seed)
    return SparseGpModel(base, z_ind)


def receding_step(problem, x_measured, prev_solution=None, **updates):
    """One closed-loop step; returns ``(applied_input, solution)``.

    ``updates`` replace problem fields (for example new references) before
    solving. On solver failure the shifted previous input is applied and the
    solution's diagnostics carry ``degraded=True``.
    """
    if updates:
        problem = problem.replace(**updates)
    warm = shift_solution(prev_solution) if prev_solution is not None else None
    try:
        gp = _active_gp(problem, warm)
        if warm is not None and warm.state_means is not None:
            warm.state_means, _, _ = mean_rollout(problem, gp, x_measured, warm.input_means,
                                                  want_jac=False)
        sol = solve(problem, x_measured, warm, gp=gp)
    except (SolverError, NumericalError, np.linalg.LinAlgError) as exc:
        log.warning("MPC solve failed, applying shifted previous input: %s", exc)
        if warm is None:
            fallback = problem.u_ref.copy()
            warm = MpcSolution(fallback, np.tile(x_measured, (problem.horizon + 1, 1)),
                               np.zeros((problem.horizon + 1, problem.nominal.n_x,
                                         problem.nominal.n_x)), np.nan)
        warm.diagnostics = {"degraded": True, "error": str(exc), "iterations": 0,
                            "kkt_residual": np.nan, "solve_time": 0.0}
        return warm.input_means[0].copy(), warm
    sol.diagnostics["degraded"] = False
    return sol.input_means[0].copy(), sol
