"""Oracle checks bundled as named suites.

Every check compares an implementation against an independent computation
(dense inverses, finite differences, Monte Carlo, closed forms, brute force).
``full=True`` uses the sample sizes and instance counts of the acceptance
runs; the default is a quicker version of the same check.
"""

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from .constraints import (Ball, HalfSpace, Polytope, Slab, marginal_box_radii,
                          pontryagin_diff_box, tighten_halfspace, tighten_marginal_box,
                          tighten_polytope_faces, tighten_slab, tube_radius)
from .gp import (GpDataset, GpModel, SeKernel, fit_hyperparameters, kernel_eval,
                 kernel_matrix, log_marginal_likelihood)
from .mpc import (MpcProblem, QuadraticCost, dare, expected_cost, lqr_gains, solve)
from .prob import (GaussianBelief, chi2_2_quantile, make_rng, mvn_sample,
                   std_normal_quantile, symmetrize_and_jitter)
from .propagation import PropagationMethod, gp_moments, linear_nominal, rollout
from .sparse import SparseGpModel, inducing_indices


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# --- random instances ------------------------------------------------------------


def random_gp(rng, n_z, n_d, m, max_cond=1e10):
    """Random SE-kernel GP with ``m`` data points.

    Instances whose noise-free kernel matrix has condition number above
    ``max_cond`` are redrawn with shorter length scales.
    """
    top = 2.0
    while True:
        z = rng.uniform(-2.0, 2.0, (m, n_z))
        kernels = [SeKernel(rng.uniform(0.15 * top, top, n_z), rng.uniform(0.5, 2.0))
                   for _ in range(n_d)]
        if all(np.linalg.cond(kernel_matrix(k.length_scales, k.signal_variance, z, z))
               <= max_cond for k in kernels):
            break
        top *= 0.7
    noise = rng.uniform(0.01, 0.1, n_d)
    y = np.column_stack([np.sin(z @ rng.normal(size=n_z)) + 0.1 * rng.normal(size=m)
                         for _ in range(n_d)])
    return GpModel(kernels, noise, GpDataset(z, y))


def dense_posterior(gp, z):
    """Textbook GP prediction with an explicit inverse (no cached factors)."""
    ds = gp.dataset
    mean = np.empty(gp.n_d)
    var = np.empty(gp.n_d)
    for a, k in enumerate(gp.kernels):
        kxx = np.array([[kernel_eval(k, zi, zj) for zj in ds.inputs] for zi in ds.inputs])
        kz = np.array([kernel_eval(k, z, zj) for zj in ds.inputs])
        inv = np.linalg.inv(kxx + gp.noise_variances[a] * np.eye(ds.size))
        mean[a] = kz @ inv @ ds.outputs[:, a]
        var[a] = kernel_eval(k, z, z) - kz @ inv @ kz
    return mean, var


# --- prob ----------------------------------------------------------------------


def check_quantiles(full=False):
    q = std_normal_quantile(0.9772498681)
    c = chi2_2_quantile(0.95)
    ok = abs(q - 2.0) <= 1e-6 and abs(c - (-2.0 * math.log(0.05))) <= 1e-12
    return ok, f"phi^-1(0.97725)={q:.9f}, chi2_2(0.95)={c:.6f}"


def check_symmetrize(full=False):
    rng = make_rng(1)
    a = rng.normal(size=(6, 6))
    psd = a @ a.T
    skew = rng.normal(size=(6, 6))
    pert = psd + 1e-12 * (skew - skew.T)
    err = float(np.max(np.abs(symmetrize_and_jitter(pert) - psd)))
    return err <= 1e-11, f"max deviation {err:.2e}"


def check_sampler(full=False):
    n = 10 ** 6 if full else 10 ** 5
    s = mvn_sample(GaussianBelief([0.0], [[1.0]]), n, seed=3)
    m = float(s.mean())
    return abs(m) <= 4.0 / math.sqrt(n), f"sample mean {m:.2e}, bound {4 / math.sqrt(n):.2e}"


# --- GP --------------------------------------------------------------------------


def check_kernel_value(full=False):
    v = kernel_eval(SeKernel(np.ones(2), 1.0), np.array([1.0, 0.0]), np.zeros(2))
    return abs(v - math.exp(-0.5)) <= 1e-15, f"k = {v:.12f}"


def check_single_point_alpha(full=False):
    k = SeKernel(np.array([0.7]), 1.3)
    gp = GpModel([k], [0.2], GpDataset(np.array([[0.4]]), np.array([[0.9]])))
    expect = 0.9 / (1.3 + 0.2)
    return abs(gp.alpha[0, 0] - expect) <= 1e-14, f"alpha {gp.alpha[0, 0]:.15f} vs {expect:.15f}"


def gp_exactness(count=50, seed=11):
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(count):
        gp = random_gp(rng, int(rng.integers(1, 6)), int(rng.integers(1, 4)),
                       int(rng.integers(1, 51)))
        for _ in range(3):
            z = rng.uniform(-2.5, 2.5, gp.n_z)
            pred = gp.posterior(z)
            m, v = dense_posterior(gp, z)
            worst = max(worst, np.max(np.abs(pred.mean - m)),
                        np.max(np.abs(np.diag(pred.variance) - v)))
    return worst


def check_gp_exactness(full=False):
    worst = gp_exactness(50 if full else 10)
    return worst <= 1e-8, f"max |full - dense oracle| = {worst:.2e}"


def fitc_exactness(count=50, seed=11):
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(count):
        gp = random_gp(rng, int(rng.integers(1, 6)), int(rng.integers(1, 4)),
                       int(rng.integers(1, 51)))
        sp = SparseGpModel(gp, gp.dataset.inputs)
        for _ in range(3):
            z = rng.uniform(-2.5, 2.5, gp.n_z)
            a, b = gp.posterior(z), sp.posterior(z)
            worst = max(worst, np.max(np.abs(a.mean - b.mean)),
                        np.max(np.abs(a.variance - b.variance)))
    return worst


def check_fitc_exactness(full=False):
    worst = fitc_exactness(50 if full else 10)
    return worst <= 1e-8, f"max |FITC - full| with inducing = training: {worst:.2e}"


def _rel(a, b):
    """Norm-wise relative error ``|a - b|_inf / |b|_inf``."""
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def gradient_errors(count=20, seed=5):
    """Worst relative errors of the mean Jacobian and the LML gradient vs central FD."""
    rng = make_rng(seed)
    worst_jac = worst_lml = 0.0
    for _ in range(count):
        gp = random_gp(rng, int(rng.integers(1, 5)), int(rng.integers(1, 3)),
                       int(rng.integers(5, 30)))
        z = rng.uniform(-2.0, 2.0, gp.n_z)
        jac = gp.posterior(z, want_jacobian=True).mean_jacobian
        h = 1e-5
        fd = np.empty_like(jac)
        for i in range(gp.n_z):
            e = np.zeros(gp.n_z)
            e[i] = h
            fd[:, i] = (gp.posterior(z + e).mean - gp.posterior(z - e).mean) / (2 * h)
        worst_jac = max(worst_jac, _rel(jac, fd))
        theta = gp.log_params() + rng.uniform(-0.3, 0.3, gp.log_params().shape)
        _, grad = log_marginal_likelihood(gp, theta)
        fdg = np.empty_like(grad)
        for idx in np.ndindex(*theta.shape):
            tp, tm = theta.copy(), theta.copy()
            tp[idx] += h
            tm[idx] -= h
            fdg[idx] = (log_marginal_likelihood(gp, tp)[0]
                        - log_marginal_likelihood(gp, tm)[0]) / (2 * h)
        worst_lml = max(worst_lml, _rel(grad, fdg))
    return worst_jac, worst_lml


def check_gradients(full=False):
    wj, wl = gradient_errors(20 if full else 5)
    ok = wj <= 1e-4 and wl <= 1e-4
    return ok, f"mean Jacobian rel err {wj:.2e}, LML gradient rel err {wl:.2e}"


def check_hyperparameter_recovery(full=False):
    # inputs span ~20 length scales so the signal variance is identifiable at M = 50
    rng = make_rng(21)
    z = rng.uniform(-8.0, 8.0, (50, 1))
    k = kernel_matrix(np.array([0.5]), 1.0, z, z) + 0.01 * np.eye(50)
    y = np.linalg.cholesky(k) @ rng.standard_normal(50)
    ds = GpDataset(z, y[:, None])
    truth = np.log([[0.5, 1.0, 0.01]])
    fit = fit_hyperparameters(ds, np.log([[1.0, 0.5, 0.05]]), restarts=5, seed=0)
    err = float(np.max(np.abs(fit.log_params()[0] - truth[0])))
    # the optimiser must also beat the generating hyperparameters on the objective
    gain = float(log_marginal_likelihood(fit)[0] - log_marginal_likelihood(fit, truth)[0])
    return err <= 0.5 and gain >= -1e-9, f"max log-space error {err:.3f}, LML gain {gain:.3f}"


def check_fifo(full=False):
    ds = GpDataset(np.arange(30.0)[:, None], np.zeros((30, 1)), capacity=30)
    ds2 = ds.append([[30.0]], [[1.0]])
    ok = ds2.size == 30 and ds2.inputs[0, 0] == 1.0 and ds2.inputs[-1, 0] == 30.0
    return ok, f"size {ds2.size}, oldest {ds2.inputs[0, 0]}"


# --- sparse -----------------------------------------------------------------------


def check_single_inducing(full=False):
    rng = make_rng(2)
    gp = random_gp(rng, 2, 1, 20)
    sp = SparseGpModel(gp, gp.dataset.inputs[:1])
    zs = rng.uniform(-3, 3, (200, 2))
    _, var = sp.predict_batch(zs)
    excess = float(np.max(var - gp.sf2[0]))
    return excess <= 1e-10, f"max variance above prior: {excess:.2e}"


def check_inducing_spacing(full=False):
    idx = inducing_indices(30, 10)
    expect = np.unique(np.round(np.linspace(0, 29, 10)).astype(int))
    return bool(np.array_equal(idx, expect)), f"indices {idx.tolist()}"


def check_fitc_near_data(full=False):
    """Along a path through the inducing set FITC variance tracks the full GP."""
    rng = make_rng(8)
    t = np.linspace(0, 2 * np.pi, 60)
    z = np.column_stack([np.cos(t), np.sin(t)]) + 0.05 * rng.normal(size=(60, 2))
    y = (z[:, 0] * z[:, 1])[:, None] + 0.05 * rng.normal(size=(60, 1))
    gp = GpModel([SeKernel(np.array([0.3, 0.3]), 1.0)], [0.0025], GpDataset(z, y))
    sp = SparseGpModel(gp, z[::4])
    path = np.column_stack([np.cos(t[::3]), np.sin(t[::3])])
    _, vf = gp.predict_batch(path)
    _, vs = sp.predict_batch(path)
    near = float(np.max(np.abs(vs - vf)) / gp.sf2[0])
    far_z = np.array([[0.0, 0.0], [3.0, 3.0]])
    _, vf2 = gp.predict_batch(far_z)
    _, vs2 = sp.predict_batch(far_z)
    return near <= 0.1, f"variance gap on the path {near:.3f} of prior; far field {vf2.ravel()} vs {vs2.ravel()}"


# --- propagation ------------------------------------------------------------------


def moment_matching_instances(count=10, seed=31):
    rng = make_rng(seed)
    out = []
    for i in range(count):
        n_z = 1 + i % 2
        n_d = 1 + (i // 2) % 2
        gp = random_gp(rng, n_z, n_d, int(rng.integers(5, 20)))
        mu = rng.uniform(-1.0, 1.0, n_z)
        a = rng.normal(size=(n_z, n_z)) * 0.3
        sigma = a @ a.T + 0.09 * np.eye(n_z) if n_z > 1 else np.array([[0.09]])
        out.append((gp, mu, sigma))
    return out


def moment_matching_zscores(n=10 ** 6, count=10, seed=31):
    """Largest |MM - MC| / SE over mean, variance and cross-covariance entries."""
    worst = 0.0
    for j, (gp, mu, sigma) in enumerate(moment_matching_instances(count, seed)):
        mom = gp_moments(gp, mu, sigma, "moment_matching")
        zs = mvn_sample(GaussianBelief(mu, sigma), n, seed=1000 + j)
        means, variances = gp.predict_batch(zs)
        mc_mean = means.mean(axis=0)
        dev = means - mc_mean
        se_mean = dev.std(axis=0) / math.sqrt(n)
        worst = max(worst, np.max(np.abs(mom.mean - mc_mean) / se_mean))
        # covariance of d: E[var(z)] on the diagonal plus the covariance of the mean
        q = dev[:, :, None] * dev[:, None, :]
        q[:, np.arange(gp.n_d), np.arange(gp.n_d)] += variances
        mc_cov = q.mean(axis=0)
        se_cov = q.std(axis=0) / math.sqrt(n)
        worst = max(worst, np.max(np.abs(mom.cov - mc_cov) / se_cov))
        zd = zs - zs.mean(axis=0)
        c = zd[:, :, None] * dev[:, None, :]
        mc_cross = c.mean(axis=0)
        se_cross = c.std(axis=0) / math.sqrt(n)
        worst = max(worst, np.max(np.abs(mom.cross - mc_cross) / se_cross))
    return worst


def check_moment_matching(full=False):
    worst = moment_matching_zscores(10 ** 6 if full else 10 ** 5, 10 if full else 4)
    return worst <= 3.0, f"max |MM - MC| = {worst:.2f} standard errors"


def check_lyapunov(full=False):
    rng = make_rng(4)
    a = np.array([[1.0, 0.1], [0.0, 1.0]])
    b = np.array([[0.005], [0.1]])
    bd = np.eye(2)
    k, _ = lqr_gains(a, b, np.eye(2), np.eye(1))
    gp = GpModel([SeKernel(np.ones(2), 0.3), SeKernel(np.ones(2), 0.2)], [0.01, 0.01],
                 GpDataset.empty(2, 2))
    nom = linear_nominal(a, b, bd, [0, 1])
    sw = np.diag([1e-3, 2e-3])
    us = rng.normal(size=(10, 1))
    _, covs, _ = rollout(nom, gp, np.zeros(2), us, k, sw, "mean_equivalent")
    acl = a - b @ k
    s = np.zeros((2, 2))
    err = 0.0
    for i in range(10):
        s = acl @ s @ acl.T + bd @ (np.diag(gp.sf2) + sw) @ bd.T
        err = max(err, float(np.max(np.abs(s - covs[i + 1]))))
    return err <= 1e-12, f"max deviation from the Lyapunov recursion {err:.2e}"


def check_feedback_shrinks_uncertainty(full=False):
    a = np.array([[1.0, 0.1], [0.0, 1.0]])
    b = np.array([[0.005], [0.1]])
    nom = linear_nominal(a, b, np.array([[0.0], [1.0]]), [1])
    rng = make_rng(6)
    v = rng.uniform(-2, 2, (30, 1))
    gp = GpModel([SeKernel(np.array([1.0]), 0.04)], [1e-4],
                 GpDataset(v, -0.1 * v * np.abs(v)))
    k, _ = lqr_gains(a, b, np.eye(2), np.eye(1))
    us = np.zeros((20, 1))
    _, open_covs, _ = rollout(nom, gp, np.array([0.0, 0.5]), us, None, None, "taylor")
    _, closed_covs, _ = rollout(nom, gp, np.array([0.0, 0.5]), us, k, None, "taylor")
    to, tc = np.trace(open_covs[-1]), np.trace(closed_covs[-1])
    return tc < to, f"trace after 20 steps: open loop {to:.4f}, closed loop {tc:.4f}"


# --- constraints ------------------------------------------------------------------


def check_tightening_values(full=False):
    hs = tighten_halfspace(HalfSpace([1.0, 0.0], 1.0), np.eye(2), 0.9772)
    sl = tighten_slab([1.0], 1.0, np.eye(1), 0.9544)
    box = Polytope(np.vstack([np.eye(2), -np.eye(2)]), np.ones(4))
    pf = tighten_polytope_faces(box, 0.04 * np.eye(2), 0.95)
    r1 = tube_radius(1.0, 0.04 * np.eye(2), chi2=1.0)
    r2 = tube_radius(1.0, np.diag([0.01, 0.04]), chi2=1.0)
    shift = 1.0 - pf.b
    ok = (abs(1.0 - hs.b - 2.0) <= 1e-3 and abs(1.0 - sl.b - 2.0) <= 1e-3
          and np.all(np.abs(shift - 0.4478) <= 1e-3)
          and abs(r1 - 0.8) <= 1e-12 and abs(r2 - 0.8) <= 1e-12)
    return ok, (f"half-space shift {1 - hs.b:.4f}, slab shift {1 - sl.b:.4f}, face shift "
                f"{shift[0]:.4f}, ball radii {r1:.4f}/{r2:.4f}")


def random_polytope(rng, n):
    m = int(rng.integers(n + 1, 2 * n + 4))
    h = rng.normal(size=(m, n))
    h /= np.linalg.norm(h, axis=1, keepdims=True)
    return Polytope(h, rng.uniform(1.0, 3.0, m))


def pontryagin_brute_force(poly, r):
    """Face offsets ``b_j - max_e h_j.e`` with ``e`` ranging over all box vertices."""
    n = r.size
    verts = list(itertools.product(*[(-ri, ri) for ri in r]))
    support = np.array([max(math.fsum(h * np.array(v)) for v in verts) for h in poly.H])
    return poly.b - support.reshape(-1) if n else poly.b.copy()


def pontryagin_errors(count=50, seed=41):
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(count):
        n = int(rng.integers(1, 7))
        poly = random_polytope(rng, n)
        r = rng.uniform(0.0, 0.2, n)
        diff = pontryagin_diff_box(poly, r)
        worst = max(worst, float(np.max(np.abs(diff.b - pontryagin_brute_force(poly, r)))))
    return worst


def check_pontryagin(full=False):
    worst = pontryagin_errors(50)
    return worst == 0.0, f"max |closed form - brute force| = {worst:.1e}"


def check_marginal_box_matches_faces(full=False):
    sigma = np.diag([0.04, 0.09])
    box = Polytope(np.vstack([np.eye(2), -np.eye(2)]), np.ones(4))
    mb = tighten_marginal_box(box, sigma, 0.9)
    r = marginal_box_radii(sigma, 0.9)
    level = (1.0 + (1.0 - 0.1 / 2)) / 2.0
    expect = np.tile(std_normal_quantile(level) * np.sqrt(np.diag(sigma)), 2)
    err = float(np.max(np.abs((box.b - mb.b) - expect)))
    return err <= 1e-12, f"radii {r}, max deviation {err:.1e}"


def chance_soundness(n=10 ** 6, levels=(0.9, 0.95, 0.9772), seed=51):
    """Violation frequencies of the original sets with the mean on the tightened boundary.

    Returns a list of ``(constructor, p, frequency, bound)``.
    """
    rng = make_rng(seed)
    a = rng.normal(size=(2, 2))
    sigma = a @ a.T * 0.02 + 0.01 * np.eye(2)
    out = []
    for j, p in enumerate(levels):
        bound = (1 - p) + 3 * math.sqrt(p * (1 - p) / n)
        s = seed + 10 * j
        # half-space
        hs = HalfSpace([1.0, 0.5], 1.0)
        t = tighten_halfspace(hs, sigma, p)
        mean = t.b * hs.h / (hs.h @ hs.h)
        out.append(("half_space", p, _freq(hs, mean, sigma, n, s), bound))
        # slab, mean on the upper tightened edge
        sl = tighten_slab([1.0, -0.3], 1.0, sigma, p)
        h = np.asarray(sl.h)
        mean = sl.b * h / (h @ h)
        out.append(("slab", p, _freq(Slab(h, 1.0), mean, sigma, n, s + 1), bound))
        # polytope faces and marginal box, mean at a vertex of the tightened box
        box = Polytope(np.vstack([np.eye(2), -np.eye(2)]), np.ones(4))
        tf = tighten_polytope_faces(box, sigma, p)
        out.append(("polytope_faces", p, _freq(box, tf.b[:2], sigma, n, s + 2), bound))
        tm = tighten_marginal_box(box, sigma, p)
        out.append(("marginal_box", p, _freq(box, tm.b[:2], sigma, n, s + 3), bound))
        # ball: mean displaced along the major axis by the tightened radius
        w, v = np.linalg.eigh(sigma)
        rt = tube_radius(1.0, sigma, p=p)
        ball = Ball(np.zeros(2), 1.0)
        out.append(("ball", p, _freq(ball, rt * v[:, -1], sigma, n, s + 4), bound))
    return out


def _freq(region, mean, sigma, n, seed):
    x = mvn_sample(GaussianBelief(mean, sigma), n, seed)
    return 1.0 - float(np.mean(region.contains(x)))


def check_chance_soundness(full=False):
    rows = chance_soundness(10 ** 6 if full else 10 ** 5)
    bad = [r for r in rows if r[2] > r[3]]
    worst = max(rows, key=lambda r: r[2] - r[3])
    return not bad, (f"{len(rows) - len(bad)}/{len(rows)} within bound; closest: {worst[0]} "
                     f"p={worst[1]} freq {worst[2]:.5f} vs bound {worst[3]:.5f}")


# --- MPC -------------------------------------------------------------------------


def check_scalar_dare(full=False):
    p, _ = dare(np.eye(1), np.eye(1), np.eye(1), np.eye(1))
    golden = (1 + math.sqrt(5)) / 2
    err = abs(float(p[0, 0]) - golden)
    return err <= 1e-10, f"P = {float(p[0, 0]):.12f}, error {err:.1e}"


def riccati_inputs(a, b, q, r, p_term, x0, n):
    """Finite-horizon LQR input sequence by the backward Riccati recursion."""
    p = p_term
    gains = []
    for _ in range(n):
        k = np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)
        p = q + a.T @ p @ (a - b @ k)
        gains.append(k)
    gains.reverse()
    x = x0
    us = []
    for k in gains:
        u = -k @ x
        us.append(u)
        x = a @ x + b @ u
    return np.array(us)


def lqr_errors(count=5, seed=61):
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(count):
        nx, nu = int(rng.integers(2, 5)), int(rng.integers(1, 3))
        a = rng.normal(size=(nx, nx)) * 0.5 + np.eye(nx) * 0.5
        b = rng.normal(size=(nx, nu))
        qh = rng.normal(size=(nx, nx))
        q = qh @ qh.T + 0.1 * np.eye(nx)
        r = np.eye(nu) * rng.uniform(0.5, 2.0)
        pt = q.copy()
        n = 15
        x0 = rng.normal(size=nx)
        nom = linear_nominal(a, b, np.eye(nx), list(range(nx)))
        prob = MpcProblem(nom, n, QuadraticCost(q, r, pt), max_iter=5, kkt_tol=1e-12)
        sol = solve(prob, x0)
        ref = riccati_inputs(a, b, q, r, pt, x0, n)
        worst = max(worst, float(np.max(np.abs(sol.input_means - ref))))
    return worst


def check_lqr(full=False):
    worst = lqr_errors(5)
    return worst <= 1e-6, f"max |SQP - Riccati| = {worst:.2e}"


def check_expected_cost(full=False):
    rng = make_rng(71)
    n, nx, nu = 4, 2, 1
    q, r, p = np.diag([1.0, 2.0]), np.eye(1) * 0.5, np.diag([3.0, 1.0])
    means = rng.normal(size=(n + 1, nx))
    umeans = rng.normal(size=(n, nu))
    covs = np.array([np.eye(nx) * v for v in rng.uniform(0.05, 0.2, n + 1)])
    ucovs = np.array([np.eye(nu) * v for v in rng.uniform(0.05, 0.2, n)])
    xr, ur = np.zeros((n + 1, nx)), np.zeros((n, nu))
    val = expected_cost(means, covs, umeans, ucovs, xr, ur, QuadraticCost(q, r, p))
    m = 10 ** 5
    tot = np.zeros(m)
    for i in range(n + 1):
        x = mvn_sample(GaussianBelief(means[i], covs[i]), m, seed=100 + i)
        w = p if i == n else q
        tot += np.einsum("ni,ij,nj->n", x, w, x)
        if i < n:
            u = mvn_sample(GaussianBelief(umeans[i], ucovs[i]), m, seed=200 + i)
            tot += np.einsum("ni,ij,nj->n", u, r, u)
    z = abs(val - tot.mean()) / (tot.std() / math.sqrt(m))
    return z <= 3.0, f"closed form {val:.4f}, Monte Carlo {tot.mean():.4f} ({z:.2f} SE)"


def check_warm_start(full=False):
    from .mpc import StateConstraint, shift_solution  # local: only used here
    from .propagation import NominalModel
    # undamped pendulum swinging down from 2.5 rad: nonlinear enough that SQP
    # needs several iterations from a cold start
    dt = 0.1

    def step(x, u):
        return np.array([x[0] + dt * x[1], x[1] + dt * (-3.0 * np.sin(x[0]) + u[0])])

    nom = NominalModel(2, 1, step, np.eye(2), [0, 1])
    prob = MpcProblem(nom, 20, QuadraticCost(np.eye(2), np.eye(1) * 0.1, np.eye(2)),
                      constraints=[StateConstraint(np.array([[0.0, -1.0]]), np.array([0.5]))],
                      kkt_tol=1e-9)
    x0 = np.array([2.5, 0.0])
    first = solve(prob, x0)
    x1 = step(x0, first.input_means[0])
    cold = solve(prob, x1)
    warm = solve(prob, x1, shift_solution(first))
    du = abs(float(cold.input_means[0, 0] - warm.input_means[0, 0]))
    ok = du <= 1e-4 and warm.diagnostics["iterations"] < cold.diagnostics["iterations"]
    return ok, (f"first-input gap {du:.1e}, iterations warm {warm.diagnostics['iterations']}"
                f" / cold {cold.diagnostics['iterations']}")


# --- scenarios -------------------------------------------------------------------


def check_track(full=False):
    from .scenarios.track import Track, circle_track
    tr = Track()
    # the underlying spline, not the wrapped accessor, must close with C1 continuity
    closure = float(max(np.max(np.abs(tr._spline(0.0) - tr._spline(tr.length))),
                        np.max(np.abs(tr._d1(0.0) - tr._d1(tr.length)))))
    dense = np.linspace(0.0, tr.length, 20001)
    pts_dense = tr.point(dense)
    mid = 0.5 * (dense[:-1] + dense[1:])[::97]
    lin = 0.5 * (pts_dense[:-1] + pts_dense[1:])[::97]
    refine = float(np.max(np.linalg.norm(tr.point(mid) - lin, axis=1)))
    circ = circle_track(1.0, 36)
    th = np.linspace(0, circ.length, 97)
    pts = circ.point(th)
    radial = float(np.max(np.abs(np.linalg.norm(pts, axis=1) - 1.0)))
    ortho = float(np.max(np.abs(np.einsum("ij,ij->i", pts, circ.tangent(th)))))
    # chord midpoint vs arc midpoint differs by about kappa h^2 / 8
    ok = closure <= 1e-9 and radial <= 1e-3 and ortho <= 1e-3 and refine <= 1e-6
    return ok, (f"closure {closure:.1e}, circle radius error {radial:.1e}, tangent.radius "
                f"{ortho:.1e}, polyline refinement {refine:.1e}")


def check_training_targets(full=False):
    from .scenarios.common import collect_training_data
    a = np.array([[1.0, 0.1], [0.0, 0.9]])
    b = np.array([[0.0], [0.1]])
    nom = linear_nominal(a, b, np.array([[0.0], [1.0]]), [1, 2])
    rng = make_rng(9)
    us = rng.normal(size=(40, 1))
    xs = [np.zeros(2)]
    for u in us:
        xs.append(nom.step(xs[-1], u))
    ds = collect_training_data(np.array(xs), us, nom)
    err = float(np.max(np.abs(ds.outputs)))
    return err <= 1e-14, f"max |target| on nominal data {err:.1e}"


SUITES = {
    "prob": [check_quantiles, check_symmetrize, check_sampler],
    "gp": [check_kernel_value, check_single_point_alpha, check_gp_exactness, check_gradients,
           check_hyperparameter_recovery, check_fifo],
    "sparse": [check_fitc_exactness, check_single_inducing, check_inducing_spacing,
               check_fitc_near_data],
    "propagation": [check_moment_matching, check_lyapunov, check_feedback_shrinks_uncertainty],
    "constraints": [check_tightening_values, check_pontryagin, check_marginal_box_matches_faces,
                    check_chance_soundness],
    "mpc": [check_scalar_dare, check_lqr, check_expected_cost, check_warm_start],
    "scenarios": [check_track, check_training_targets],
}


def run_suite(name="all", full=False):
    names = list(SUITES) if name == "all" else [name]
    for n in names:
        if n not in SUITES:
            raise ValueError(f"unknown suite {n!r}; choose from {', '.join(SUITES)} or all")
    results = []
    for n in names:
        for fn in SUITES[n]:
            t0 = time.perf_counter()
            try:
                ok, detail = fn(full)
            except Exception as exc:  # a crashing oracle is a failed check, not a crash
                ok, detail = False, f"error: {type(exc).__name__}: {exc}"
            results.append(CheckResult(n, fn.__name__.removeprefix("check_"), bool(ok), detail,
                                       time.perf_counter() - t0))
    return results
