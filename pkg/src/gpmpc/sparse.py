"""FITC sparse GP and trajectory-based inducing-point selection."""

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .gp import _SeRepresentation, kernel_matrix
from .prob import NumericalError, make_rng, robust_cholesky, symmetrize

LAMBDA_FLOOR = 1e-12


class SparseGpModel(_SeRepresentation):
    """FITC approximation of a GpModel around a set of inducing inputs.

    After construction, prediction cost depends only on the number of inducing
    points: ``alpha`` and ``W = Kuu^-1 - (Kuu + Kuf Lambda^-1 Kfu)^-1`` are
    precomputed per output.
    """

    def __init__(self, base, inducing_inputs):
        z_ind = np.atleast_2d(np.asarray(inducing_inputs, dtype=float))
        if z_ind.shape[0] < 1:
            raise ValueError("need at least one inducing input")
        if z_ind.shape[1] != base.n_z:
            raise ValueError(f"inducing inputs must have {base.n_z} columns, got {z_ind.shape[1]}")
        self.base = base
        self.inducing_inputs = z_ind
        self.support = z_ind
        self.length_scales = base.length_scales
        self.sf2 = base.sf2
        self.prior_mean = base.prior_mean
        self.prior_mean_jacobian = base.prior_mean_jacobian
        m_ind = z_ind.shape[0]
        ds = base.dataset
        targets = ds.outputs
        if base.prior_mean is not None and ds.size:
            targets = targets - np.array([base._prior(z) for z in ds.inputs])
        self.alpha = np.zeros((self.n_d, m_ind))
        self.wmat = np.zeros((self.n_d, m_ind, m_ind))
        self.lambdas = []
        for a in range(self.n_d):
            kuu = kernel_matrix(self.length_scales[a], self.sf2[a], z_ind, z_ind)
            try:
                luu, _ = robust_cholesky(kuu, jitter=1e-12)
            except NumericalError as exc:
                raise NumericalError(f"inducing kernel matrix, output {a}: {exc}") from None
            eye = np.eye(m_ind)
            if ds.size == 0:
                self.wmat[a] = cho_solve((luu, True), eye)
                self.lambdas.append(np.zeros(0))
                continue
            kuf = kernel_matrix(self.length_scales[a], self.sf2[a], z_ind, ds.inputs)
            v = solve_triangular(luu, kuf, lower=True)
            qff_diag = np.sum(v * v, axis=0)
            lam = np.maximum(self.sf2[a] - qff_diag + base.noise_variances[a], LAMBDA_FLOOR)
            self.lambdas.append(lam)
            # B = I + V Lambda^-1 V^T with V = Luu^-1 Kuf. Then
            # W = Luu^-T B^-1 (V Lambda^-1 V^T) Luu^-1, which avoids subtracting two
            # nearly equal inverses when the inducing set is close to the data.
            vl = v / lam
            gram = vl @ v.T
            lb = np.linalg.cholesky(eye + gram)
            luu_inv = solve_triangular(luu, eye, lower=True)
            inner = cho_solve((lb, True), gram)
            self.wmat[a] = symmetrize(luu_inv.T @ inner @ luu_inv)
            self.alpha[a] = luu_inv.T @ cho_solve((lb, True), vl @ targets[:, a])
        for arr in (self.alpha, self.wmat):
            arr.setflags(write=False)


def fitc_build(base, inducing_inputs):
    return SparseGpModel(base, inducing_inputs)


def fitc_posterior(model, z, want_jacobian=False):
    return model.posterior(z, want_jacobian)


def inducing_indices(length, count):
    """Equal index spacing with both endpoints; midpoint when ``count == 1``."""
    if length < 1:
        raise ValueError("trajectory must contain at least one point")
    if count < 1:
        raise ValueError("need at least one inducing point")
    if count == 1:
        return np.array([(length - 1) // 2])
    return np.unique(np.linspace(0, length - 1, min(count, length)).round().astype(int))


def select_inducing_from_trajectory(trajectory, count):
    """Pick ``count`` rows spaced regularly along a (GP-input) trajectory."""
    traj = np.atleast_2d(np.asarray(trajectory, dtype=float))
    if traj.shape[0] == 0:
        raise ValueError("empty trajectory")
    return traj[inducing_indices(traj.shape[0], count)]


def cold_start_inducing(dataset, count, reference=None, seed=0):
    """Inducing inputs without a previous solution: reference, else random data rows."""
    if reference is not None and len(reference):
        return select_inducing_from_trajectory(reference, count)
    if dataset.size == 0:
        raise ValueError("no reference and no data to place inducing points")
    idx = make_rng(seed).choice(dataset.size, min(count, dataset.size), replace=False)
    return dataset.inputs[np.sort(idx)]
