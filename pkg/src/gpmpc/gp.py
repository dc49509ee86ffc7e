"""Multi-output Gaussian-process regression with squared-exponential kernels.

Every output dimension is an independent GP sharing the same training inputs.
The kernel is ``sf2 * exp(-0.5 * d^T diag(L)^-1 d)``; ``length_scales`` holds the
diagonal of ``L`` directly (it divides the *squared* distance).
"""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .prob import NumericalError, make_rng, robust_cholesky

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SeKernel:
    length_scales: np.ndarray
    signal_variance: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.length_scales, dtype=float))
        if np.any(ls <= 0) or not np.all(np.isfinite(ls)):
            raise ValueError(f"length scales must be positive, got {ls}")
        if not self.signal_variance > 0:
            raise ValueError(f"signal variance must be positive, got {self.signal_variance}")
        object.__setattr__(self, "length_scales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))


def kernel_eval(k, zi, zj):
    zi = np.asarray(zi, dtype=float)
    zj = np.asarray(zj, dtype=float)
    if zi.shape != zj.shape or zi.shape != k.length_scales.shape:
        raise ValueError(
            f"dimension mismatch: {zi.shape}, {zj.shape}, length scales {k.length_scales.shape}")
    d = zi - zj
    return k.signal_variance * math.exp(-0.5 * float(np.sum(d * d / k.length_scales)))


def kernel_matrix(length_scales, signal_variance, a, b):
    """Gram matrix between the rows of ``a`` and ``b``."""
    a = np.asarray(a, dtype=float) / np.sqrt(length_scales)
    b = np.asarray(b, dtype=float) / np.sqrt(length_scales)
    sq = (np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T)
    return signal_variance * np.exp(-0.5 * np.maximum(sq, 0.0))


@dataclass(frozen=True)
class GpDataset:
    inputs: np.ndarray
    outputs: np.ndarray
    capacity: int | None = None

    def __post_init__(self):
        z = np.asarray(self.inputs, dtype=float)
        y = np.asarray(self.outputs, dtype=float)
        if z.ndim != 2 or y.ndim != 2:
            raise ValueError("inputs and outputs must be 2-D arrays")
        if z.shape[0] != y.shape[0]:
            raise ValueError(f"row mismatch: {z.shape[0]} inputs vs {y.shape[0]} outputs")
        if z.shape[1] < 1 or y.shape[1] < 1:
            raise ValueError("need at least one input and one output column")
        z.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", z)
        object.__setattr__(self, "outputs", y)

    @classmethod
    def empty(cls, n_z, n_d, capacity=None):
        return cls(np.zeros((0, n_z)), np.zeros((0, n_d)), capacity)

    @property
    def size(self):
        return self.inputs.shape[0]

    @property
    def n_z(self):
        return self.inputs.shape[1]

    @property
    def n_d(self):
        return self.outputs.shape[1]

    def append(self, z, y):
        """FIFO append: the oldest rows are evicted beyond ``capacity``."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if z.shape[1] != self.n_z or y.shape[1] != self.n_d:
            raise ValueError(
                f"expected rows of width ({self.n_z}, {self.n_d}), got ({z.shape[1]}, {y.shape[1]})")
        inputs = np.vstack([self.inputs, z])
        outputs = np.vstack([self.outputs, y])
        if self.capacity is not None and inputs.shape[0] > self.capacity:
            inputs = inputs[-self.capacity:]
            outputs = outputs[-self.capacity:]
        return GpDataset(inputs, outputs, self.capacity)

    def subsample(self, count, seed=0):
        """Evenly spaced subset of ``count`` rows (random tie-break by seed)."""
        if count >= self.size:
            return self
        idx = np.unique(np.linspace(0, self.size - 1, count).round().astype(int))
        if idx.size < count:
            rest = np.setdiff1d(np.arange(self.size), idx)
            extra = make_rng(seed).choice(rest, count - idx.size, replace=False)
            idx = np.sort(np.concatenate([idx, extra]))
        return GpDataset(self.inputs[idx], self.outputs[idx], self.capacity)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"z{i}" for i in range(self.n_z)] + [f"y{i}" for i in range(self.n_d)])
            for zr, yr in zip(self.inputs, self.outputs):
                w.writerow([repr(float(v)) for v in zr] + [repr(float(v)) for v in yr])

    @classmethod
    def from_csv(cls, path, capacity=None):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        zcols = [i for i, h in enumerate(header) if h.startswith("z")]
        ycols = [i for i, h in enumerate(header) if h.startswith("y")]
        if not zcols or not ycols:
            raise ValueError(f"{path}: header must name z* and y* columns")
        data = np.array(body, dtype=float).reshape(len(body), len(header))
        return cls(data[:, zcols], data[:, ycols], capacity)


@dataclass(frozen=True)
class GpPrediction:
    mean: np.ndarray
    variance: np.ndarray
    mean_jacobian: np.ndarray | None = None


class _SeRepresentation:
    """Stacked per-output arrays so that prediction is vectorised over outputs.

    A predictor has the form ``mean_a(z) = m_a(z) + sum_j alpha_aj k_a(z, s_j)`` and
    ``var_a(z) = sf2_a - k_a(z)^T W_a k_a(z)`` for support points ``s``.
    Both the full GP and FITC fit this shape; only ``alpha`` and ``W`` differ.
    """

    support: np.ndarray
    length_scales: np.ndarray
    sf2: np.ndarray
    alpha: np.ndarray
    wmat: np.ndarray
    prior_mean = None
    prior_mean_jacobian = None

    @property
    def n_d(self):
        return self.sf2.size

    @property
    def n_z(self):
        return self.length_scales.shape[1]

    def _prior(self, z):
        if self.prior_mean is None:
            return np.zeros(self.n_d)
        return np.asarray(self.prior_mean(z), dtype=float).reshape(self.n_d)

    def _prior_jac(self, z):
        if self.prior_mean is None:
            return np.zeros((self.n_d, self.n_z))
        if self.prior_mean_jacobian is not None:
            return np.asarray(self.prior_mean_jacobian(z), dtype=float).reshape(self.n_d, self.n_z)
        h = 1e-6
        jac = np.empty((self.n_d, self.n_z))
        for i in range(self.n_z):
            e = np.zeros(self.n_z)
            e[i] = h
            jac[:, i] = (self._prior(z + e) - self._prior(z - e)) / (2 * h)
        return jac

    def kvec(self, z):
        """Kernel vectors ``k_a(z, s_j)``, shape ``(n_d, M)``, and ``z - s``."""
        diff = z[None, :] - self.support
        if diff.shape[0] == 0:
            return np.zeros((self.n_d, 0)), diff
        sq = (1.0 / self.length_scales) @ (diff * diff).T
        return self.sf2[:, None] * np.exp(-0.5 * sq), diff

    def posterior(self, z, want_jacobian=False):
        z = np.asarray(z, dtype=float).reshape(-1)
        if z.size != self.n_z:
            raise ValueError(f"expected GP input of size {self.n_z}, got {z.size}")
        k, diff = self.kvec(z)
        ak = self.alpha * k
        mean = ak.sum(axis=1)
        if self.prior_mean is not None:
            mean = mean + self._prior(z)
        kw = np.matmul(self.wmat, k[:, :, None])[:, :, 0]
        var = np.maximum(self.sf2 - (kw * k).sum(axis=1), 0.0)
        jac = None
        if want_jacobian:
            jac = -(ak @ diff) / self.length_scales
            if self.prior_mean is not None:
                jac = jac + self._prior_jac(z)
        return GpPrediction(mean, np.diag(var), jac)

    def posterior_mean(self, z):
        """Posterior mean only (no variance), for cheap repeated evaluation."""
        z = np.asarray(z, dtype=float).reshape(-1)
        k, _ = self.kvec(z)
        mean = (self.alpha * k).sum(axis=1)
        if self.prior_mean is not None:
            mean = mean + self._prior(z)
        return mean

    def predict_batch(self, zs):
        """Posterior means and variances at many inputs, shapes ``(n, n_d)``."""
        zs = np.atleast_2d(np.asarray(zs, dtype=float))
        means = np.empty((zs.shape[0], self.n_d))
        variances = np.empty((zs.shape[0], self.n_d))
        for a in range(self.n_d):
            kz = kernel_matrix(self.length_scales[a], self.sf2[a], zs, self.support)
            means[:, a] = kz @ self.alpha[a]
            variances[:, a] = self.sf2[a] - np.einsum("ni,ij,nj->n", kz, self.wmat[a], kz)
        if self.prior_mean is not None:
            means += np.array([self._prior(z) for z in zs])
        return means, np.clip(variances, 0.0, None)


class GpModel(_SeRepresentation):
    """Exact GP posterior with cached Cholesky factors; treat as immutable."""

    def __init__(self, kernels, noise_variances, dataset, prior_mean=None,
                 prior_mean_jacobian=None):
        kernels = list(kernels)
        noise = np.atleast_1d(np.asarray(noise_variances, dtype=float))
        if len(kernels) != dataset.n_d or noise.size != dataset.n_d:
            raise ValueError("need one kernel and one noise variance per output dimension")
        if np.any(noise <= 0):
            raise ValueError(f"noise variances must be positive, got {noise}")
        for k in kernels:
            if k.length_scales.size != dataset.n_z:
                raise ValueError("kernel length scales do not match the GP input dimension")
        self.kernels = tuple(kernels)
        self.noise_variances = noise
        self.dataset = dataset
        self.prior_mean = prior_mean
        self.prior_mean_jacobian = prior_mean_jacobian
        self.support = dataset.inputs
        self.length_scales = np.array([k.length_scales for k in kernels])
        self.sf2 = np.array([k.signal_variance for k in kernels])
        m = dataset.size
        self.chol = np.zeros((self.n_d, m, m))
        self.alpha = np.zeros((self.n_d, m))
        self.wmat = np.zeros((self.n_d, m, m))
        if m:
            targets = dataset.outputs
            if prior_mean is not None:
                targets = targets - np.array([self._prior(z) for z in dataset.inputs])
            for a in range(self.n_d):
                ky = kernel_matrix(self.length_scales[a], self.sf2[a], self.support, self.support)
                ky[np.diag_indices(m)] += noise[a]
                try:
                    chol, _ = robust_cholesky(ky)
                except NumericalError as exc:
                    raise NumericalError(f"output dimension {a}: {exc}") from None
                self.chol[a] = chol
                self.alpha[a] = cho_solve((chol, True), targets[:, a])
                self.wmat[a] = cho_solve((chol, True), np.eye(m))
        for arr in (self.chol, self.alpha, self.wmat, self.length_scales, self.sf2):
            arr.setflags(write=False)

    def posterior(self, z, want_jacobian=False):
        return super().posterior(z, want_jacobian)

    def with_dataset(self, dataset):
        return GpModel(self.kernels, self.noise_variances, dataset, self.prior_mean,
                       self.prior_mean_jacobian)

    def log_params(self):
        """Hyperparameters as ``(n_d, n_z + 2)`` array of logs: lengths, sf2, noise."""
        return np.column_stack([np.log(self.length_scales), np.log(self.sf2),
                                np.log(self.noise_variances)])


def build_model(kernels, noise_variances, prior_mean, dataset):
    return GpModel(kernels, noise_variances, dataset, prior_mean)


def posterior(model, z, want_jacobian=False):
    return model.posterior(z, want_jacobian)


def update_dataset(model, new_input, new_output):
    if model.dataset.capacity is None:
        raise ValueError("update_dataset requires a dataset with a capacity")
    return model.with_dataset(model.dataset.append(new_input, new_output))


def model_from_log_params(theta, dataset, prior_mean=None):
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    n_z = dataset.n_z
    kernels = [SeKernel(np.exp(t[:n_z]), math.exp(t[n_z])) for t in theta]
    return GpModel(kernels, np.exp(theta[:, n_z + 1]), dataset, prior_mean)


def _output_lml(theta, z, y):
    """Log marginal likelihood of one output and its gradient in log-parameters."""
    n_z = z.shape[1]
    ls = np.exp(theta[:n_z])
    sf2 = math.exp(theta[n_z])
    sn2 = math.exp(theta[n_z + 1])
    m = z.shape[0]
    kf = kernel_matrix(ls, sf2, z, z)
    ky = kf + sn2 * np.eye(m)
    chol = np.linalg.cholesky(ky)
    alpha = cho_solve((chol, True), y)
    value = (-0.5 * y @ alpha - np.sum(np.log(np.diag(chol)))
             - 0.5 * m * math.log(2 * math.pi))
    inner = np.outer(alpha, alpha) - cho_solve((chol, True), np.eye(m))
    grad = np.empty(n_z + 2)
    for i in range(n_z):
        d2 = (z[:, i][:, None] - z[:, i][None, :]) ** 2
        grad[i] = 0.5 * np.sum(inner * kf * d2 / (2.0 * ls[i]))
    grad[n_z] = 0.5 * np.sum(inner * kf)
    grad[n_z + 1] = 0.5 * sn2 * np.trace(inner)
    return value, grad


def log_marginal_likelihood(model, theta=None):
    """Sum over outputs of the data log-density, with gradient in log-parameters.

    ``theta`` overrides the model hyperparameters (shape ``(n_d, n_z + 2)``).
    Returns ``(value, gradient)`` with the gradient shaped like ``theta``.
    """
    ds = model.dataset
    if ds.size < 1:
        raise ValueError("log marginal likelihood needs at least one data point")
    theta = model.log_params() if theta is None else np.atleast_2d(theta)
    targets = ds.outputs
    if model.prior_mean is not None:
        targets = targets - np.array([model._prior(z) for z in ds.inputs])
    total = 0.0
    grad = np.zeros_like(theta, dtype=float)
    for a in range(ds.n_d):
        try:
            v, g = _output_lml(theta[a], ds.inputs, targets[:, a])
        except np.linalg.LinAlgError:
            raise NumericalError(f"output dimension {a}: covariance not positive definite") from None
        total += v
        grad[a] = g
    return total, grad


class OptimizationError(RuntimeError):
    pass


def _ascend(theta0, z, y, max_iter, tol, bounds):
    """Local maximisation of one output's likelihood with L-BFGS-B in log-space.

    Returns ``(theta, value)``; raises LinAlgError if the start point itself is
    not positive definite.
    """
    theta0 = np.clip(theta0, *bounds)
    _output_lml(theta0, z, y)  # fail early on a bad start

    def objective(theta):
        try:
            v, g = _output_lml(theta, z, y)
        except np.linalg.LinAlgError:
            return 1e10, np.zeros_like(theta)
        return -v, -g

    res = minimize(objective, theta0, jac=True, method="L-BFGS-B",
                   bounds=[bounds] * theta0.size,
                   options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-6})
    value, _ = _output_lml(res.x, z, y)
    return res.x, value


def fit_hyperparameters(dataset, init, restarts=5, seed=0, max_iter=400, tol=1e-9,
                        prior_mean=None, log_bounds=(-18.0, 8.0)):
    """Maximum-likelihood hyperparameters; best of ``restarts`` local ascents.

    ``init`` is an ``(n_d, n_z + 2)`` array of log-hyperparameters (log length
    scales, log signal variance, log noise variance) or a GpModel. The first
    restart starts exactly at ``init``; later ones perturb it log-uniformly.
    """
    if dataset.size < 2:
        raise ValueError("hyperparameter fitting needs at least two data points")
    if isinstance(init, GpModel):
        init = init.log_params()
    init = np.atleast_2d(np.asarray(init, dtype=float))
    rng = make_rng(seed)
    targets = dataset.outputs
    if prior_mean is not None:
        targets = targets - np.array([np.asarray(prior_mean(z)) for z in dataset.inputs])
    best = np.empty_like(init)
    failures = []
    for a in range(dataset.n_d):
        best_val = -np.inf
        for r in range(max(1, restarts)):
            start = init[a] if r == 0 else init[a] + rng.uniform(-1.5, 1.5, init.shape[1])
            try:
                theta, value = _ascend(start, dataset.inputs, targets[:, a], max_iter, tol,
                                       log_bounds)
            except np.linalg.LinAlgError as exc:
                failures.append((a, r, str(exc)))
                continue
            if value > best_val:
                best_val, best[a] = value, theta
        if not np.isfinite(best_val):
            raise OptimizationError(f"all restarts failed for output {a}: {failures}")
        log.debug("output %d: best log-likelihood %.4f", a, best_val)
    return model_from_log_params(best, dataset, prior_mean)
