import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpmpc.gp import (GpDataset, GpModel, SeKernel, fit_hyperparameters, kernel_eval,
                      kernel_matrix, log_marginal_likelihood, model_from_log_params,
                      update_dataset)
from gpmpc.prob import make_rng
from gpmpc.validate import dense_posterior, gradient_errors, random_gp


def test_kernel_value_uses_length_scale_as_squared_distance_divisor():
    k = SeKernel(np.array([1.0, 1.0]), 1.0)
    assert kernel_eval(k, np.array([1.0, 0.0]), np.zeros(2)) == pytest.approx(math.exp(-0.5),
                                                                             abs=1e-15)
    k2 = SeKernel(np.array([4.0]), 2.0)
    assert kernel_eval(k2, np.array([2.0]), np.zeros(1)) == pytest.approx(2.0 * math.exp(-0.5))


@given(st.integers(1, 4), st.integers(2, 12), st.integers(0, 10 ** 6))
def test_kernel_matrix_symmetric_psd(n_z, m, seed):
    rng = make_rng(seed)
    z = rng.uniform(-2, 2, (m, n_z))
    k = kernel_matrix(rng.uniform(0.1, 2.0, n_z), 1.3, z, z)
    assert np.allclose(k, k.T)
    assert np.linalg.eigvalsh(k)[0] >= -1e-9
    assert np.allclose(np.diag(k), 1.3)


def test_single_point_alpha():
    gp = GpModel([SeKernel(np.array([0.7]), 1.3)], [0.2],
                 GpDataset(np.array([[0.4]]), np.array([[0.9]])))
    assert gp.alpha[0, 0] == pytest.approx(0.9 / 1.5, abs=1e-14)


@given(st.integers(0, 10 ** 6))
def test_posterior_matches_dense_oracle_and_bounds(seed):
    rng = make_rng(seed)
    gp = random_gp(rng, int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 25)))
    z = rng.uniform(-3, 3, gp.n_z)
    pred = gp.posterior(z)
    m, v = dense_posterior(gp, z)
    assert np.allclose(pred.mean, m, atol=1e-8)
    var = np.diag(pred.variance)
    assert np.allclose(var, v, atol=1e-8)
    assert np.all(var >= -1e-12) and np.all(var <= gp.sf2 + 1e-12)


def test_empty_dataset_gives_prior():
    gp = GpModel([SeKernel(np.ones(2), 0.5)], [0.1], GpDataset.empty(2, 1))
    p = gp.posterior(np.array([0.3, -1.0]))
    assert p.mean[0] == 0.0 and p.variance[0, 0] == pytest.approx(0.5)


def test_gradients_match_finite_differences():
    wj, wl = gradient_errors(count=4)
    assert wj <= 1e-4 and wl <= 1e-4


def test_invalid_hyperparameters_rejected():
    ds = GpDataset(np.zeros((2, 1)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        GpModel([SeKernel(np.ones(1), 1.0)], [0.0], ds)
    with pytest.raises(ValueError):
        GpModel([SeKernel(np.ones(2), 1.0)], [0.1], ds)
    with pytest.raises(ValueError):
        SeKernel(np.array([-1.0]), 1.0)


def test_dataset_validation():
    with pytest.raises(ValueError):
        GpDataset(np.zeros((3, 1)), np.zeros((2, 1)))
    ds = GpDataset(np.zeros((2, 2)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        ds.append(np.zeros(3), np.zeros(1))


def test_fifo_evicts_oldest():
    ds = GpDataset.empty(1, 1, capacity=3)
    for i in range(5):
        ds = ds.append([float(i)], [float(i)])
    assert ds.size == 3
    assert ds.inputs[:, 0].tolist() == [2.0, 3.0, 4.0]


def test_update_dataset_keeps_hyperparameters():
    gp = GpModel([SeKernel(np.ones(1), 1.0)], [0.1], GpDataset.empty(1, 1, capacity=2))
    gp2 = update_dataset(gp, [0.5], [1.0])
    assert gp2.dataset.size == 1 and gp.dataset.size == 0
    assert np.array_equal(gp2.log_params(), gp.log_params())
    assert gp2.posterior(np.array([0.5])).mean[0] > 0.5


def test_log_params_round_trip():
    rng = make_rng(3)
    gp = random_gp(rng, 2, 2, 10)
    gp2 = model_from_log_params(gp.log_params(), gp.dataset)
    assert np.allclose(gp2.log_params(), gp.log_params())
    z = np.array([0.1, 0.2])
    assert np.allclose(gp2.posterior(z).mean, gp.posterior(z).mean)


def test_lml_matches_scipy_gaussian():
    from scipy.stats import multivariate_normal
    rng = make_rng(8)
    gp = random_gp(rng, 2, 1, 15)
    k = kernel_matrix(gp.length_scales[0], gp.sf2[0], gp.dataset.inputs, gp.dataset.inputs)
    k += gp.noise_variances[0] * np.eye(15)
    ref = multivariate_normal(np.zeros(15), k).logpdf(gp.dataset.outputs[:, 0])
    assert log_marginal_likelihood(gp)[0] == pytest.approx(ref, rel=1e-10)


def test_fit_increases_likelihood():
    rng = make_rng(4)
    z = rng.uniform(-3, 3, (40, 1))
    y = np.sin(2 * z) + 0.05 * rng.standard_normal((40, 1))
    ds = GpDataset(z, y)
    init = np.log([[3.0, 0.2, 0.5]])
    fit = fit_hyperparameters(ds, init, restarts=2, seed=0)
    start = model_from_log_params(init, ds)
    assert log_marginal_likelihood(fit)[0] > log_marginal_likelihood(start)[0]
    assert fit.noise_variances[0] < 0.05


def test_fit_is_deterministic():
    rng = make_rng(4)
    z = rng.uniform(-3, 3, (30, 2))
    ds = GpDataset(z, np.cos(z[:, :1]) * z[:, 1:])
    init = np.log([[1.0, 1.0, 1.0, 0.1]])
    a = fit_hyperparameters(ds, init, restarts=3, seed=2).log_params()
    b = fit_hyperparameters(ds, init, restarts=3, seed=2).log_params()
    assert np.array_equal(a, b)
