import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from gpmpc.prob import (GaussianBelief, NumericalError, chi2_2_quantile, make_rng, mvn_sample,
                        robust_cholesky, symmetrize_and_jitter, std_normal_quantile)


@given(st.floats(1e-8, 1 - 1e-8))
def test_quantile_matches_scipy(p):
    assert abs(std_normal_quantile(p) - stats.norm.ppf(p)) <= 1e-9


def test_quantile_known_values():
    assert abs(std_normal_quantile(0.9772498681) - 2.0) <= 1e-6
    assert std_normal_quantile(0.5) == 0.0


@given(st.floats(1e-6, 1 - 1e-9))
def test_chi2_quantile_matches_scipy(p):
    assert chi2_2_quantile(p) == pytest.approx(stats.chi2(2).ppf(p), rel=1e-10, abs=1e-12)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 2.0])
def test_quantile_rejects_bad_levels(p):
    with pytest.raises(ValueError):
        std_normal_quantile(p)
    with pytest.raises(ValueError):
        chi2_2_quantile(p)


def test_symmetrize_removes_skew_part():
    rng = make_rng(1)
    a = rng.normal(size=(5, 5))
    psd = a @ a.T
    skew = rng.normal(size=(5, 5))
    out = symmetrize_and_jitter(psd + 1e-12 * (skew - skew.T))
    assert np.allclose(out, psd, atol=1e-11)
    assert np.array_equal(out, out.T)


def test_symmetrize_rejects_indefinite():
    with pytest.raises(NumericalError):
        symmetrize_and_jitter(np.diag([1.0, -1e-3]))


def test_robust_cholesky_adds_jitter_only_when_needed():
    l, jit = robust_cholesky(np.eye(3))
    assert jit == 0.0 and np.allclose(l, np.eye(3))
    v = np.ones((3, 1))
    l, jit = robust_cholesky(v @ v.T)
    assert jit > 0
    assert np.allclose(l @ l.T, v @ v.T, atol=1e-6)


def test_belief_shape_checked():
    with pytest.raises(ValueError):
        GaussianBelief([0.0, 0.0], np.eye(3))


def test_rng_streams_are_reproducible():
    a = make_rng(5).standard_normal(10)
    b = make_rng(5).standard_normal(10)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, make_rng(6).standard_normal(10))


def test_sampler_moments():
    cov = np.array([[1.0, 0.6], [0.6, 2.0]])
    s = mvn_sample(GaussianBelief([1.0, -2.0], cov), 200000, seed=3)
    assert s.shape == (200000, 2)
    assert np.allclose(s.mean(axis=0), [1.0, -2.0], atol=5 * math.sqrt(2.0 / 200000))
    assert np.allclose(np.cov(s.T), cov, atol=0.03)


def test_sampler_handles_singular_and_zero_covariance():
    s = mvn_sample(GaussianBelief([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]]), 1000, seed=1)
    assert np.allclose(s[:, 0], s[:, 1], atol=1e-6)
    z = mvn_sample(GaussianBelief([3.0], [[0.0]]), 5, seed=1)
    assert np.all(z == 3.0)


def test_sampler_is_deterministic():
    b = GaussianBelief([0.0], [[1.0]])
    assert np.array_equal(mvn_sample(b, 100, 9), mvn_sample(b, 100, 9))
