import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpmpc.gp import GpDataset, GpModel, SeKernel
from gpmpc.prob import make_rng
from gpmpc.sparse import (SparseGpModel, cold_start_inducing, inducing_indices,
                          select_inducing_from_trajectory)
from gpmpc.validate import fitc_exactness, random_gp


def test_inducing_equal_training_reproduces_full_gp():
    assert fitc_exactness(count=8) <= 1e-8


@given(st.integers(0, 10 ** 6), st.integers(1, 8))
def test_fitc_variance_within_prior(seed, n_ind):
    rng = make_rng(seed)
    gp = random_gp(rng, 2, 1, 20)
    sp = SparseGpModel(gp, rng.uniform(-2, 2, (n_ind, 2)))
    for _ in range(3):
        var = sp.posterior(rng.uniform(-3, 3, 2)).variance[0, 0]
        assert -1e-10 <= var <= gp.sf2[0] + 1e-10


def test_single_inducing_point_never_exceeds_prior():
    gp = GpModel([SeKernel(np.array([0.5]), 1.0)], [0.01],
                 GpDataset(np.linspace(-1, 1, 9)[:, None], np.sin(np.linspace(-1, 1, 9))[:, None]))
    sp = SparseGpModel(gp, np.array([[0.0]]))
    for z in np.linspace(-3, 3, 13):
        assert sp.posterior(np.array([z])).variance[0, 0] <= 1.0 + 1e-12


def test_far_from_inducing_points_reverts_to_prior():
    gp = GpModel([SeKernel(np.array([0.1]), 2.0)], [0.01],
                 GpDataset(np.zeros((5, 1)), np.ones((5, 1))))
    sp = SparseGpModel(gp, np.array([[0.0]]))
    p = sp.posterior(np.array([50.0]))
    assert abs(p.mean[0]) < 1e-12 and p.variance[0, 0] == pytest.approx(2.0)


def test_inducing_indices_spacing():
    assert inducing_indices(30, 10).tolist() == [0, 3, 6, 10, 13, 16, 19, 23, 26, 29]
    assert inducing_indices(7, 1).tolist() == [3]


@given(st.integers(1, 200), st.integers(1, 50))
def test_inducing_indices_properties(length, count):
    idx = inducing_indices(length, count)
    assert idx.size <= min(count, length)
    assert np.all(np.diff(idx) > 0)
    assert idx[0] >= 0 and idx[-1] <= length - 1
    if count >= 2:
        assert idx[0] == 0 and idx[-1] == length - 1
    if count <= length:
        assert idx.size == count


def test_select_and_cold_start():
    traj = np.arange(20.0)[:, None] * np.ones((1, 3))
    sel = select_inducing_from_trajectory(traj, 4)
    assert sel.shape == (4, 3) and sel[0, 0] == 0 and sel[-1, 0] == 19
    ds = GpDataset(np.arange(10.0)[:, None], np.zeros((10, 1)))
    a = cold_start_inducing(ds, 3, seed=1)
    assert a.shape == (3, 1) and np.array_equal(a, cold_start_inducing(ds, 3, seed=1))
    with pytest.raises(ValueError):
        cold_start_inducing(GpDataset.empty(1, 1), 3)
    with pytest.raises(ValueError):
        select_inducing_from_trajectory(np.zeros((0, 2)), 2)


def test_bad_inducing_shape_rejected():
    gp = random_gp(make_rng(0), 2, 1, 5)
    with pytest.raises(ValueError):
        SparseGpModel(gp, np.zeros((3, 1)))


def test_jacobian_matches_finite_differences():
    rng = make_rng(12)
    gp = random_gp(rng, 3, 2, 25)
    sp = SparseGpModel(gp, gp.dataset.inputs[::3])
    z = rng.uniform(-1, 1, 3)
    jac = sp.posterior(z, want_jacobian=True).mean_jacobian
    h = 1e-6
    fd = np.column_stack([(sp.posterior(z + h * e).mean - sp.posterior(z - h * e).mean) / (2 * h)
                          for e in np.eye(3)])
    assert np.allclose(jac, fd, atol=1e-6)
