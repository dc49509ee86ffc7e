import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpmpc.constraints import (Ball, HalfSpace, Polytope, PrsKind, PrsSpec, Slab, TrackTube,
                               empirical_violation, face_level, marginal_box_radii,
                               pontryagin_diff_box, tighten_halfspace, tighten_marginal_box,
                               tighten_polytope_faces, tighten_slab, tighten_track_tube,
                               tube_radius)
from gpmpc.prob import make_rng
from gpmpc.validate import pontryagin_brute_force, random_polytope

BOX = Polytope(np.vstack([np.eye(2), -np.eye(2)]), np.ones(4))


def test_halfspace_shift_is_quantile_times_spread():
    t = tighten_halfspace(HalfSpace([1.0, 0.0], 3.0), np.eye(2), 0.9772498681)
    assert t.b == pytest.approx(1.0, abs=1e-6)


def test_slab_uses_two_sided_quantile():
    t = tighten_slab([1.0, 0.0], 3.0, np.eye(2), 0.9544997361)
    assert t.b == pytest.approx(1.0, abs=1e-6)
    assert tighten_slab([1.0, 0.0], 0.5, np.eye(2), 0.95).infeasible


def test_ball_radius():
    sigma = np.diag([0.04, 0.01])
    r = tube_radius(1.0, sigma, chi2=4.0)
    assert r == pytest.approx(1.0 - 2.0 * 0.2)
    assert tube_radius(1.0, sigma, p=0.95) == pytest.approx(
        1.0 - math.sqrt(-2 * math.log(0.05) * 0.04))
    tube = TrackTube(lambda th: np.array([th, 0.0]), 0.1)
    b = tighten_track_tube(tube, 2.0, np.eye(2), p=0.9)
    assert b.infeasible and np.allclose(b.center, [2.0, 0.0])


@given(st.integers(0, 10 ** 6), st.floats(0.6, 0.99), st.floats(0.001, 0.009))
def test_tightening_monotone_in_level(seed, p, dp):
    rng = make_rng(seed)
    a = rng.normal(size=(2, 2))
    sigma = a @ a.T + 0.01 * np.eye(2)
    for f in (tighten_polytope_faces, tighten_marginal_box):
        lo, hi = f(BOX, sigma, p).b, f(BOX, sigma, p + dp).b
        assert np.all(hi <= lo + 1e-12)
    assert tighten_halfspace(HalfSpace([1.0, 1.0], 1.0), sigma, p + dp).b <= \
        tighten_halfspace(HalfSpace([1.0, 1.0], 1.0), sigma, p).b


@given(st.integers(0, 10 ** 6))
def test_pontryagin_matches_vertex_enumeration(seed):
    rng = make_rng(seed)
    n = int(rng.integers(1, 7))
    poly = random_polytope(rng, n)
    r = rng.uniform(0.0, 0.3, n)
    assert np.array_equal(pontryagin_diff_box(poly, r).b, pontryagin_brute_force(poly, r))


def test_pontryagin_rejects_negative_radius():
    with pytest.raises(ValueError):
        pontryagin_diff_box(BOX, [-0.1, 0.1])


def test_marginal_box_is_pontryagin_of_radii():
    sigma = np.diag([0.04, 0.09])
    r = marginal_box_radii(sigma, 0.9)
    assert np.allclose(tighten_marginal_box(BOX, sigma, 0.9).b, pontryagin_diff_box(BOX, r).b)


def test_face_level_union_bound():
    assert face_level(0.9, 4) == pytest.approx(0.975)
    # the literal form under-tightens: its level falls below p
    assert face_level(0.9, 4, literal_quantile=True) < 0.9


@pytest.mark.parametrize("p", [0.9, 0.95])
def test_boundary_mean_violation_below_budget(p):
    sigma = np.diag([0.02, 0.03])
    t = tighten_polytope_faces(BOX, sigma, p)
    v = empirical_violation(BOX, t.b[:2], sigma, 200000, seed=4)
    assert v <= (1 - p) + 3 * math.sqrt(p * (1 - p) / 200000)


def test_contains():
    assert HalfSpace([1.0, 0.0], 1.0).contains(np.array([[0.5, 9.0], [1.5, 0.0]])).tolist() == \
        [True, False]
    assert Slab(np.array([0.0, 1.0]), 1.0).contains(np.array([[5.0, -0.9]]))[0]
    assert BOX.contains(np.array([[0.0, 0.0], [1.1, 0.0]])).tolist() == [True, False]
    assert Ball(np.zeros(2), 1.0).contains(np.array([[0.6, 0.6], [0.8, 0.8]])).tolist() == \
        [True, False]


def test_validation_errors():
    with pytest.raises(ValueError):
        PrsSpec(PrsKind.BALL, 1.0)
    with pytest.raises(ValueError):
        HalfSpace([0.0, 0.0], 1.0)
    with pytest.raises(ValueError):
        Polytope(np.eye(2), np.ones(3))
    with pytest.raises(ValueError):
        TrackTube(lambda t: t, 0.0)
