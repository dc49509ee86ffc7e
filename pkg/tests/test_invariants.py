"""Closed-loop and learning invariants beyond the headline acceptance numbers."""

import math

import numpy as np
import pytest

from gpmpc.config import load_config
from gpmpc.gp import GpDataset, fit_hyperparameters
from gpmpc.mpc import lqr_gains
from gpmpc.prob import make_rng
from gpmpc.scenarios import auv
from gpmpc.scenarios.common import collect_training_data


def _true_residual(z):
    # smooth, known unmodelled dynamics on the (w, q) velocity channels
    w, q = z
    return np.array([0.02 * math.sin(3 * w) - 0.01 * q, 0.015 * math.tanh(2 * q) * math.cos(w)])


def test_training_data_recovers_known_residual():
    cfg = load_config(scenario="auv")
    nominal, a, b = auv.build_nominal(cfg)
    # the open-loop plant is unstable; excite it under LQR feedback
    gain, _ = lqr_gains(a, b, np.eye(4), np.eye(1))
    rng = make_rng(7)
    xs, us = [np.zeros(4)], []
    for j in range(160):
        x = xs[-1]
        u = -gain @ x + np.array([0.3 * math.sin(j / 6.0) + 0.1 * rng.standard_normal()])
        g = _true_residual(nominal.gp_input(x, u))
        xs.append(nominal.step(x, u) + nominal.bd @ (g + 1e-3 * rng.standard_normal(2)))
        us.append(u)
    ds = collect_training_data(np.array(xs), np.array(us), nominal)
    assert ds.size == 160

    held = np.arange(ds.size) % 4 == 3
    train = GpDataset(ds.inputs[~held], ds.outputs[~held])
    gp = fit_hyperparameters(train, np.log([[0.5, 0.5, 1e-3, 1e-6]] * 2), restarts=3, seed=0)
    hits = []
    for z in ds.inputs[held]:
        post = gp.posterior(z)
        hits.append(np.abs(post.mean - _true_residual(z)) <= 2 * np.sqrt(np.diag(post.variance)))
    frac = float(np.mean(hits))
    assert frac >= 0.95, frac


@pytest.mark.slow
def test_auv_without_disturbance_never_violates_and_band_shrinks_near_data():
    cfg = load_config(scenario="auv", overrides=[
        "plant.drag=[0,0,0]", "plant.noise_std=[0,0]", "gp.noise_variances=[1e-6,1e-6]"])
    trace, m = auv.run_auv(cfg, "gp", seed=0)
    col = auv.AUV_TRACE_COLUMNS.index
    assert m.extra["violation_steps"] == 0
    # the plant integrates with RK4, the nominal uses the matrix exponential:
    # the residual is truncation error proportional to the state and input size
    scale = 1.0 + np.max(np.abs(trace[:, [col("w"), col("q"), col("act"), col("u")]]), axis=1)
    assert np.all(np.abs(trace[:, [col("resid_w"), col("resid_q")]]) <= 1e-8 * scale[:, None])

    # replay the FIFO dataset (initial points at the origin, then every
    # update_every-th GP input). More data never raises the posterior variance,
    # so the band is bounded by the one conditioned on the nearest stored point.
    gpc = cfg["gp"]
    noise = 1e-6
    sf2 = np.asarray(gpc["signal_variances"], dtype=float)
    ls = np.sqrt(np.asarray(gpc["length_scales"][0], dtype=float))
    z = trace[:, [col("w"), col("q")]]
    band = trace[:, [col("gp_band_w"), col("gp_band_q")]]
    stored = [np.zeros(2)] * int(gpc["init_points"])
    near = 0
    for k in range(len(trace)):
        data = np.array(stored[-int(gpc["capacity"]):])
        d2 = np.min(np.sum(((data - z[k]) / ls) ** 2, axis=1))
        one_point = sf2 - sf2 ** 2 * math.exp(-d2) / (sf2 + noise)
        assert np.all(band[k] <= 2 * np.sqrt(one_point + noise) * (1 + 1e-9)), k
        if d2 < 0.25:
            near += 1
            assert np.all(band[k] < 0.5 * 2 * np.sqrt(sf2 + noise)), k
        if (k + 1) % int(gpc["update_every"]) == 0:
            stored.append(z[k])
    assert near >= 50


@pytest.mark.slow
def test_race_tube_violation_frequency_within_chance_level(race_sweep):
    runs, _ = race_sweep
    cfg = load_config(scenario="race")
    # probability mass of a 2-D Gaussian inside the chi2 ellipse
    p_x = 1.0 - math.exp(-0.5 * cfg["constraints"]["chi2"])
    viol = sum(m.extra["tube_violations"] for m in runs["gp"])
    steps = sum(m.extra["steps"] for m in runs["gp"])
    bound = (1 - p_x) + 3 * math.sqrt(p_x * (1 - p_x) / steps)
    assert viol / steps <= bound


@pytest.mark.slow
def test_race_gp_improves_one_step_error_on_every_seed(race_sweep):
    runs, _ = race_sweep
    for nom, gp in zip(runs["nominal"], runs["gp"]):
        assert nom.seed == gp.seed
        assert gp.mean_one_step_error < nom.mean_one_step_error


@pytest.mark.slow
def test_race_metrics_consistent(race_sweep):
    runs, _ = race_sweep
    for m in runs["nominal"] + runs["gp"]:
        assert len(m.solve_times) == m.extra["steps"]
        assert 0.0 <= m.constraint_violation_rate["tube"] <= 1.0
        assert m.extra["collisions"] <= m.extra["tube_violations"]
        if m.lap_times:
            assert m.min_lap <= m.mean_lap
