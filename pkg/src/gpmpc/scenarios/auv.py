"""Pitch-reference tracking for an underwater vehicle with online GP learning.

States are pitch angle, heave velocity, pitch rate (all relative to trim) and
the stern-rudder actuator state; the input is the commanded rudder deflection.
The nominal model is the exact zero-order-hold discretisation of the linear
part. The simulated plant adds quadratic hydrodynamic drag on heave velocity
and pitch rate, integrated with RK4 substeps, plus Gaussian process noise on
the velocity states.

Continuous linear part (time in seconds)::

    theta' = q
    w'     = l1 w + c_wq q + b_w a
    q'     = l2 q + b_q a
    a'     = (u - a) / tau

with ``l1 = ln(1.03)/Ts``, ``l2 = ln(1.1)/Ts`` and ``tau = -Ts/ln(0.727)`` so
the discrete spectrum is ``{1.1, 1.03, 1, 0.727}``.
"""

import dataclasses
import logging
import math
import time

import numpy as np
from scipy.linalg import expm

from ..gp import GpDataset, GpModel, SeKernel
from ..mpc import (MpcProblem, QuadraticCost, StateConstraint, input_box, lqr_gains,
                   receding_step)
from ..prob import make_rng
from ..propagation import linear_nominal
from .common import RunMetrics, deadline_fraction

log = logging.getLogger(__name__)

NX, NU = 4, 1
DISCRETE_EIGENVALUES = (1.1, 1.03, 1.0, 0.727)


def continuous_matrices(plant_cfg):
    ts = plant_cfg["ts"]
    l1 = math.log(DISCRETE_EIGENVALUES[1]) / ts
    l2 = math.log(DISCRETE_EIGENVALUES[0]) / ts
    tau = -ts / math.log(DISCRETE_EIGENVALUES[3])
    b_w, b_q = plant_cfg["rudder_gain"]
    ac = np.array([[0.0, 0.0, 1.0, 0.0],
                   [0.0, l1, plant_cfg["heave_pitch_coupling"], b_w],
                   [0.0, 0.0, l2, b_q],
                   [0.0, 0.0, 0.0, -1.0 / tau]])
    bc = np.array([[0.0], [0.0], [0.0], [1.0 / tau]])
    return ac, bc


def discretize(ac, bc, ts):
    n, m = bc.shape
    blk = np.zeros((n + m, n + m))
    blk[:n, :n] = ac
    blk[:n, n:] = bc
    e = expm(blk * ts)
    return e[:n, :n], e[:n, n:]


def disturbance_matrix(ts):
    return np.array([[0.0, ts * ts / 2], [ts, 0.0], [0.0, ts], [0.0, 0.0]])


def drag(w, q, coeffs):
    c1, c2, c3 = coeffs
    return np.array([-c1 * w * abs(w) - c3 * q * abs(q), -c2 * q * abs(q)])


class AuvPlant:
    """Ground-truth simulator: linear part plus quadratic drag, RK4 with ZOH input."""

    def __init__(self, plant_cfg):
        self.cfg = plant_cfg
        self.ac, self.bc = continuous_matrices(plant_cfg)
        self.ts = plant_cfg["ts"]
        self.substeps = int(plant_cfg["substeps"])
        self.coeffs = tuple(plant_cfg["drag"])
        self.noise_std = np.asarray(plant_cfg["noise_std"], dtype=float)
        self.bd = disturbance_matrix(self.ts)
        self.u_max = math.radians(plant_cfg["rudder_max_deg"])

    def _rhs(self, x, u):
        dx = self.ac @ x + self.bc[:, 0] * u
        g = drag(x[1], x[2], self.coeffs)
        dx[1] += g[0]
        dx[2] += g[1]
        return dx

    def step(self, x, u, noise):
        u = float(np.clip(u, -self.u_max, self.u_max))
        h = self.ts / self.substeps
        for _ in range(self.substeps):
            k1 = self._rhs(x, u)
            k2 = self._rhs(x + 0.5 * h * k1, u)
            k3 = self._rhs(x + 0.5 * h * k2, u)
            k4 = self._rhs(x + h * k3, u)
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return x + self.bd @ noise


def reference_schedule(run_cfg, ts):
    """Pitch reference [rad] at every sample up to the end plus a horizon of preview."""
    n_steps = int(round(run_cfg["duration"] / ts))
    times = np.arange(n_steps + 1) * ts
    ref = np.zeros(times.size)
    for t0, deg in run_cfg["reference"]:
        ref[times >= t0 - 1e-9] = math.radians(deg)
    return ref


def _ref_window(ref, k, n):
    idx = np.minimum(np.arange(k, k + n + 1), ref.size - 1)
    return ref[idx]


def build_nominal(cfg):
    plant = cfg["plant"]
    ac, bc = continuous_matrices(plant)
    a, b = discretize(ac, bc, plant["ts"])
    return linear_nominal(a, b, disturbance_matrix(plant["ts"]), [1, 2]), a, b


def initial_gp(cfg):
    gpc = cfg["gp"]
    ls = np.asarray(gpc["length_scales"], dtype=float)
    kernels = [SeKernel(ls[a], gpc["signal_variances"][a]) for a in range(2)]
    noise = gpc["noise_variances"]
    if noise is None:
        noise = (np.asarray(cfg["plant"]["noise_std"]) ** 2).tolist()
    n0 = int(gpc["init_points"])
    data = GpDataset(np.zeros((n0, 2)), np.zeros((n0, 2)), capacity=int(gpc["capacity"]))
    return GpModel(kernels, noise, data)


def build_problem(cfg, controller, gp=None):
    mc, cc = cfg["mpc"], cfg["constraints"]
    nominal, a, b = build_nominal(cfg)
    q = np.diag(mc["Q"])
    r = np.atleast_2d(np.diag(mc["R"]))
    gain, p = lqr_gains(a, b, q, r)
    cost = QuadraticCost(q, r, p)
    u_max = math.radians(cc["rudder_max_deg"])
    n = int(mc["N"])
    use_gp = controller == "gp"
    # theta_i >= ref_i - margin, written as -theta_i <= margin - ref_i
    pitch = StateConstraint(np.array([[-1.0, 0.0, 0.0, 0.0]]), np.zeros((n + 1, 1)),
                            level=1.0 - cc["violation_prob"] if use_gp else None)
    inputs = input_box([-u_max], [u_max], level=cc["input_prob"] if use_gp else None)
    sigma_w = np.diag(np.asarray(cfg["plant"]["noise_std"]) ** 2) if use_gp else None
    return MpcProblem(
        nominal, n, cost, constraints=[pitch, inputs], gp=gp if use_gp else None,
        gains=gain if use_gp else None, method=mc["method"], sigma_w=sigma_w,
        variance_mode=mc["variance_mode"], penalty=mc["penalty"], max_iter=mc["max_iter"],
        kkt_tol=mc["kkt_tol"], step_tol=mc["step_tol"])


def _problem_updates(problem, ref, k, margin):
    n = problem.horizon
    window = _ref_window(ref, k, n)
    x_ref = np.zeros((n + 1, NX))
    x_ref[:, 0] = window
    pitch = dataclasses.replace(problem.constraints[0], b=(margin - window)[:, None])
    return {"x_ref": x_ref, "constraints": [pitch, *problem.constraints[1:]]}


AUV_TRACE_COLUMNS = [
    "k", "t", "theta", "w", "q", "act", "u", "theta_ref", "theta_min",
    "pred_theta_mean", "pred_theta_std", "pred_end_theta_mean", "pred_end_theta_std",
    "resid_w", "resid_q", "gp_mean_w", "gp_mean_q", "gp_band_w", "gp_band_q",
    "violation", "sqp_iterations", "kkt_residual", "degraded",
]


def run_auv(cfg, controller="gp", seed=0):
    """Closed-loop run; returns ``(trace_rows, RunMetrics)``.

    ``controller`` is ``gp`` (GP-based stochastic MPC with online learning) or
    ``linear`` (soft-constrained linear MPC without uncertainty handling).
    """
    if controller == "nominal":
        controller = "linear"
    if controller not in ("gp", "linear"):
        raise ValueError(f"AUV controller must be 'gp' or 'linear', got {controller!r}")
    plant = AuvPlant({**cfg["plant"], "rudder_max_deg": cfg["constraints"]["rudder_max_deg"]})
    ts = plant.ts
    nominal, a, b = build_nominal(cfg)
    gp = initial_gp(cfg) if controller == "gp" else None
    problem = build_problem(cfg, controller, gp)
    ref = reference_schedule(cfg["run"], ts)
    n_steps = ref.size - 1
    margin = math.radians(cfg["constraints"]["pitch_margin_deg"])
    rng = make_rng(seed)
    noise = rng.standard_normal((n_steps, 2)) * plant.noise_std
    x = np.asarray(cfg["run"]["x0"], dtype=float)
    every = int(cfg["gp"]["update_every"])
    noise_var = gp.noise_variances if gp is not None else np.zeros(2)
    rows = []
    solve_times = []
    violations = 0
    degraded = 0
    sol = None
    for k in range(n_steps):
        updates = _problem_updates(problem, ref, k, margin)
        if gp is not None:
            updates["gp"] = gp
        t0 = time.perf_counter()
        u, sol = receding_step(problem, x, sol, **updates)
        solve_times.append(time.perf_counter() - t0)
        diag = sol.diagnostics
        degraded += bool(diag.get("degraded"))
        x_next = plant.step(x, u[0], noise[k])
        resid = nominal.residual_target(x, u, x_next)
        z = nominal.gp_input(x, u)
        if gp is not None:
            pred = gp.posterior(z)
            gp_mean = pred.mean
            gp_band = 2.0 * np.sqrt(np.diag(pred.variance) + noise_var)
            if (k + 1) % every == 0:
                gp = gp.with_dataset(gp.dataset.append(z, resid))
        else:
            gp_mean = np.zeros(2)
            gp_band = np.zeros(2)
        theta_min = ref[k] - margin
        viol = bool(x[0] < theta_min - 1e-9)
        violations += viol
        covs = sol.covariances
        rows.append([
            k, k * ts, *x, float(u[0]), ref[k], theta_min,
            sol.state_means[1, 0], math.sqrt(max(covs[1][0, 0], 0.0)),
            sol.state_means[-1, 0], math.sqrt(max(covs[-1][0, 0], 0.0)),
            *resid, *gp_mean, *gp_band,
            int(viol), diag.get("iterations", 0), diag.get("kkt_residual", np.nan),
            int(bool(diag.get("degraded"))),
        ])
        x = x_next
    trace = np.array(rows, dtype=float)
    metrics = auv_metrics(trace, cfg, controller, seed, degraded, solve_times)
    return trace, metrics


def reference_change_windows(trace):
    """Index ranges from each upward reference step until the next reference change."""
    ref = trace[:, AUV_TRACE_COLUMNS.index("theta_ref")]
    changes = np.flatnonzero(np.diff(ref)) + 1
    bounds = list(changes) + [ref.size]
    return [(s, e) for s, e in zip(bounds[:-1], bounds[1:]) if ref[s] > ref[s - 1]]


def auv_metrics(trace, cfg, controller, seed, degraded, solve_times):
    col = AUV_TRACE_COLUMNS.index
    viol = trace[:, col("violation")].astype(bool)
    windows = reference_change_windows(trace)
    change_viol = [bool(viol[s:e].any()) for s, e in windows]
    err = trace[:, [col("resid_w"), col("resid_q")]] - trace[:, [col("gp_mean_w"),
                                                               col("gp_mean_q")]]
    band = trace[:, [col("gp_band_w"), col("gp_band_q")]]
    coverage = float(np.mean(np.abs(err) <= band)) if controller == "gp" else float("nan")
    tracking = trace[:, col("theta")] - trace[:, col("theta_ref")]
    return RunMetrics(
        scenario="auv", controller=controller, seed=seed,
        lap_times=[],
        mean_one_step_error=float("nan"),
        mean_solve_time=float(np.mean(solve_times)),
        deadline_fraction=deadline_fraction(solve_times, cfg["run"]["deadline"]),
        constraint_violation_rate={"pitch": float(np.mean(viol))},
        extra={
            "violation_steps": int(viol.sum()),
            "steps": int(viol.size),
            "reference_change_violations": change_viol,
            "gp_band_coverage": coverage,
            "rms_tracking_error_deg": math.degrees(float(np.sqrt(np.mean(tracking ** 2)))),
            "degraded_steps": int(degraded),
        },
        solve_times=list(solve_times),
    )
