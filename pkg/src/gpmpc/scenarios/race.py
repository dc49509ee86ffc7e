"""Autonomous racing with model predictive contouring control.

The controller maximises progress along the track centerline while penalising
contouring and lag errors and input rates. It predicts with a nominal bicycle
model whose tire and drivetrain parameters are off by 15-30 %; the GP-based
controller adds a sparse GP of the velocity-state residuals, propagates the
position uncertainty with a linearisation and keeps the mean inside a tube
around the centerline whose radius shrinks with the predicted uncertainty.
The ground truth is the same bicycle model with the true parameters plus
additive process noise on the velocity states.
"""

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..constraints import tube_radius
from ..gp import GpDataset, GpModel, SeKernel, fit_hyperparameters
from ..mpc import CostTerms, MpcProblem, RowBlock, input_box, receding_step
from ..prob import make_rng
from ..propagation import NominalModel
from .common import RunMetrics, collect_training_data, deadline_fraction
from .track import Track
from .vehicle import (AUG_NU, AUG_NX, Vehicle, augmented_jacobian, augmented_step,
                      param_vector, rk4)

log = logging.getLogger(__name__)

GP_INPUT_MAP = (3, 4, 5, 10, 11)     # vx, vy, omega, p, delta in [x; u]
PHYS_GP_INPUT_MAP = (3, 4, 5, 6, 7)  # same quantities for the 6-state model


def velocity_bd(n_x):
    bd = np.zeros((n_x, 3))
    bd[3:6] = np.eye(3)
    return bd


def build_track(cfg):
    return Track(cfg["track"]["waypoints"], cfg["track"]["half_width"])


def build_vehicles(cfg):
    """``(true_params, nominal_params)`` parameter vectors."""
    plant = cfg["plant"]
    return param_vector(plant), param_vector(plant, cfg["nominal"]["scale"])


def build_nominal(cfg):
    """Augmented 10-state nominal model and the plain 6-state one (for data)."""
    _, prm = build_vehicles(cfg)
    ts = float(cfg["plant"]["ts"])
    sub = int(cfg["plant"]["substeps"])
    aug = NominalModel(
        AUG_NX, AUG_NU,
        lambda x, u: augmented_step(np.asarray(x, float), np.asarray(u, float), prm, ts, sub),
        velocity_bd(AUG_NX), GP_INPUT_MAP,
        jacobian=lambda x, u: augmented_jacobian(np.asarray(x, float), np.asarray(u, float),
                                                 prm, ts, sub))
    veh = Vehicle(prm, ts, sub)
    phys = NominalModel(6, 2, veh.step, velocity_bd(6), PHYS_GP_INPUT_MAP,
                        jacobian=veh.jacobian)
    return aug, phys


# --- cost and tube -------------------------------------------------------------


@dataclass(frozen=True)
class ContouringCost:
    """Contouring/lag errors, progress reward and input-rate penalties.

    With ``C`` the centerline point at the predicted progress ``theta`` and
    ``t``/``n`` its unit tangent and left normal, the contouring error is
    ``n.(p - C)`` and the lag error ``t.(C - p)``. Their theta derivatives use
    the curvature ``kappa``: ``de_c = -kappa e_l`` and ``de_l = kappa e_c + 1``
    (sign of ``e_l`` folded in). Progress enters linearly as ``-q_progress * v_theta``.
    """

    track: Track
    q_contour: float
    q_lag: float
    q_progress: float
    r_rate: np.ndarray
    r_input: np.ndarray
    Q: np.ndarray = field(default_factory=lambda: np.ones((1, 1)))

    def errors(self, xs):
        th = xs[:, 6]
        c = self.track.point(th)
        t = self.track.tangent(th)
        n = np.column_stack([-t[:, 1], t[:, 0]])
        d = xs[:, :2] - c
        e_c = np.einsum("ij,ij->i", n, d)
        e_l = -np.einsum("ij,ij->i", t, d)
        return e_c, e_l, t, n, self.track.curvature(th)

    def evaluate(self, xs, us, problem):
        n1 = xs.shape[0]
        n = us.shape[0]
        nx, nu = xs.shape[1], us.shape[1]
        e_c, e_l, t, nrm, kap = self.errors(xs)
        wc, wl = math.sqrt(self.q_contour), math.sqrt(self.q_lag)
        wr = np.sqrt(np.asarray(self.r_rate, dtype=float))
        wu = np.sqrt(np.asarray(self.r_input, dtype=float))
        m = 2 + 2 * nu
        r = np.zeros((n1, m))
        jx = np.zeros((n1, m, nx))
        ju = np.zeros((n1, m, nu))
        # the initial state is fixed, so its tracking errors carry no weight
        r[1:, 0] = wc * e_c[1:]
        r[1:, 1] = wl * e_l[1:]
        jx[1:, 0, 0:2] = wc * nrm[1:]
        jx[1:, 0, 6] = -wc * kap[1:] * e_l[1:]
        jx[1:, 1, 0:2] = -wl * t[1:]
        jx[1:, 1, 6] = wl * (kap[1:] * e_c[1:] + 1.0)
        rate = us - xs[:n, 7:10]
        r[:n, 2:2 + nu] = wr * rate
        r[:n, 2 + nu:] = wu * us
        idx = np.arange(nu)
        ju[:n, 2 + idx, idx] = wr
        jx[:n, 2 + idx, 7 + idx] = -wr
        ju[:n, 2 + nu + idx, idx] = wu
        gu = np.zeros_like(us)
        gu[:, 2] = -self.q_progress
        return CostTerms(r, jx, ju, np.zeros_like(xs), gu)

    def variance_cost(self, covs, input_covs, means=None):
        sxy = covs[1:, :2, :2]
        if means is None:
            return float(max(self.q_contour, self.q_lag) * np.einsum("nii->", sxy))
        _, _, t, nrm, _ = self.errors(means[1:])
        return float(self.q_contour * np.einsum("ni,nij,nj->", nrm, sxy, nrm)
                     + self.q_lag * np.einsum("ni,nij,nj->", t, sxy, t))


@dataclass
class TubeConstraint:
    """Keep the mean position inside the track tube, tightened by the position spread.

    The tube cross-section at each predicted step is linearised as a slab
    along the normal at ``C(theta_i)`` of the linearisation trajectory. On
    ``tighten_steps`` the half-width becomes ``r - sqrt(chi2 lambda_max)``
    (floored at zero); later steps constrain only the mean.
    """

    track: Track
    half_width: float
    chi2: float | None = None
    tighten_steps: int = 0
    soft: bool = True

    def radii(self, covs, n):
        r = np.full(n + 1, self.half_width)
        if self.chi2 is None:
            return r
        for i in range(1, min(self.tighten_steps, n) + 1):
            if np.any(covs[i, :2, :2]):
                r[i] = max(tube_radius(self.half_width, covs[i, :2, :2], chi2=self.chi2), 0.0)
        return r

    def rows(self, xs, us, covs, input_covs, problem):
        n = problem.horizon
        nx = xs.shape[1]
        steps = np.arange(1, n + 1)
        c = self.track.point(xs[steps, 6])
        t = self.track.tangent(xs[steps, 6])
        nrm = np.column_stack([-t[:, 1], t[:, 0]])
        off = np.einsum("ij,ij->i", nrm, c)
        rad = self.radii(covs, n)[steps]
        a = np.zeros((2 * n, nx))
        a[0::2, :2] = nrm
        a[1::2, :2] = -nrm
        b = np.empty(2 * n)
        b[0::2] = rad + off
        b[1::2] = rad - off
        return [RowBlock("state", np.repeat(steps, 2), a, b, self.soft,
                         group=np.repeat(steps, 2))]


def build_problem(cfg, track, nominal, controller, gp=None):
    m = cfg["mpc"]
    con = cfg["constraints"]
    n = int(m["N"])
    cost = ContouringCost(track, float(m["q_contour"]), float(m["q_lag"]),
                          float(m["q_progress"]), np.asarray(m["r_rate"], float),
                          np.asarray(m["r_input"], float))
    use_gp = controller == "gp"
    tube = TubeConstraint(track, float(cfg["track"]["half_width"]),
                          chi2=float(con["chi2"]) if use_gp else None,
                          tighten_steps=int(con["tighten_steps"]))
    box = input_box([con["duty_min"], -con["steer_max"], 0.0],
                    [con["duty_max"], con["steer_max"], con["progress_max"]])
    u_ref = np.tile([0.3, 0.0, cfg["run"]["v0"]], (n, 1))
    sigma_w = None
    if use_gp:
        sigma_w = np.diag(np.asarray(gp.noise_variances, dtype=float))
    return MpcProblem(
        nominal=nominal, horizon=n, cost=cost, u_ref=u_ref, constraints=[tube, box],
        gp=gp if use_gp else None, gains=None, method=m["method"], sigma_w=sigma_w,
        variance_mode=m["variance_mode"], penalty=m["penalty"],
        mean_mask=np.asarray(cfg["gp"]["mean_mask"], float) if use_gp else None,
        sparse_inducing=int(cfg["gp"]["inducing"]) if use_gp else None,
        max_iter=int(m["max_iter"]), kkt_tol=float(m["kkt_tol"]),
        step_tol=float(m["step_tol"]))


# --- closed loop -----------------------------------------------------------------


RACE_TRACE_COLUMNS = [
    "k", "t", "lap", "X", "Y", "phi", "vx", "vy", "omega", "theta", "lateral",
    "p", "delta", "v_theta", "pred_X", "pred_Y", "tube_radius_1", "one_step_error",
    "resid_vx", "resid_vy", "resid_omega", "gp_mean_omega", "gp_band_omega",
    "tube_violation", "collision", "sqp_iterations", "kkt_residual", "degraded",
]


class RacePlant:
    """True vehicle with additive Gaussian noise on the velocity states."""

    def __init__(self, cfg, rng):
        prm, _ = build_vehicles(cfg)
        self.params = prm
        self.ts = float(cfg["plant"]["ts"])
        self.substeps = int(cfg["plant"]["substeps"])
        self.noise_std = np.asarray(cfg["plant"]["noise_std"], dtype=float)
        self.rng = rng

    def step(self, x, u):
        nxt = rk4(np.asarray(x, float), np.asarray(u[:2], float), self.params, self.ts,
                  self.substeps)
        nxt[3:6] += self.noise_std * self.rng.standard_normal(3)
        return nxt


def _start_state(track, theta, v0):
    c = track.point(theta)
    return np.array([c[0], c[1], track.heading(theta), v0, 0.0, 0.0])


def _unwrap(track, theta_prev, theta_new):
    """Continue the unwrapped progress ``theta_prev`` with a wrapped measurement."""
    d = (theta_new - theta_prev) % track.length
    if d > 0.5 * track.length:
        d -= track.length
    return theta_prev + d


def _lateral(track, xy, theta):
    t = track.tangent(theta)
    d = xy - track.point(theta)
    return float(t[0] * d[1] - t[1] * d[0])


def run_race(cfg, controller="gp", laps=None, seed=0, gp=None, track=None,
             record_data=False):
    """Closed-loop racing; returns ``(trace_rows, RunMetrics)``.

    ``controller`` is ``gp`` (needs a trained ``gp``) or ``nominal``. When the
    car leaves the track by more than ``track.crash_margin`` a collision is
    logged, the current lap is invalidated and the car is put back on the
    centerline at the projected progress with speed ``run.v0``. With
    ``record_data`` the metrics' ``extra['segments']`` holds the
    collision-free ``(states, inputs)`` runs for GP training.
    """
    if controller not in ("gp", "nominal"):
        raise ValueError(f"race controller must be 'gp' or 'nominal', got {controller!r}")
    if controller == "gp" and gp is None:
        raise ValueError("the GP-based controller needs a trained GP")
    laps = int(cfg["run"]["laps"] if laps is None else laps)
    track = build_track(cfg) if track is None else track
    nominal, phys = build_nominal(cfg)
    problem = build_problem(cfg, track, nominal, controller, gp)
    first_problem = problem.replace(max_iter=max(problem.max_iter, 20))
    rng = make_rng(seed)
    plant = RacePlant(cfg, rng)
    ts = plant.ts
    half = float(cfg["track"]["half_width"])
    crash = half + float(cfg["track"]["crash_margin"])
    v0 = float(cfg["run"]["v0"])
    max_steps = int(cfg["run"]["max_steps_per_lap"])
    mask = np.asarray(cfg["gp"]["mean_mask"], float)
    noise_var = np.asarray(gp.noise_variances, float) if gp is not None else np.zeros(3)

    x = _start_state(track, 0.0, v0)
    theta = 0.0
    u_prev = np.zeros(3)
    sol = None
    rows = []
    lap_times = []
    lap_idx = 0
    lap_start = 0
    lap_valid = True
    errors, step_times = [], []
    tube_viol = collisions = degraded = 0
    segments, seg_x, seg_u = [], [x.copy()], []
    k = 0
    while lap_idx < laps:
        xa = np.concatenate([x, [theta], u_prev])
        t0 = time.perf_counter()
        prob = first_problem if sol is None else problem
        u, sol = receding_step(prob, xa, sol)
        elapsed = time.perf_counter() - t0
        diag = sol.diagnostics
        degraded += bool(diag.get("degraded"))
        step_times.append(elapsed)
        x_next = plant.step(x, u)
        pred = np.asarray(sol.state_means[1, :6]) if not diag.get("degraded") else \
            nominal.step(xa, u)[:6]
        err = float(np.linalg.norm(pred - x_next))
        errors.append(err)
        resid = phys.residual_target(x, u[:2], x_next)
        if gp is not None:
            p = sol.gp.posterior(phys.gp_input(x, u[:2])) if sol.gp is not None else \
                gp.posterior(phys.gp_input(x, u[:2]))
            gp_mean = p.mean[2] * mask[2]
            gp_band = 2.0 * math.sqrt(max(p.variance[2, 2], 0.0) + noise_var[2])
        else:
            gp_mean = gp_band = 0.0
        theta_w = track.project(x_next[:2], theta % track.length, window=0.3)
        theta_next = _unwrap(track, theta, theta_w)
        lat = _lateral(track, x_next[:2], theta_w)
        viol = abs(lat) > half
        tube_viol += viol
        collided = abs(lat) > crash or not np.all(np.isfinite(x_next))
        r1 = half
        if problem.gp is not None and sol.covariances is not None:
            tube = problem.constraints[0]
            r1 = float(tube.radii(sol.covariances, problem.horizon)[1])
        rows.append([
            k, k * ts, lap_idx, *x, theta, _lateral(track, x[:2], theta), *u,
            sol.state_means[1, 0], sol.state_means[1, 1], r1, err, *resid, gp_mean, gp_band,
            int(viol), int(collided), diag.get("iterations", 0),
            diag.get("kkt_residual", np.nan), int(bool(diag.get("degraded"))),
        ])
        k += 1
        seg_u.append(np.asarray(u[:2]))
        if collided:
            collisions += 1
            lap_valid = False
            log.info("collision at step %d (lateral %.3f m), resetting", k, lat)
            if seg_u[:-1]:
                segments.append((np.array(seg_x), np.array(seg_u[:-1])))
            x_next = _start_state(track, theta_next, v0)
            u_prev = np.zeros(3)
            sol = None
            seg_x, seg_u = [x_next.copy()], []
        else:
            u_prev = np.asarray(u, dtype=float)
            seg_x.append(x_next.copy())
        x, theta = x_next, theta_next
        # lap bookkeeping: a lap ends each time the progress passes a multiple of L
        if theta >= (lap_idx + 1) * track.length:
            if lap_valid:
                lap_times.append((k - lap_start) * ts)
            lap_idx += 1
            lap_start = k
            lap_valid = True
        elif k - lap_start >= max_steps:
            log.warning("lap %d exceeded %d steps, abandoning it", lap_idx, max_steps)
            lap_idx += 1
            lap_start = k
            lap_valid = False
            theta = (lap_idx) * track.length + (theta % track.length)
    if seg_u:
        segments.append((np.array(seg_x), np.array(seg_u)))
    trace = np.array(rows, dtype=float)
    budget = float(cfg["run"]["deadline"])
    st = np.asarray(step_times)
    extra = {
        "steps": int(k), "collisions": int(collisions), "tube_violations": int(tube_viol),
        "degraded_steps": int(degraded), "laps_run": int(lap_idx),
    }
    if record_data:
        extra["segments"] = segments
    metrics = RunMetrics(
        scenario="race", controller=controller, seed=int(seed), lap_times=lap_times,
        mean_one_step_error=float(np.mean(errors)) if errors else float("nan"),
        mean_solve_time=float(st.mean()) if st.size else float("nan"),
        deadline_fraction=deadline_fraction(st, budget),
        constraint_violation_rate={"tube": tube_viol / max(k, 1),
                                   "collision": collisions / max(k, 1)},
        extra=extra, solve_times=[float(v) for v in st])
    return trace, metrics


# --- GP training ------------------------------------------------------------------


def training_dataset(cfg, seed=0, track=None):
    """Residual dataset from nominal-controller laps, subsampled to ``gp.train_points``."""
    _, phys = build_nominal(cfg)
    _, metrics = run_race(cfg, "nominal", laps=cfg["gp"]["training_laps"], seed=seed,
                          track=track, record_data=True)
    parts = [collect_training_data(xs, us, phys) for xs, us in metrics.extra["segments"]
             if us.shape[0] >= 1]
    z = np.vstack([p.inputs for p in parts])
    y = np.vstack([p.outputs for p in parts])
    ds = GpDataset(z, y)
    n = int(cfg["gp"]["train_points"])
    if ds.size > n:
        ds = ds.subsample(n, seed)
    return ds, metrics


def train_gp(cfg, seed=0, track=None, dataset=None):
    """Collect data with the nominal controller and fit hyperparameters by ML."""
    if dataset is None:
        dataset, _ = training_dataset(cfg, seed, track)
    g = cfg["gp"]
    ls = np.asarray(g["init_length_scales"], float)
    init = np.tile(np.concatenate([np.log(ls), [math.log(g["init_signal_variance"]),
                                                math.log(g["init_noise_variance"])]]),
                   (dataset.n_d, 1))
    return fit_hyperparameters(dataset, init, restarts=int(g["restarts"]), seed=seed)


def gp_from_params(dataset, length_scales, signal_variances, noise_variances):
    kernels = [SeKernel(np.asarray(l, float), float(s))
               for l, s in zip(length_scales, signal_variances)]
    return GpModel(kernels, np.asarray(noise_variances, float), dataset)
