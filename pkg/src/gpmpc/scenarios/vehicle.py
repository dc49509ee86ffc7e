"""Dynamic bicycle model with simplified Pacejka tires for 1:43 scale race cars.

State ``(X, Y, phi, vx, vy, omega)``, input ``(p, delta)`` (motor duty cycle and
steering angle). Forces follow the usual miniature-racing model::

    alpha_f = delta - atan2(omega lf + vy, vx)
    alpha_r = atan2(omega lr - vy, vx)
    F_fy = Df sin(Cf atan(Bf alpha_f))
    F_ry = Dr sin(Cr atan(Br alpha_r))
    F_rx = (Cm1 - Cm2 vx) p - Cr0 - Cr2 vx^2

Slip angles use ``max(vx, VX_MIN)`` so the model stays finite near standstill.
The integrators are compiled with numba; everything else is plain numpy.
"""

import numpy as np
from numba import njit

PARAM_NAMES = ("m", "Iz", "lf", "lr", "Cm1", "Cm2", "Cr0", "Cr2",
               "Br", "Cr", "Dr", "Bf", "Cf", "Df")
VX_MIN = 0.1


def param_vector(cfg, scale=None):
    scale = scale or {}
    unknown = set(scale) - set(PARAM_NAMES)
    if unknown:
        raise ValueError(f"unknown vehicle parameters in scale: {sorted(unknown)}")
    return np.array([cfg[k] * scale.get(k, 1.0) for k in PARAM_NAMES], dtype=float)


@njit(cache=True)
def vehicle_rhs(x, u, prm):
    m, iz, lf, lr = prm[0], prm[1], prm[2], prm[3]
    cm1, cm2, cr0, cr2 = prm[4], prm[5], prm[6], prm[7]
    br, cr, dr, bf, cf, df = prm[8], prm[9], prm[10], prm[11], prm[12], prm[13]
    phi, vx, vy, om = x[2], x[3], x[4], x[5]
    p, delta = u[0], u[1]
    vxs = max(vx, VX_MIN)
    af = delta - np.arctan2(om * lf + vy, vxs)
    ar = np.arctan2(om * lr - vy, vxs)
    ffy = df * np.sin(cf * np.arctan(bf * af))
    fry = dr * np.sin(cr * np.arctan(br * ar))
    frx = (cm1 - cm2 * vx) * p - cr0 - cr2 * vx * vx
    out = np.empty(6)
    c, s = np.cos(phi), np.sin(phi)
    out[0] = vx * c - vy * s
    out[1] = vx * s + vy * c
    out[2] = om
    out[3] = (frx - ffy * np.sin(delta) + m * vy * om) / m
    out[4] = (fry + ffy * np.cos(delta) - m * vx * om) / m
    out[5] = (ffy * lf * np.cos(delta) - fry * lr) / iz
    return out


@njit(cache=True)
def rk4(x, u, prm, ts, substeps):
    h = ts / substeps
    for _ in range(substeps):
        k1 = vehicle_rhs(x, u, prm)
        k2 = vehicle_rhs(x + 0.5 * h * k1, u, prm)
        k3 = vehicle_rhs(x + 0.5 * h * k2, u, prm)
        k4 = vehicle_rhs(x + h * k3, u, prm)
        x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


@njit(cache=True)
def rk4_jacobian(x, u, prm, ts, substeps):
    """Central-difference Jacobian of one RK4 step w.r.t. ``[x; u]`` (6 x 8)."""
    jac = np.empty((6, 8))
    for i in range(8):
        h = 1e-6 * max(1.0, abs(x[i] if i < 6 else u[i - 6]))
        xp = x.copy()
        xm = x.copy()
        up = u.copy()
        um = u.copy()
        if i < 6:
            xp[i] += h
            xm[i] -= h
        else:
            up[i - 6] += h
            um[i - 6] -= h
        jac[:, i] = (rk4(xp, up, prm, ts, substeps) - rk4(xm, um, prm, ts, substeps)) / (2 * h)
    return jac


class Vehicle:
    """Discrete-time vehicle: RK4 with zero-order-hold input."""

    def __init__(self, params, ts, substeps=1):
        self.params = np.asarray(params, dtype=float)
        self.ts = float(ts)
        self.substeps = int(substeps)

    def step(self, x, u):
        return rk4(np.asarray(x, dtype=float), np.asarray(u, dtype=float), self.params,
                   self.ts, self.substeps)

    def jacobian(self, x, u):
        return rk4_jacobian(np.asarray(x, dtype=float), np.asarray(u, dtype=float),
                            self.params, self.ts, self.substeps)


# --- augmented model used by the contouring MPC -------------------------------
# state (X, Y, phi, vx, vy, omega, theta, p_prev, delta_prev, vtheta_prev),
# input (p, delta, vtheta); theta is the progress along the centerline.

AUG_NX = 10
AUG_NU = 3


@njit(cache=True)
def augmented_step(x, u, prm, ts, substeps):
    out = np.empty(AUG_NX)
    out[:6] = rk4(x[:6].copy(), u[:2].copy(), prm, ts, substeps)
    out[6] = x[6] + ts * u[2]
    out[7:] = u
    return out


@njit(cache=True)
def augmented_jacobian(x, u, prm, ts, substeps):
    jac = np.zeros((AUG_NX, AUG_NX + AUG_NU))
    j6 = rk4_jacobian(x[:6].copy(), u[:2].copy(), prm, ts, substeps)
    jac[:6, :6] = j6[:, :6]
    jac[:6, 10:12] = j6[:, 6:]
    jac[6, 6] = 1.0
    jac[6, 12] = ts
    for i in range(3):
        jac[7 + i, 10 + i] = 1.0
    return jac
