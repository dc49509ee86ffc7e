"""Dense convex QP subsolver used inside the SQP iterations.

Solves ``min 0.5 x'Hx + g'x  s.t.  A x <= b`` with the Goldfarb-Idnani dual
active-set method from ``quadprog``. The Hessian must be positive definite;
callers regularise it.
"""

from dataclasses import dataclass

import numpy as np
import quadprog


class QpInfeasible(RuntimeError):
    pass


@dataclass
class QpResult:
    x: np.ndarray
    duals: np.ndarray
    status: str
    iterations: int


def solve_qp(hess, grad, a_ineq=None, b_ineq=None):
    hess = np.ascontiguousarray(0.5 * (hess + hess.T), dtype=float)
    n = hess.shape[0]
    if a_ineq is None or len(a_ineq) == 0:
        x = -np.linalg.solve(hess, grad)
        return QpResult(x, np.zeros(0), "optimal", 0)
    c = np.ascontiguousarray(-np.asarray(a_ineq, dtype=float).T)
    b = -np.asarray(b_ineq, dtype=float)
    try:
        x, _, _, iters, duals, _ = quadprog.solve_qp(hess, -np.asarray(grad, dtype=float), c, b, 0)
    except ValueError as exc:
        raise QpInfeasible(str(exc)) from None
    return QpResult(np.asarray(x).reshape(n), np.asarray(duals), "optimal", int(iters[0]))
