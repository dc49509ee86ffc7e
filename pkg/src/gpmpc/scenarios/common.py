"""Metrics and data collection shared by the closed-loop scenarios."""

from dataclasses import asdict, dataclass, field

import numpy as np

from ..gp import GpDataset


@dataclass
class RunMetrics:
    scenario: str
    controller: str
    seed: int
    lap_times: list
    mean_one_step_error: float
    mean_solve_time: float
    deadline_fraction: float
    constraint_violation_rate: dict
    extra: dict = field(default_factory=dict)
    # wall-clock time of every controller call; kept out of the trace so that
    # traces are reproducible bit for bit
    solve_times: list = field(default_factory=list, repr=False)

    @property
    def mean_lap(self):
        return float(np.mean(self.lap_times)) if self.lap_times else float("nan")

    @property
    def min_lap(self):
        return float(np.min(self.lap_times)) if self.lap_times else float("nan")

    def to_dict(self):
        """Everything except wall-clock timing, so equal seeds give equal dicts."""
        d = asdict(self)
        for key in ("solve_times", "mean_solve_time", "deadline_fraction"):
            d.pop(key)
        d["mean_lap"] = self.mean_lap
        d["min_lap"] = self.min_lap
        return d

    def timing_dict(self):
        """Wall-clock solve-time summary; varies between otherwise identical runs."""
        st = np.asarray(self.solve_times, dtype=float) * 1e3
        return {
            "mean_solve_time_ms": float(st.mean()) if st.size else float("nan"),
            "max_solve_time_ms": float(st.max()) if st.size else float("nan"),
            "solve_time_percentiles_ms": {q: float(np.percentile(st, q))
                                          for q in (5, 25, 50, 75, 95, 99)} if st.size else {},
            "deadline_fraction": self.deadline_fraction,
        }


def deadline_fraction(solve_times, budget):
    t = np.asarray(solve_times, dtype=float)
    return float(np.mean(t < budget)) if t.size else float("nan")


def collect_training_data(states, inputs, nominal, subsample=None, seed=0):
    """Residual dataset from consecutive rows: ``y_j = B_d^+ (x_{j+1} - f(x_j, u_j))``.

    ``states`` has one more row than ``inputs`` (or the same count, in which
    case the last input is dropped). Rows with a non-finite target are skipped.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if np.linalg.matrix_rank(nominal.bd) < nominal.bd.shape[1]:
        raise ValueError("B_d must have full column rank")
    n = min(states.shape[0] - 1, inputs.shape[0])
    zs, ys = [], []
    for j in range(n):
        y = nominal.residual_target(states[j], inputs[j], states[j + 1])
        if np.all(np.isfinite(y)):
            zs.append(nominal.gp_input(states[j], inputs[j]))
            ys.append(y)
    ds = GpDataset(np.array(zs).reshape(len(zs), -1), np.array(ys).reshape(len(ys), -1))
    if subsample is not None:
        ds = ds.subsample(int(subsample), seed)
    return ds
