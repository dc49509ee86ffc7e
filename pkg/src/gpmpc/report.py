"""Run outputs: trace CSV, metrics JSON, gnuplot scripts and PNG figures."""

import csv
import json
import math
import os

import numpy as np


def write_trace(path, columns, rows):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if math.isfinite(v) and float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def read_trace(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        columns = next(r)
        rows = [[float(x) for x in line] for line in r]
    return columns, np.array(rows).reshape(len(rows), len(columns))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path, data):
    with open(path, "w") as fh:
        json.dump(_jsonable(data), fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- plot definitions ------------------------------------------------------------
# each figure: (name, title, xlabel, ylabel, [(x, y, label, style)], bands, aspect)
# a band is (x, center, halfwidth, label)

AUV_FIGURES = [
    ("pitch", "Pitch tracking", "time [s]", "pitch [rad]",
     [("t", "theta", "pitch", "lines"), ("t", "theta_ref", "reference", "lines"),
      ("t", "theta_min", "lower bound", "lines")],
     [("t", "pred_theta_mean", "pred_theta_std", "1-step prediction 2-sigma")], False),
    ("rudder", "Rudder input", "time [s]", "rudder [rad]",
     [("t", "u", "rudder", "steps")], [], False),
    ("residual_q", "Pitch-rate residual and GP band", "time [s]", "residual [rad/s]",
     [("t", "resid_q", "measured residual", "points"), ("t", "gp_mean_q", "GP mean", "lines")],
     [("t", "gp_mean_q", "gp_band_q", "GP 2-sigma")], False),
]

RACE_FIGURES = [
    ("raceline", "Driven line", "X [m]", "Y [m]",
     [("X", "Y", "position", "points")], [], True),
    ("yaw_rate", "Yaw-rate residual and GP band", "time [s]", "residual [rad/s]",
     [("t", "resid_omega", "measured residual", "points"),
      ("t", "gp_mean_omega", "GP mean", "lines")],
     [("t", "gp_mean_omega", "gp_band_omega", "GP 2-sigma")], False),
    ("lateral", "Lateral deviation", "time [s]", "deviation [m]",
     [("t", "lateral", "lateral deviation", "lines"),
      ("t", "tube_radius_1", "tightened radius (step 1)", "lines")], [], False),
    ("speed", "Longitudinal speed", "time [s]", "vx [m/s]",
     [("t", "vx", "vx", "lines")], [], False),
]


def _band_scale(column):
    # *_std columns hold one standard deviation, band columns are already 2-sigma
    return 2 if column.endswith("std") else 1


def figures_for(scenario):
    return AUV_FIGURES if scenario == "auv" else RACE_FIGURES


def write_gnuplot(plot_dir, trace_name, columns, scenario, centerline=None):
    """One ``.gp`` script per figure; each reads ``../<trace_name>`` and writes a PNG."""
    os.makedirs(plot_dir, exist_ok=True)
    col = {c: i + 1 for i, c in enumerate(columns)}
    paths = []
    for name, title, xl, yl, series, bands, equal in figures_for(scenario):
        lines = [
            "set datafile separator ','",
            "set key autotitle columnhead",
            "set terminal pngcairo size 900,500",
            f"set output '{name}_gnuplot.png'",
            f"set title '{title}'",
            f"set xlabel '{xl}'",
            f"set ylabel '{yl}'",
        ]
        if equal:
            lines.append("set size ratio -1")
        parts = []
        for x, c, hw, label in bands:
            k = _band_scale(hw)
            parts.append(f"'../{trace_name}' using {col[x]}:(${col[c]}-{k}*${col[hw]}):"
                         f"(${col[c]}+{k}*${col[hw]}) with filledcurves "
                         f"fs transparent solid 0.3 title '{label}'")
        for x, y, label, style in series:
            parts.append(f"'../{trace_name}' using {col[x]}:{col[y]} with {style} "
                         f"title '{label}'")
        if equal and centerline is not None:
            parts.append("'centerline.dat' using 1:2 with lines title 'centerline'")
            parts.append("'centerline.dat' using 3:4 with lines title 'boundary'")
            parts.append("'centerline.dat' using 5:6 with lines notitle")
        lines.append("plot " + ", \\\n     ".join(parts))
        path = os.path.join(plot_dir, f"{name}.gp")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        paths.append(path)
    if centerline is not None:
        with open(os.path.join(plot_dir, "centerline.dat"), "w") as fh:
            for row in centerline:
                fh.write(" ".join(f"{v:.6f}" for v in row) + "\n")
    return paths


def track_outline(track, n=600):
    th = np.linspace(0.0, track.length, n + 1)
    c = track.point(th)
    t = track.tangent(th)
    nrm = np.column_stack([-t[:, 1], t[:, 0]])
    hw = track.half_width
    return np.column_stack([c, c + hw * nrm, c - hw * nrm])


def render_png(plot_dir, columns, rows, scenario, centerline=None):
    """Render the same figures with matplotlib (Agg backend)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(plot_dir, exist_ok=True)
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    col = {c: i for i, c in enumerate(columns)}
    paths = []
    for name, title, xl, yl, series, bands, equal in figures_for(scenario):
        fig, ax = plt.subplots(figsize=(9, 5))
        for x, c, hw, label in bands:
            k = _band_scale(hw)
            xv, cv, hv = rows[:, col[x]], rows[:, col[c]], rows[:, col[hw]]
            ax.fill_between(xv, cv - k * hv, cv + k * hv, alpha=0.3, label=label)
        for x, y, label, style in series:
            xv, yv = rows[:, col[x]], rows[:, col[y]]
            if style == "points":
                ax.plot(xv, yv, ".", ms=2, label=label)
            elif style == "steps":
                ax.step(xv, yv, where="post", label=label)
            else:
                ax.plot(xv, yv, label=label)
        if equal:
            if centerline is not None:
                ax.plot(centerline[:, 0], centerline[:, 1], "k--", lw=0.8, label="centerline")
                ax.plot(centerline[:, 2], centerline[:, 3], "k", lw=0.8)
                ax.plot(centerline[:, 4], centerline[:, 5], "k", lw=0.8)
            ax.set_aspect("equal")
        ax.set_title(title)
        ax.set_xlabel(xl)
        ax.set_ylabel(yl)
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        path = os.path.join(plot_dir, f"{name}.png")
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths
