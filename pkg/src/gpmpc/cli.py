"""Command-line front end.

    gpmpc run-auv   [--config F] [--seed S] [--controller gp|linear] [--out D] [--set k=v]
    gpmpc run-race  [--config F] [--seed S] [--controller gp|nominal] [--laps N] [--gp D]
    gpmpc fit-gp    [--config F] [--scenario auv|race] [--trace CSV] [--seed S] [--out D]
    gpmpc validate  [--suite NAME] [--full] [--out D]
    gpmpc compare   [--config F] [--scenario auv|race] [--seeds 0..9] [--laps N] [--out D]

Exit codes: 0 success, 1 usage or configuration error, 2 solver or numerical
failure (a ``diagnostics.json`` is written to the output directory) or a
failed validation check. The log level comes from ``GPMPC_LOG_LEVEL``.
"""

import argparse
import json
import logging
import os
import sys
import time
import traceback

import numpy as np

from . import report
from .config import ConfigError, dump_config, load_config
from .gp import GpDataset, OptimizationError, fit_hyperparameters, log_marginal_likelihood
from .mpc import SolverError
from .prob import NumericalError

log = logging.getLogger("gpmpc")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_seeds(text):
    """``0..9`` (inclusive), ``1,4,7`` or a mix such as ``0..3,10``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ".." in part:
                lo, hi = part.split("..", 1)
                lo, hi = int(lo), int(hi)
                if hi < lo:
                    raise ValueError
                seeds.extend(range(lo, hi + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise UsageError(f"bad seed list {text!r}; use e.g. 0..9 or 1,2,5") from None
    if not seeds:
        raise UsageError("empty seed list")
    return seeds


def _build_parser():
    p = _Parser(prog="gpmpc", description="GP-based stochastic MPC scenarios and checks")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, default_out):
        sp.add_argument("--config", help="scenario config (JSON); defaults when omitted")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=default_out, help="output directory")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable (e.g. mpc.N=10)")

    a = sub.add_parser("run-auv", help="closed-loop AUV depth-control run")
    common(a, "out/auv")
    a.add_argument("--controller", choices=("gp", "linear", "nominal"), default="gp")
    a.add_argument("--no-png", action="store_true", help="skip matplotlib rendering")

    r = sub.add_parser("run-race", help="closed-loop racing run")
    common(r, "out/race")
    r.add_argument("--controller", choices=("gp", "nominal"), default="gp")
    r.add_argument("--laps", type=int)
    r.add_argument("--gp", help="directory written by fit-gp; trains a GP when omitted")
    r.add_argument("--no-png", action="store_true", help="skip matplotlib rendering")

    f = sub.add_parser("fit-gp", help="fit GP hyperparameters from a recorded trace")
    common(f, "out/gp")
    f.add_argument("--scenario", choices=("auv", "race"))
    f.add_argument("--trace", help="trace.csv of an earlier run; records fresh data when "
                                   "omitted")

    v = sub.add_parser("validate", help="run the oracle and property checks")
    v.add_argument("--suite", default="all")
    v.add_argument("--full", action="store_true", help="acceptance-size sample counts")
    v.add_argument("--out", default="out/validate")

    c = sub.add_parser("compare", help="GP-based vs baseline controller over several seeds")
    common(c, "out/compare")
    c.add_argument("--scenario", choices=("auv", "race"))
    c.add_argument("--seeds", default="0..9")
    c.add_argument("--laps", type=int)
    c.add_argument("--gp", help="directory written by fit-gp (race only)")
    return p


def _config(args, scenario=None):
    scen = scenario or getattr(args, "scenario", None)
    if scen is None and args.config is None:
        scen = "race"
    return load_config(args.config, args.set, scenario=scen)


def _write_run(out, scenario, columns, trace, metrics, cfg, centerline=None, png=True):
    os.makedirs(out, exist_ok=True)
    dump_config(cfg, os.path.join(out, "config.json"))
    report.write_trace(os.path.join(out, "trace.csv"), columns, trace)
    report.write_json(os.path.join(out, "metrics.json"), metrics.to_dict())
    report.write_json(os.path.join(out, "timing.json"), metrics.timing_dict())
    times = np.asarray(metrics.solve_times, float) * 1e3
    report.write_trace(os.path.join(out, "timing.csv"), ["k", "solve_time_ms"],
                       np.column_stack([np.arange(times.size), times]))
    plot_dir = os.path.join(out, "plots")
    report.write_gnuplot(plot_dir, "trace.csv", columns, scenario, centerline)
    if png:
        report.render_png(plot_dir, columns, trace, scenario, centerline)


# --- GP persistence ----------------------------------------------------------------


def save_gp(directory, gp, scenario, extra=None):
    os.makedirs(directory, exist_ok=True)
    ds = gp.dataset
    cols = [f"z{i}" for i in range(ds.n_z)] + [f"y{i}" for i in range(ds.n_d)]
    report.write_trace(os.path.join(directory, "gp_dataset.csv"), cols,
                       np.hstack([ds.inputs, ds.outputs]))
    report.write_json(os.path.join(directory, "gp_hyperparameters.json"), {
        "scenario": scenario,
        "length_scales": gp.length_scales,
        "signal_variances": gp.sf2,
        "noise_variances": gp.noise_variances,
        "log_marginal_likelihood": log_marginal_likelihood(gp)[0],
        **(extra or {}),
    })


def load_gp(directory):
    from .scenarios.race import gp_from_params
    with open(os.path.join(directory, "gp_hyperparameters.json")) as fh:
        hp = json.load(fh)
    cols, data = report.read_trace(os.path.join(directory, "gp_dataset.csv"))
    n_z = sum(c.startswith("z") for c in cols)
    ds = GpDataset(data[:, :n_z], data[:, n_z:])
    return gp_from_params(ds, hp["length_scales"], hp["signal_variances"],
                          hp["noise_variances"])


def _race_gp(args, cfg, track):
    from .scenarios.race import train_gp
    if args.gp:
        return load_gp(args.gp)
    seed = int(cfg["gp"]["train_seed"])
    log.info("training the racing GP on nominal laps (seed %d)", seed)
    return train_gp(cfg, seed, track)


# --- commands --------------------------------------------------------------------


def cmd_run_auv(args):
    from .scenarios.auv import AUV_TRACE_COLUMNS, run_auv
    cfg = _config(args, "auv")
    trace, metrics = run_auv(cfg, args.controller, args.seed)
    _write_run(args.out, "auv", AUV_TRACE_COLUMNS, trace, metrics, cfg, png=not args.no_png)
    ex = metrics.extra
    print(f"auv {metrics.controller} seed {args.seed}: pitch violations "
          f"{ex['violation_steps']}/{ex['steps']}, mean solve "
          f"{metrics.mean_solve_time * 1e3:.1f} ms -> {args.out}")
    return EXIT_OK


def cmd_run_race(args):
    from .scenarios.race import RACE_TRACE_COLUMNS, build_track, run_race
    cfg = _config(args, "race")
    track = build_track(cfg)
    gp = _race_gp(args, cfg, track) if args.controller == "gp" else None
    trace, metrics = run_race(cfg, args.controller, args.laps, args.seed, gp, track)
    _write_run(args.out, "race", RACE_TRACE_COLUMNS, trace, metrics, cfg,
               report.track_outline(track), png=not args.no_png)
    if gp is not None:
        save_gp(os.path.join(args.out, "gp"), gp, "race")
    ex = metrics.extra
    print(f"race {args.controller} seed {args.seed}: {len(metrics.lap_times)} valid laps, "
          f"mean lap {metrics.mean_lap:.3f} s, one-step error "
          f"{metrics.mean_one_step_error:.4f}, tube violations {ex['tube_violations']}, "
          f"collisions {ex['collisions']}, mean solve {metrics.mean_solve_time * 1e3:.1f} ms "
          f"-> {args.out}")
    return EXIT_OK


def _segments_from_trace(columns, data, scenario):
    """Consecutive ``(states, inputs)`` runs; race traces break after each collision."""
    if scenario == "race":
        sx, su = ["X", "Y", "phi", "vx", "vy", "omega"], ["p", "delta"]
        breaks = data[:, columns.index("collision")] > 0
    else:
        sx, su = ["theta", "w", "q", "act"], ["u"]
        breaks = np.zeros(data.shape[0], bool)
    try:
        xi = [columns.index(c) for c in sx]
        ui = [columns.index(c) for c in su]
    except ValueError as exc:
        raise ConfigError(f"trace is not a {scenario} trace: {exc}") from None
    segs, start = [], 0
    for k in range(data.shape[0]):
        if breaks[k] or k == data.shape[0] - 1:
            # a collided row's successor is a reset state, so its input is unusable
            end = k + 1
            if end - start >= 2:
                segs.append((data[start:end, xi], data[start:end - 1, ui]))
            start = k + 1
    return segs


def cmd_fit_gp(args):
    from .scenarios import auv, race
    from .scenarios.common import collect_training_data
    cfg = _config(args)
    scen = cfg["scenario"]
    if scen == "race":
        _, nominal = race.build_nominal(cfg)
    else:
        nominal = auv.build_nominal(cfg)[0]
    if args.trace:
        columns, data = report.read_trace(args.trace)
        parts = [collect_training_data(xs, us, nominal)
                 for xs, us in _segments_from_trace(columns, data, scen)]
        if not parts:
            raise ConfigError(f"{args.trace}: no usable transitions")
        ds = GpDataset(np.vstack([p.inputs for p in parts]), np.vstack([p.outputs for p in parts]))
        source = os.path.abspath(args.trace)
    elif scen == "race":
        ds, _ = race.training_dataset(cfg, args.seed)
        source = f"nominal laps, seed {args.seed}"
    else:
        trace, _ = auv.run_auv(cfg, "linear", args.seed)
        ds = collect_training_data(trace[:, 2:6], trace[:, 6:7], nominal)
        source = f"linear-MPC run, seed {args.seed}"
    if scen == "race":
        n = int(cfg["gp"]["train_points"])
        if ds.size > n:
            ds = ds.subsample(n, args.seed)
        gp = race.train_gp(cfg, args.seed, dataset=ds)
    else:
        g = cfg["gp"]
        noise = g["noise_variances"] or (np.asarray(cfg["plant"]["noise_std"]) ** 2).tolist()
        init = np.column_stack([np.log(np.asarray(g["length_scales"], float)),
                                np.log(g["signal_variances"]), np.log(noise)])
        gp = fit_hyperparameters(ds, init, restarts=5, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    dump_config(cfg, os.path.join(args.out, "config.json"))
    save_gp(args.out, gp, scen, {"source": source, "points": ds.size})
    print(f"fitted {scen} GP on {ds.size} points, log marginal likelihood "
          f"{log_marginal_likelihood(gp)[0]:.2f} -> {args.out}")
    return EXIT_OK


def cmd_validate(args):
    from .validate import run_suite
    try:
        results = run_suite(args.suite, args.full)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    width = max(len(f"{r.suite}.{r.name}") for r in results)
    for r in results:
        mark = "PASS" if r.passed else "FAIL"
        print(f"{mark}  {f'{r.suite}.{r.name}':<{width}}  {r.seconds:7.2f}s  {r.detail}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    os.makedirs(args.out, exist_ok=True)
    report.write_json(os.path.join(args.out, "validate.json"),
                      [r.__dict__ for r in results])
    return EXIT_FAILURE if failed else EXIT_OK


def _summary_row(controller, metrics):
    lap = [t for m in metrics for t in m.lap_times]
    st = np.concatenate([np.asarray(m.solve_times, float) for m in metrics])
    row = {
        "controller": controller,
        "runs": len(metrics),
        "mean_solve_time_ms": float(st.mean() * 1e3),
        "deadline_fraction": float(np.mean([m.deadline_fraction for m in metrics])),
    }
    if metrics[0].scenario == "race":
        row.update({
            "mean_lap_time": float(np.mean(lap)) if lap else float("nan"),
            "min_lap_time": float(np.min(lap)) if lap else float("nan"),
            "valid_laps": len(lap),
            "mean_one_step_error": float(np.mean([m.mean_one_step_error for m in metrics])),
            "tube_violations": int(sum(m.extra["tube_violations"] for m in metrics)),
            "collisions": int(sum(m.extra["collisions"] for m in metrics)),
        })
    else:
        row.update({
            "pitch_violation_rate": float(np.mean(
                [m.constraint_violation_rate["pitch"] for m in metrics])),
            "seeds_violating_on_reference_change": int(sum(
                any(m.extra["reference_change_violations"]) for m in metrics)),
            "gp_band_coverage": float(np.mean([m.extra["gp_band_coverage"] for m in metrics])),
        })
    return row


def cmd_compare(args):
    from .scenarios import auv, race
    seeds = parse_seeds(args.seeds)
    cfg = _config(args)
    scen = cfg["scenario"]
    os.makedirs(args.out, exist_ok=True)
    dump_config(cfg, os.path.join(args.out, "config.json"))
    results = {}
    if scen == "race":
        track = race.build_track(cfg)
        gp = _race_gp(args, cfg, track)
        save_gp(os.path.join(args.out, "gp"), gp, "race")
        pairs = [("nominal", None), ("gp", gp)]
        columns = race.RACE_TRACE_COLUMNS
    else:
        pairs = [("linear", None), ("gp", None)]
        columns = auv.AUV_TRACE_COLUMNS
    for controller, model in pairs:
        results[controller] = []
        for seed in seeds:
            t0 = time.perf_counter()
            if scen == "race":
                trace, m = race.run_race(cfg, controller, args.laps, seed, model, track)
            else:
                trace, m = auv.run_auv(cfg, controller, seed)
            log.info("%s seed %d done in %.1f s", controller, seed, time.perf_counter() - t0)
            report.write_trace(os.path.join(args.out, f"trace_{controller}_seed{seed}.csv"),
                               columns, trace)
            results[controller].append(m)
    rows = [_summary_row(c, ms) for c, ms in results.items()]
    timing_keys = ("mean_solve_time_ms", "deadline_fraction")
    report.write_json(os.path.join(args.out, "metrics.json"), {
        "scenario": scen,
        "seeds": seeds,
        "rows": [{k: v for k, v in r.items() if k not in timing_keys} for r in rows],
        "runs": {c: [m.to_dict() for m in ms] for c, ms in results.items()},
    })
    # wall-clock data is kept apart so metrics.json is reproducible
    report.write_json(os.path.join(args.out, "timing.json"), {
        c: {**{k: r[k] for k in timing_keys}, "runs": [m.timing_dict() for m in ms]}
        for (c, ms), r in zip(results.items(), rows)
    })
    keys = [k for k in rows[0] if k != "controller"]
    print("controller  " + "  ".join(keys))
    for r in rows:
        print(f"{r['controller']:<10}  " + "  ".join(
            f"{r[k]:.4g}" if isinstance(r[k], float) else str(r[k]) for k in keys))
    return EXIT_OK


COMMANDS = {
    "run-auv": cmd_run_auv,
    "run-race": cmd_run_race,
    "fit-gp": cmd_fit_gp,
    "validate": cmd_validate,
    "compare": cmd_compare,
}


def _write_diagnostics(out, argv, exc):
    try:
        os.makedirs(out, exist_ok=True)
        path = os.path.join(out, "diagnostics.json")
        report.write_json(path, {
            "argv": list(argv),
            "error": type(exc).__name__,
            "message": str(exc),
            "traceback": traceback.format_exception(type(exc), exc, exc.__traceback__),
        })
        return path
    except OSError:
        return None


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=os.environ.get("GPMPC_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"gpmpc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, NumericalError, OptimizationError, np.linalg.LinAlgError) as exc:
        path = _write_diagnostics(args.out, argv, exc)
        print(f"gpmpc: {type(exc).__name__}: {exc} (diagnostics: {path})", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
