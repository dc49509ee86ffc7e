"""Scenario configuration: defaults, JSON loading, validation and dotted overrides.

A config is a JSON object with the sections ``plant``, ``nominal``, ``gp``,
``mpc``, ``constraints``, ``track`` and ``run`` plus a ``scenario`` tag
(``auv`` or ``race``). Missing keys take the scenario defaults; unknown keys
are rejected.
"""

import copy
import json

SECTIONS = ("plant", "nominal", "gp", "mpc", "constraints", "track", "run")


class ConfigError(ValueError):
    pass


AUV_DEFAULTS = {
    "scenario": "auv",
    "plant": {
        "ts": 0.1,
        "substeps": 10,
        "heave_pitch_coupling": 0.4,
        "rudder_gain": [-0.8, 3.0],
        "drag": [2.0, 5.0, 0.5],
        "noise_std": [0.01, 0.02],
    },
    "nominal": {"model": "linear_zoh"},
    "gp": {
        "length_scales": [[0.35, 0.15], [0.35, 0.15]],
        "signal_variances": [0.04, 0.25],
        "noise_variances": None,
        "capacity": 30,
        "init_points": 30,
        "update_every": 5,
    },
    "mpc": {
        "N": 35,
        "Q": [1.0, 0.0, 10.0, 0.5],
        "R": [20.0],
        "method": "taylor",
        "variance_mode": "in_loop",
        "penalty": None,
        "max_iter": 30,
        "kkt_tol": 1e-6,
        "step_tol": 1e-9,
    },
    "constraints": {
        "pitch_margin_deg": 10.0,
        "rudder_max_deg": 20.0,
        "violation_prob": 0.0228,
        "input_prob": 0.9772,
    },
    "track": {},
    "run": {
        "duration": 27.0,
        "reference": [[0.0, 0.0], [4.5, 30.0], [12.0, 0.0], [19.5, 45.0]],
        "x0": [0.0, 0.0, 0.0, 0.0],
        "deadline": 0.1,
    },
}

RACE_DEFAULTS = {
    "scenario": "race",
    "plant": {
        "ts": 0.02,
        "substeps": 1,
        "m": 0.041, "Iz": 27.8e-6, "lf": 0.029, "lr": 0.033,
        "Cm1": 0.287, "Cm2": 0.0545, "Cr0": 0.0518, "Cr2": 0.00035,
        "Br": 3.3852, "Cr": 1.2691, "Dr": 0.1737,
        "Bf": 2.579, "Cf": 1.2, "Df": 0.192,
        "noise_std": [0.002, 0.002, 0.02],
    },
    "nominal": {
        "scale": {"Cm1": 0.8, "Df": 1.25, "Dr": 1.3, "Br": 0.75},
    },
    "gp": {
        "train_points": 325,
        "restarts": 5,
        "inducing": 10,
        "training_laps": 3,
        "train_seed": 1000,
        "mean_mask": [1.0, 0.0, 1.0],
        "init_length_scales": [1.0, 1.0, 4.0, 0.5, 0.1],
        "init_signal_variance": 0.1,
        "init_noise_variance": 0.001,
    },
    "mpc": {
        "N": 30,
        "method": "taylor",
        "variance_mode": "pre_evaluated",
        "penalty": 1e3,
        "max_iter": 3,
        "kkt_tol": 1e-6,
        "step_tol": 1e-9,
        "q_contour": 2.0,
        "q_lag": 200.0,
        "q_progress": 0.5,
        "r_rate": [0.05, 0.5, 0.01],
        "r_input": [1e-4, 1e-4, 1e-4],
    },
    "constraints": {
        "chi2": 1.0,
        "tighten_steps": 20,
        "duty_min": -0.1,
        "duty_max": 1.0,
        "steer_max": 0.35,
        "progress_max": 4.0,
    },
    "track": {
        "half_width": 0.185,
        "crash_margin": 0.06,
        "waypoints": None,
    },
    "run": {
        "laps": 10,
        "max_steps_per_lap": 1500,
        "deadline": 0.02,
        "v0": 0.5,
    },
}

DEFAULTS = {"auv": AUV_DEFAULTS, "race": RACE_DEFAULTS}

# keys whose value may be null in the defaults; any number or list is accepted
_NULLABLE = {("gp", "noise_variances"), ("mpc", "penalty"), ("track", "waypoints")}


def _type_name(v):
    if isinstance(v, bool):
        return "boolean"
    if isinstance(v, (int, float)):
        return "number"
    if isinstance(v, str):
        return "string"
    if isinstance(v, list):
        return "list"
    if isinstance(v, dict):
        return "object"
    return type(v).__name__


def _merge(default, given, path):
    if not isinstance(given, dict):
        raise ConfigError(f"{'.'.join(path) or 'config'}: expected object, got {_type_name(given)}")
    out = copy.deepcopy(default)
    for key, val in given.items():
        kp = path + (key,)
        if key not in default:
            raise ConfigError(f"unknown key {'.'.join(kp)}")
        dv = default[key]
        if isinstance(dv, dict) and key != "scale":
            out[key] = _merge(dv, val, kp)
            continue
        if key == "scale":
            if not isinstance(val, dict):
                raise ConfigError(f"{'.'.join(kp)}: expected object, got {_type_name(val)}")
            out[key] = dict(val)
            continue
        if dv is None and kp in _NULLABLE:
            if val is not None and _type_name(val) not in ("number", "list"):
                raise ConfigError(f"{'.'.join(kp)}: expected number, list or null")
            out[key] = val
            continue
        if val is None and kp in _NULLABLE:
            out[key] = None
            continue
        if _type_name(val) != _type_name(dv):
            raise ConfigError(
                f"{'.'.join(kp)}: expected {_type_name(dv)}, got {_type_name(val)}")
        out[key] = val
    return out


def _positive(cfg, *path):
    v = cfg
    for p in path:
        v = v[p]
    flat = v if isinstance(v, list) else [v]
    while flat and isinstance(flat[0], list):
        flat = [x for row in flat for x in row]
    if any(x <= 0 for x in flat):
        raise ConfigError(f"{'.'.join(path)}: values must be positive, got {v}")


def validate(cfg):
    scen = cfg["scenario"]
    _positive(cfg, "plant", "ts")
    _positive(cfg, "mpc", "N")
    if cfg["mpc"]["method"] not in ("taylor", "mean_equivalent", "moment_matching",
                                    "ta", "me", "mm"):
        raise ConfigError(f"mpc.method: unknown propagation method {cfg['mpc']['method']!r}")
    if cfg["mpc"]["variance_mode"] not in ("in_loop", "pre_evaluated"):
        raise ConfigError("mpc.variance_mode: expected 'in_loop' or 'pre_evaluated'")
    if scen == "auv":
        _positive(cfg, "gp", "length_scales")
        _positive(cfg, "gp", "signal_variances")
        if cfg["gp"]["noise_variances"] is not None:
            _positive(cfg, "gp", "noise_variances")
        if len(cfg["mpc"]["Q"]) != 4 or len(cfg["mpc"]["R"]) != 1:
            raise ConfigError("mpc.Q must have 4 entries and mpc.R one entry")
        if any(q < 0 for q in cfg["mpc"]["Q"]):
            raise ConfigError("mpc.Q: entries must be nonnegative")
        _positive(cfg, "mpc", "R")
        if not 0 < cfg["constraints"]["violation_prob"] < 1:
            raise ConfigError("constraints.violation_prob: must lie in (0, 1)")
        ip = cfg["constraints"]["input_prob"]
        if not 0 < ip < 1:
            raise ConfigError("constraints.input_prob: must lie in (0, 1)")
    else:
        _positive(cfg, "gp", "init_length_scales")
        _positive(cfg, "track", "half_width")
        if cfg["constraints"]["tighten_steps"] > cfg["mpc"]["N"]:
            raise ConfigError("constraints.tighten_steps: must not exceed mpc.N")
    if any(s < 0 for s in _as_list(cfg["plant"]["noise_std"])):
        raise ConfigError("plant.noise_std: values must be nonnegative")
    return cfg


def _as_list(v):
    return v if isinstance(v, list) else [v]


def parse_override(text):
    """``section.key=value`` with a JSON value (bare words are taken as strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def _nest(path, value):
    d = value
    for p in reversed(path):
        d = {p: d}
    return d


def _deep_update(base, upd):
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def load_config(path=None, overrides=(), scenario=None):
    """Validated effective config with defaults filled in.

    ``path`` may be ``None`` to start from the defaults of ``scenario``.
    """
    given = {}
    if path is not None:
        try:
            with open(path) as fh:
                given = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(given, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for text in overrides:
        keys, value = parse_override(text)
        _deep_update(given, _nest(keys, value))
    scen = given.get("scenario", scenario or "auv")
    if scenario is not None and scen != scenario:
        raise ConfigError(f"scenario: config is for {scen!r}, command needs {scenario!r}")
    if scen not in DEFAULTS:
        raise ConfigError(f"scenario: expected 'auv' or 'race', got {scen!r}")
    cfg = _merge(DEFAULTS[scen], given, ())
    if isinstance(cfg["mpc"]["N"], float):
        if not cfg["mpc"]["N"].is_integer():
            raise ConfigError("mpc.N: expected integer")
        cfg["mpc"]["N"] = int(cfg["mpc"]["N"])
    return validate(cfg)


def dump_config(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
