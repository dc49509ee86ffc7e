import os
import time

import pytest
from hypothesis import HealthCheck, settings

from gpmpc.config import load_config
from gpmpc.scenarios import auv, race

settings.register_profile("pkg", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "pkg"))

AUV_SEEDS = range(100)
RACE_SEEDS = range(10)
RACE_LAPS = 10
RACE_TRAIN_SEED = 1000


def _record(log, n, name, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    log.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="session")
def auv_sweep():
    cfg = load_config(scenario="auv")
    t0 = time.perf_counter()
    runs = {c: [auv.run_auv(cfg, c, s) for s in AUV_SEEDS] for c in ("gp", "linear")}
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="session")
def race_gp():
    cfg = load_config(scenario="race")
    track = race.build_track(cfg)
    t0 = time.perf_counter()
    gp = race.train_gp(cfg, RACE_TRAIN_SEED, track)
    return cfg, track, gp, time.perf_counter() - t0


@pytest.fixture(scope="session")
def race_sweep(race_gp):
    cfg, track, gp, train_time = race_gp
    t0 = time.perf_counter()
    runs = {
        "nominal": [race.run_race(cfg, "nominal", RACE_LAPS, s, None, track)[1]
                    for s in RACE_SEEDS],
        "gp": [race.run_race(cfg, "gp", RACE_LAPS, s, gp, track)[1] for s in RACE_SEEDS],
    }
    return runs, train_time + time.perf_counter() - t0


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
