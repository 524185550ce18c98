import dataclasses
import time

import numpy as np
import pytest
from hypothesis import settings

from freeflyer import cli
from freeflyer import dynamics as dyn
from freeflyer import quaternion as quat

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

ACCEPTANCE_LINES = []   # verdicts from the acceptance suite, echoed in the summary

ASTROBEE = dyn.InertialParams(9.58, np.diag([0.153, 0.143, 0.162]))


@pytest.fixture
def params():
    return ASTROBEE


@pytest.fixture
def limits():
    return dyn.WrenchLimits.from_rpm(2000)


def random_state(rng, pos_scale=1.0, vel_scale=0.05, omega_scale=0.05):
    q = quat.normalize(rng.normal(size=4))
    return dyn.make_state(rng.normal(size=3) * pos_scale, q, rng.normal(size=3) * vel_scale,
                          rng.normal(size=3) * omega_scale)


def fd_jacobians(x_bar, u_bar, p, dt, h=1e-6):
    """Central differences of ``step_rk4`` in error-state coordinates."""
    x_next = dyn.step_rk4(x_bar, u_bar, p, dt)
    A = np.zeros((dyn.ERROR_DIM, dyn.ERROR_DIM))
    B = np.zeros((dyn.ERROR_DIM, dyn.INPUT_DIM))
    for j in range(dyn.ERROR_DIM):
        e = np.zeros(dyn.ERROR_DIM)
        e[j] = h
        xp = dyn.step_rk4(dyn.retract(x_bar, e), u_bar, p, dt)
        xm = dyn.step_rk4(dyn.retract(x_bar, -e), u_bar, p, dt)
        A[:, j] = (dyn.error_state(xp, x_next) - dyn.error_state(xm, x_next)) / (2 * h)
    for j in range(dyn.INPUT_DIM):
        e = np.zeros(dyn.INPUT_DIM)
        e[j] = h
        xp = dyn.step_rk4(x_bar, u_bar + e, p, dt)
        xm = dyn.step_rk4(x_bar, u_bar - e, p, dt)
        B[:, j] = (dyn.error_state(xp, x_next) - dyn.error_state(xm, x_next)) / (2 * h)
    return A, B


def override(cfg, **sections):
    """Copy of a frozen scenario config with per-section field overrides."""
    for name, fields in sections.items():
        cfg = dataclasses.replace(cfg, **{name: dataclasses.replace(getattr(cfg, name), **fields)})
    return cfg


QUIET = dict(disturbance_force_n=0.0, position_std_m=0.0, attitude_std_rad=0.0, velocity_std_mps=0.0,
             omega_std_rps=0.0, jump_probability=0.0, latency_max_s=0.0)


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The bundled scenario run once through the CLI; shared by slow tests."""
    out = tmp_path_factory.mktemp("default_run")
    t0 = time.perf_counter()
    code = cli.main(["run", "--out", str(out)])
    return {"exit_code": code, "out": out, "wall_s": time.perf_counter() - t0}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
