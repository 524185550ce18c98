import json

import numpy as np
import pytest

from freeflyer import dynamics as dyn
from freeflyer import scenario as sc
from freeflyer.config import default_config
from freeflyer.estimator import InertialBelief
from freeflyer.world import point_free

from conftest import QUIET, override

SPEC = sc.ScenarioSpec.from_config(default_config())


def test_segment_table():
    rows = {s.name: (s.online_planning, s.robust_tracking, s.model_improvement) for s in sc.SEGMENT_TABLE}
    assert rows == {"A-B": (False, False, False), "B-C": (True, True, True), "C-A": (False, True, False)}


def test_default_waypoints_are_free():
    assert SPEC.blocked_waypoints() == []
    for x in SPEC.waypoints.values():
        assert point_free(x[dyn.POS], SPEC.world)


def test_payload_changes_truth_parameters():
    a, b = SPEC.params_before, SPEC.params_after
    assert b.mass == pytest.approx(a.mass + 2.0)
    assert np.allclose(np.diag(b.inertia) / np.diag(a.inertia), [1.4, 1.5, 1.6])
    assert np.allclose(b.com_offset, [0.02, 0.0, 0.0])


def test_truth_state_is_not_writable_through_its_view():
    truth = sc.TruthState(SPEC.waypoints["A"], SPEC.params_before)
    x = truth.x
    x[:] = 0.0
    assert np.array_equal(truth.x, SPEC.waypoints["A"])


def test_truth_advances_with_the_integrator():
    truth = sc.TruthState(SPEC.waypoints["A"], SPEC.params_before)
    u = np.array([0.1, 0.0, -0.05, 0.0, 0.001, 0.0])
    truth.advance(u, 0.008)
    assert np.array_equal(truth.x, dyn.step_rk4(SPEC.waypoints["A"], u, SPEC.params_before, 0.008))


def test_quiet_sensor_is_exact():
    cfg = override(default_config(), noise=QUIET).noise
    rng = np.random.default_rng(0)
    sensor = sc.SensorModel(cfg, rng, rng)
    x = dyn.make_state([10.9, -6.0, 4.9], v=[0.01, 0.02, -0.01], w=[0.0, 0.01, 0.02])
    for k in range(50):
        assert not sensor.maybe_jump(0.2 * k)
        assert np.allclose(sensor.estimate(x, 0.2 * k), x, rtol=0, atol=1e-15)
        rec = sensor.localization(x, 0.2 * k)
        assert np.array_equal(rec.v, x[dyn.VEL]) and np.array_equal(rec.w, x[dyn.OMEGA])


def test_streams_are_independent_and_reproducible():
    a, b = sc.Streams(7), sc.Streams(7)
    assert a.disturbance.random() == b.disturbance.random()
    assert sc.Streams(7).sensor.random() != sc.Streams(7).jump.random()


def test_learning_prior_is_reinflated():
    prior = sc.learning_prior(SPEC)
    assert np.array_equal(prior.theta, SPEC.prior_belief().theta)
    assert np.allclose(prior.theta_std, 0.5 * prior.theta)


def test_quiet_open_world_transfer_reaches_goal():
    cfg = override(default_config(), noise=QUIET)
    cfg = override(cfg, world=dict(obstacles=[]))
    spec = sc.ScenarioSpec.from_config(cfg)
    truth = sc.TruthState(spec.waypoints["A"], spec.params_before)
    res = sc.run_segment(spec, "A-B", truth, sc.Streams(0))
    assert res.status == "ok"
    assert res.terminal_position_error_m < 0.05
    assert res.executed_free


def test_exact_sensing_keeps_learned_model_tracking_inside_tube():
    # disturbances stay inside the set the tube was built for; the model is the learned one
    cfg = override(default_config(), noise=dict(position_std_m=0.0, attitude_std_rad=0.0, velocity_std_mps=0.0,
                                                omega_std_rps=0.0, jump_probability=0.0))
    spec = sc.ScenarioSpec.from_config(cfg)
    truth = sc.TruthState(spec.waypoints["C"], spec.params_after)
    belief = InertialBelief(spec.params_after.theta, 1e-8 * np.eye(4))
    res = sc.run_segment(spec, "C-A", truth, sc.Streams(0), belief)
    assert res.status == "ok"
    assert res.tube_violations == 0 and res.fallbacks == 0
    assert res.executed_free


def test_blocked_waypoint_ends_as_no_path():
    cfg = override(default_config(), waypoints=dict(a_m=[10.9, -6.65, 4.9]))
    spec = sc.ScenarioSpec.from_config(cfg)
    assert spec.blocked_waypoints() == ["A"]
    report = sc.run_scenario(spec)
    assert report.exit_code == sc.EXIT_NO_PATH
    assert [s.status for s in report.segments] == ["no_path"]


# default run -----------------------------------------------------------------

def test_default_run_completes_in_time(default_run):
    assert default_run["exit_code"] == 0
    report = json.loads((default_run["out"] / "report.json").read_text())
    segs = report["segments"]
    assert [s["name"] for s in segs] == ["A-B", "B-C", "C-A"]
    assert all(s["status"] == "ok" for s in segs)
    assert sum(s["duration_s"] for s in segs) < 300.0
    assert all(s["executed_collision_free"] for s in segs)


def test_default_run_learns_the_payload(default_run):
    report = json.loads((default_run["out"] / "report.json").read_text())
    est = next(s["estimation"] for s in report["segments"] if s["name"] == "B-C")
    assert est["mass"]["truth"] == pytest.approx(SPEC.params_after.mass)
    assert all(v["percent_cov_reduction"] > 0 for v in est.values())


def test_default_run_writes_all_artifacts(default_run):
    out = default_run["out"]
    for tag in ("AB", "BC", "CA"):
        for kind in ("telemetry", "estimation", "streams"):
            assert (out / f"{kind}_{tag}.csv").is_file()
    assert (out / "timing.json").is_file() and (out / "scenario.yaml").is_file()
