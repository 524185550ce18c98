import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from freeflyer import dynamics as dyn
from freeflyer import quaternion as quat
from freeflyer import tube
from freeflyer.planning.riccati import riccati_backward
from freeflyer.trajectory import Trajectory
from freeflyer.world import default_world

from conftest import ASTROBEE

LIMITS = dyn.WrenchLimits.from_rpm(2000)
MASS = ASTROBEE.mass
LTV = tube.axis_model(MASS)
ANC = tube.axis_cost(1.0, 10.0, 1.0)
W_DEFAULT = tube.DisturbanceSet.from_force(0.025, LTV)
WORLD = default_world()
CENTER = WORLD.keep_in.center
X_BOUNDS = tube.AxisBounds.from_limits(WORLD.keep_in.lower, WORLD.keep_in.upper, 0.1,
                                       tube.inertial_force_bound(LIMITS))


def double_integrator(dt=0.2):
    return dyn.LtvMatrices(np.array([[1.0, dt], [0.0, 1.0]]), np.array([[0.5 * dt * dt], [dt]]),
                           np.zeros(2), np.zeros(1), dt)


def scalar(a):
    return dyn.LtvMatrices(np.array([[a]]), np.zeros((1, 1)), np.zeros(1), np.zeros(1), 1.0)


# ancillary_gain --------------------------------------------------------------

def test_gain_stabilizes_double_integrator():
    ltv = double_integrator()
    K = tube.ancillary_gain(ltv, dyn.QuadraticCost(np.eye(2), np.eye(1), np.eye(2)))
    assert np.max(np.abs(np.linalg.eigvals(ltv.A + ltv.B @ K))) < 1.0


def test_gain_matches_iterated_riccati():
    ltv = double_integrator()
    cost = dyn.QuadraticCost(np.eye(2), np.eye(1), np.zeros((2, 2)))
    sol = riccati_backward(ltv, cost, 3000)
    # riccati_backward uses du = -K dx
    assert np.allclose(tube.ancillary_gain(ltv, cost), -sol.K[0], atol=1e-8, rtol=0)


def test_expensive_control_gives_vanishing_gain():
    K = tube.ancillary_gain(double_integrator(), dyn.QuadraticCost(np.eye(2), 1e14 * np.eye(1), np.eye(2)))
    assert np.max(np.abs(K)) < 1e-3


def test_unstabilizable_pair_is_an_error():
    ltv = dyn.LtvMatrices(np.diag([2.0, 1.0]), np.array([[0.0], [1.0]]), np.zeros(2), np.zeros(1), 1.0)
    with pytest.raises(ValueError):
        tube.ancillary_gain(ltv, dyn.QuadraticCost(np.eye(2), np.eye(1), np.eye(2)))


# rpi_box ---------------------------------------------------------------------

def test_no_disturbance_gives_zero_tube():
    K = tube.ancillary_gain(LTV, ANC)
    Z = tube.rpi_box(LTV, K, tube.DisturbanceSet(np.zeros(2)))
    assert Z.is_zero


def test_scalar_geometric_series():
    Z = tube.rpi_box(scalar(0.5), np.zeros((1, 1)), tube.DisturbanceSet([1.0]))
    assert Z.outer() == pytest.approx([2.0], rel=1e-12)


def test_non_contractive_loop_is_an_error():
    with pytest.raises(ValueError):
        tube.rpi_box(scalar(1.0), np.zeros((1, 1)), tube.DisturbanceSet([1.0]))


@given(st.floats(0.0, 0.2), st.floats(1.0, 20.0), st.floats(1.0, 200.0))
def test_tube_is_invariant(f_max, qp, qv):
    K = tube.ancillary_gain(LTV, tube.axis_cost(qp, qv, 1.0))
    W = tube.DisturbanceSet.from_force(f_max, LTV)
    Z = tube.rpi_box(LTV, K, W)
    assert tube.is_invariant(Z, LTV, K, W)


def test_random_disturbance_sequences_stay_in_tube():
    rng = np.random.default_rng(0)
    K = tube.ancillary_gain(LTV, ANC)
    Z = tube.rpi_box(LTV, K, W_DEFAULT)
    A_cl = LTV.A + LTV.B @ K
    n = 100_000
    e = rng.uniform(-1, 1, (n, 2)) * Z.b @ Z.T.T     # start anywhere in Z
    for _ in range(60):
        f = np.where(rng.random((n, 1)) < 0.5, rng.choice([-1.0, 1.0], (n, 1)), rng.uniform(-1, 1, (n, 1)))
        e = e @ A_cl.T + 0.025 * f * LTV.B[:, 0]
        assert np.all(Z.contains(e))


# tighten ---------------------------------------------------------------------

def test_zero_tube_leaves_bounds_unchanged():
    out = tube.tighten(X_BOUNDS, tube.ModalBox.zero(), np.ones((1, 2)))
    assert np.array_equal(out.x_lower, X_BOUNDS.x_lower) and np.array_equal(out.u_upper, X_BOUNDS.u_upper)


def test_interval_erosion():
    X = tube.AxisBounds(-np.ones((3, 2)), np.ones((3, 2)), -np.ones(3), np.ones(3))
    Z = tube.ModalBox(np.eye(2), [0.2, 0.2])
    out = tube.tighten(X, Z, np.array([[-0.5, -1.0]]))
    assert np.allclose(out.x_lower, -0.8) and np.allclose(out.x_upper, 0.8)
    assert np.allclose(out.u_upper, 1.0 - 0.3)


def test_excessive_disturbance_makes_tightening_infeasible():
    W = tube.DisturbanceSet.from_force(0.5, LTV)
    with pytest.raises(tube.TubeInfeasibleError):
        tube.TubeSpec.build(LTV, ANC, W, X_BOUNDS)


def test_tightened_sets_are_inside_nominal():
    spec = tube.TubeSpec.build(LTV, ANC, W_DEFAULT, X_BOUNDS)
    b, n = spec.bounds, spec.nominal_bounds
    assert np.all(b.x_lower >= n.x_lower) and np.all(b.x_upper <= n.x_upper)
    assert np.all(b.u_lower >= n.u_lower) and np.all(b.u_upper <= n.u_upper)
    assert np.all(b.x_lower < b.x_upper) and np.all(b.u_lower < b.u_upper)


# tube MPC --------------------------------------------------------------------

SPEC = tube.TubeSpec.build(LTV, ANC, W_DEFAULT, X_BOUNDS)


def moving_reference(force=(0.01, -0.005, 0.0)):
    u = np.zeros((40, 6))
    u[:20, :3] = force
    u[20:, :3] = -np.array(force)
    p = dyn.InertialParams(MASS, ASTROBEE.inertia)
    return Trajectory.from_inputs(dyn.make_state(CENTER), u, p, 0.2)


def test_on_reference_command_equals_feedforward():
    ref = moving_reference()
    mpc = tube.TubeMpc(SPEC, mass=MASS)
    for k in (0, 5, 12):
        t = 0.2 * k
        cmd = mpc.step(ref.sample(t), ref, t)
        assert not cmd.fallback
        assert np.allclose(cmd.u_anc, 0.0, atol=1e-9)
        assert np.allclose(cmd.v, ref.u[k, :3], atol=1e-9)


def test_displaced_start_gets_ancillary_correction():
    ref = moving_reference()
    mpc = tube.TubeMpc(SPEC, mass=MASS)
    x = ref.sample(0.0).copy()
    d = np.array([0.5, -0.5, 0.3]) * SPEC.Z.outer()[0]
    x[dyn.POS] += d
    cmd = mpc.step(x, ref, 0.0)
    x_ax = np.column_stack([x[dyn.POS], x[dyn.VEL]])
    assert np.all(SPEC.Z.contains(x_ax - cmd.z_bar))
    assert np.allclose(cmd.u_anc, (SPEC.K_anc @ (x_ax - cmd.z_bar).T)[0], atol=1e-15)
    assert np.all(np.sign(cmd.v + cmd.u_anc)[d != 0] == -np.sign(d[d != 0]))


def test_nominal_respects_tightened_bounds():
    ref = moving_reference((0.1, 0.1, 0.1))
    mpc = tube.TubeMpc(SPEC, mass=MASS)
    b = SPEC.bounds
    for k in range(0, 30, 3):
        cmd = mpc.step(ref.sample(0.2 * k), ref, 0.2 * k)
        assert np.all(cmd.v >= b.u_lower - 1e-9) and np.all(cmd.v <= b.u_upper + 1e-9)
        assert np.all(cmd.z_bar >= b.x_lower - 1e-9) and np.all(cmd.z_bar <= b.x_upper + 1e-9)


def test_standard_mpc_pins_the_initial_state():
    std = tube.TubeMpc(tube.TubeSpec.standard(X_BOUNDS), mass=MASS)
    ref = moving_reference()
    x = ref.sample(0.0).copy()
    x[dyn.POS] += [0.01, 0.0, -0.01]
    cmd = std.step(x, ref, 0.0)
    assert np.allclose(cmd.z_bar, np.column_stack([x[dyn.POS], x[dyn.VEL]]), rtol=0, atol=1e-12)
    assert np.all(cmd.u_anc == 0.0)


def test_controller_step_is_fast():
    ref = moving_reference()
    mpc = tube.TubeMpc(SPEC, mass=MASS)
    x = ref.sample(0.0)
    times = []
    for _ in range(200):
        t0 = time.perf_counter()
        mpc.step(x, ref, 0.0)
        times.append(time.perf_counter() - t0)
    assert np.median(times) < 0.01


def test_closed_loop_episodes_never_leave_tube():
    rng = np.random.default_rng(1)
    mpc = tube.TubeMpc(SPEC, mass=MASS)
    cfg = tube.MpcConfig()
    windows = tube.reference_windows(moving_reference(), 40, cfg)
    for _ in range(20):
        forces = np.array([tube.sample_disturbance(rng, 0.025) for _ in windows])
        res = tube.track_episode(mpc, windows, forces)
        assert res.tube_exits == 0 and res.fallbacks == 0


# attitude --------------------------------------------------------------------

GAINS = tube.AttitudeGains.design(ASTROBEE)


def test_aligned_attitude_needs_no_torque():
    x = dyn.make_state(CENTER)
    assert np.all(tube.attitude_lqr_step(x, x, GAINS, LIMITS) == 0.0)


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_yaw_error_gives_restoring_torque(sign):
    x = dyn.make_state(CENTER, quat.from_yaw(sign * np.deg2rad(10)))
    tau = tube.attitude_lqr_step(x, dyn.make_state(CENTER), GAINS, LIMITS)
    assert np.sign(tau[2]) == -sign


def test_yaw_step_settles_within_torque_box():
    x_ref = dyn.make_state(CENTER, quat.from_yaw(np.deg2rad(10)))
    x = dyn.make_state(CENTER)
    errs = []
    for _ in range(200):
        tau = tube.attitude_lqr_step(x, x_ref, GAINS, LIMITS)
        assert np.all(np.abs(tau) <= LIMITS.torque)
        x = dyn.step_rk4(x, np.concatenate([np.zeros(3), tau]), ASTROBEE, 0.2)
        errs.append(np.rad2deg(float(quat.angle_between(x[dyn.ATT], x_ref[dyn.ATT]))))
    errs = np.array(errs)
    settle = np.nonzero(errs > 0.5)[0]
    t_settle = 0.2 * (settle[-1] + 1) if len(settle) else 0.0
    assert t_settle < 30.0


def test_body_wrench_rotates_and_saturates():
    x = dyn.make_state(CENTER, quat.from_yaw(np.pi / 2))
    u = tube.body_wrench(x, np.array([0.1, 0.0, 0.0]), np.zeros(3), LIMITS)
    assert np.allclose(u[:3], [0.0, -0.1, 0.0], atol=1e-15)
    big = tube.body_wrench(x, np.array([10.0, 0.0, 0.0]), np.ones(3), LIMITS)
    assert np.all(np.abs(big) <= LIMITS.vector)
