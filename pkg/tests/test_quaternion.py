import numpy as np
import pytest
from hypothesis import given, strategies as st

from freeflyer import dynamics as dyn
from freeflyer import quaternion as quat
from freeflyer.trajectory import Trajectory, resample

from conftest import ASTROBEE

seeds = st.integers(0, 2 ** 32 - 1)


def rand_q(rng):
    return quat.normalize(rng.normal(size=4))


def test_slerp_endpoints():
    rng = np.random.default_rng(0)
    q0, q1 = rand_q(rng), rand_q(rng)
    assert np.allclose(quat.slerp(q0, q1, 0.0), q0, atol=1e-15)
    # the endpoint may come back with the opposite sign (same rotation)
    assert quat.angle_between(quat.slerp(q0, q1, 1.0), q1) < 1e-7


def test_slerp_halfway_about_z():
    q = quat.slerp(quat.IDENTITY, quat.from_yaw(np.pi / 2), 0.5)
    assert np.allclose(q, quat.from_yaw(np.pi / 4), atol=1e-15)


def test_slerp_has_constant_angular_rate():
    rng = np.random.default_rng(1)
    q0, q1 = rand_q(rng), rand_q(rng)
    qs = quat.slerp(q0, q1, np.linspace(0, 1, 21))
    steps = [float(quat.angle_between(qs[k], qs[k + 1])) for k in range(20)]
    assert np.ptp(steps) < 1e-9


def test_slerp_half_turn_is_deterministic():
    q1 = quat.from_axis_angle([0, 0, 1], np.pi)
    a = quat.slerp(quat.IDENTITY, q1, 0.5)
    b = quat.slerp(quat.IDENTITY, -q1, 0.5)
    assert np.allclose(a, b)


@given(seeds)
def test_rotate_inverse_undoes_rotate(seed):
    rng = np.random.default_rng(seed)
    q, v = rand_q(rng), rng.normal(size=3)
    assert np.allclose(quat.rotate_inverse(q, quat.rotate(q, v)), v, atol=1e-12)


@given(seeds)
def test_rotation_matrix_agrees_with_rotate(seed):
    rng = np.random.default_rng(seed)
    q, v = rand_q(rng), rng.normal(size=3)
    assert np.allclose(quat.to_rotmat(q) @ v, quat.rotate(q, v), atol=1e-12)


@given(seeds)
def test_rotvec_round_trip(seed):
    rng = np.random.default_rng(seed)
    rv = rng.normal(size=3)
    rv *= min(1.0, 3.0 / np.linalg.norm(rv))
    assert np.allclose(quat.to_rotvec(quat.from_rotvec(rv)), rv, atol=1e-10)


def test_multiplication_composes_rotations():
    a, b = quat.from_yaw(0.3), quat.from_yaw(0.4)
    assert np.allclose(quat.mul(a, b), quat.from_yaw(0.7), atol=1e-15)


def test_skew_matches_cross_product():
    a, b = np.array([1.0, 2.0, 3.0]), np.array([-0.5, 0.1, 2.0])
    assert np.allclose(quat.skew(a) @ b, np.cross(a, b))


# trajectory ------------------------------------------------------------------

def test_open_loop_rollout_has_zero_defect():
    rng = np.random.default_rng(2)
    tr = Trajectory.from_inputs(dyn.make_state(), rng.normal(size=(10, 6)) * 0.05, ASTROBEE, 0.2)
    assert tr.defect(ASTROBEE) < 1e-15


def test_defect_detects_inconsistent_knots():
    rng = np.random.default_rng(2)
    tr = Trajectory.from_inputs(dyn.make_state(), rng.normal(size=(10, 6)) * 0.05, ASTROBEE, 0.2)
    x = tr.x.copy()
    x[5, 0] += 1e-3
    assert Trajectory(tr.t, x, tr.u).defect(ASTROBEE) == pytest.approx(1e-3, rel=1e-6)


def test_sample_interpolates_and_clamps():
    tr = Trajectory([0.0, 1.0], [dyn.make_state(r=[0, 0, 0]), dyn.make_state(r=[1, 0, 0])], np.zeros((2, 6)))
    assert tr.sample(0.25)[0] == pytest.approx(0.25)
    assert tr.sample(-1.0)[0] == 0.0 and tr.sample(5.0)[0] == 1.0


def test_knots_must_increase():
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], [dyn.make_state()] * 2, np.zeros((2, 6)))


def test_concat_and_dict_round_trip():
    rng = np.random.default_rng(3)
    a = Trajectory.from_inputs(dyn.make_state(), rng.normal(size=(3, 6)) * 0.05, ASTROBEE, 0.2)
    b = Trajectory.from_inputs(a.end, rng.normal(size=(2, 6)) * 0.05, ASTROBEE, 0.2, t0=a.t[-1])
    c = a.concat(b)
    assert len(c) == 6 and c.defect(ASTROBEE) < 1e-15
    d = Trajectory.from_dict(c.to_dict())
    assert np.array_equal(d.x, c.x) and np.array_equal(d.u, c.u)


def test_resample_holds_final_knot():
    tr = Trajectory([0.0, 1.0], [dyn.make_state(r=[0, 0, 0]), dyn.make_state(r=[1, 0, 0])], np.zeros((2, 6)))
    xs = resample(tr, 0.5, 2.0)
    assert xs[:, 0].tolist() == [0.0, 0.5, 1.0, 1.0, 1.0]
