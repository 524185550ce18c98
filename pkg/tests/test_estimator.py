import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from freeflyer import dynamics as dyn
from freeflyer import quaternion as quat
from freeflyer.estimator import (CtlRecord, InertialBelief, InsufficientExcitationError, LocRecord,
                                 MeasurementSample, OnlineEstimator, OutlierGate, ScalingModel, Synchronizer,
                                 batch_least_squares, calibrate_scaling, noise_cov, regressor, rls_update,
                                 synchronize)

from conftest import ASTROBEE

LIMITS = dyn.WrenchLimits.from_rpm(2000)
TRUTH = np.array([9.58, 0.153, 0.143, 0.162])
THETA = 1.0 / TRUTH
W = noise_cov()
SIGMA = np.sqrt(np.diag(W))


def prior(bias=(1.15, 0.7, 1.4, 1.3)):
    """Biased prior with 20% spread on mass and 50% on the inertias."""
    return InertialBelief.from_params(TRUTH * np.array(bias), [0.2, 0.5, 0.5, 0.5])


def excited_samples(rng, n, noise=1.0, theta=THETA):
    us = rng.uniform(-1, 1, (n, 6)) * LIMITS.vector
    out = []
    for k, u in enumerate(us):
        y = regressor(u) @ theta + noise * SIGMA * rng.normal(size=6)
        out.append(MeasurementSample(0.016 * k, y[:3], y[3:], u))
    return out


def run_rls(belief, samples, gate=None, W=W):
    for smp in samples:
        belief, _ = rls_update(belief, smp, W, gate)
    return belief


# regressor -------------------------------------------------------------------

def test_zero_wrench_gives_zero_regressor():
    assert np.all(regressor(np.zeros(6)) == 0.0)


def test_unit_force_regressor():
    H = regressor([1.0, 0, 0, 0, 0, 0])
    expect = np.zeros((6, 4))
    expect[0, 0] = 1.0
    assert np.array_equal(H, expect)


@given(st.integers(0, 2 ** 32 - 1))
def test_regressor_matches_dynamics(seed):
    rng = np.random.default_rng(seed)
    q = quat.normalize(rng.normal(size=4))
    x = dyn.make_state(rng.normal(size=3), q, rng.normal(size=3) * 0.1)
    u = rng.uniform(-1, 1, 6) * LIMITS.vector
    xdot = dyn.derivative(x, u, ASTROBEE)
    meas = np.concatenate([quat.rotate_inverse(q, xdot[dyn.VEL]), xdot[dyn.OMEGA]])
    assert np.allclose(regressor(u) @ ASTROBEE.theta, meas, rtol=1e-12, atol=1e-15)


# rls_update ------------------------------------------------------------------

def test_zero_innovation_keeps_estimate_and_shrinks_covariance():
    b = prior()
    u = np.array([0.2, 0.0, 0.0, 0.0, 0.01, 0.0])
    H = regressor(u)
    y = H @ b.theta
    b2, info = rls_update(b, MeasurementSample(0.0, y[:3], y[3:], u), W)
    assert info.accepted and np.allclose(info.innovation, 0.0)
    assert np.array_equal(b2.theta, b.theta)
    # shrinks along the excited directions (mass and Iyy), untouched elsewhere
    d0, d1 = np.diag(b.P_cov), np.diag(b2.P_cov)
    assert d1[0] < d0[0] and d1[2] < d0[2]
    assert d1[1] == pytest.approx(d0[1]) and d1[3] == pytest.approx(d0[3])


def test_angular_acceleration_jump_is_rejected():
    rng = np.random.default_rng(0)
    b = run_rls(prior(), excited_samples(rng, 200))
    u = rng.uniform(-1, 1, 6) * LIMITS.vector
    y = regressor(u) @ THETA
    y[4] += 10 * SIGMA[4]
    gate = OutlierGate()
    b2, info = rls_update(b, MeasurementSample(5.0, y[:3], y[3:], u), W, gate)
    assert not info.accepted and gate.rejected == 1
    assert b2.rejected == b.rejected + 1
    assert np.array_equal(b2.theta, b.theta) and np.array_equal(b2.P_cov, b.P_cov)


def test_update_that_would_flip_a_sign_is_rejected():
    b = prior()
    u = np.array([0.0, 0.0, 0.0, 0.0, 0.02, 0.0])
    # a large negative angular acceleration about y pulls 1/Iyy below zero
    smp = MeasurementSample(0.0, np.zeros(3), np.array([0.0, -0.5, 0.0]), u)
    b2, info = rls_update(b, smp, W)
    assert not info.accepted
    assert np.array_equal(b2.theta, b.theta) and b2.rejected == 1


def test_equal_stamps_with_zero_window():
    sync = Synchronizer(0.0)
    sync.push(CtlRecord(0.0, np.zeros(6)))
    sync.push(LocRecord(0.0, np.zeros(3), quat.IDENTITY, np.zeros(3)))
    assert sync.dropped_late == 0
    sync.push(CtlRecord(0.0, np.ones(6)))
    assert sync.dropped_late == 1


def test_gate_threshold():
    assert OutlierGate().threshold == pytest.approx(16.81, abs=5e-3)


def test_long_excited_run_recovers_parameters():
    rng = np.random.default_rng(1)
    b0 = prior()
    b = run_rls(b0, excited_samples(rng, 2000), OutlierGate())
    err = np.abs(b.params - TRUTH) / TRUTH
    assert err[0] <= 0.01
    assert np.all(err[1:] <= 0.07)
    reduction = 1.0 - b.param_std[0] / b0.param_std[0]
    assert reduction >= 0.95


@settings(max_examples=20)
@given(st.integers(0, 2 ** 32 - 1))
def test_accepted_updates_never_increase_trace(seed):
    rng = np.random.default_rng(seed)
    b = prior()
    gate = OutlierGate()
    for smp in excited_samples(rng, 50, noise=3.0):
        b2, info = rls_update(b, smp, W, gate)
        if info.accepted:
            assert np.trace(b2.P_cov) <= np.trace(b.P_cov) * (1 + 1e-12)
        b = b2


def test_clean_data_rejection_rate():
    rng = np.random.default_rng(2)
    gate = OutlierGate()
    b = run_rls(prior(), excited_samples(rng, 20000), gate)
    rate = gate.rejected / 20000
    assert 0.005 <= rate <= 0.02
    assert b.rejected == gate.rejected


def test_noise_free_convergence():
    rng = np.random.default_rng(3)
    b = prior()
    W_small = 1e-16 * np.eye(6)
    for smp in excited_samples(rng, 100, noise=0.0):
        b, _ = rls_update(b, smp, W_small)
    assert np.max(np.abs(b.theta - THETA) / THETA) <= 1e-6


def test_recursive_equals_batch_least_squares():
    rng = np.random.default_rng(4)
    samples = excited_samples(rng, 300)
    b0 = prior()
    b = run_rls(b0, samples, OutlierGate(enabled=False))
    theta, cov = batch_least_squares(samples, W, prior=b0)
    assert np.allclose(b.theta, theta, rtol=1e-8, atol=0)
    assert np.allclose(b.P_cov, cov, rtol=1e-8, atol=1e-16)


def test_scaling_corrects_linear_accelerations_only():
    s = ScalingModel([1.1, 1.0, 0.9])
    u = np.array([0.2, 0.1, -0.1, 0.01, 0.01, 0.01])
    y = regressor(u) @ THETA
    smp = MeasurementSample(0.0, y[:3] * s.s, y[3:], u)
    _, info = rls_update(prior(), smp, W, scale=s)
    assert np.allclose(info.innovation, y - regressor(u) @ prior().theta, atol=1e-15)


# calibrate_scaling -----------------------------------------------------------

def _batches(rng, gain=1.0, noise=0.0, n=50):
    out = []
    for _ in range(3):
        f = rng.uniform(-0.4, 0.4, n)
        out.append((f, gain * f / TRUTH[0] + noise * rng.normal(size=n)))
    return out


def test_exact_data_needs_no_scaling():
    res = calibrate_scaling(_batches(np.random.default_rng(5)), TRUTH[0])
    assert np.allclose(res.scale.s, 1.0, atol=1e-12)
    assert all(np.allclose(r, 0.0, atol=1e-15) for r in res.residuals)


def test_scaled_data_recovers_combined_factor():
    res = calibrate_scaling(_batches(np.random.default_rng(6), gain=1.1), TRUTH[0])
    assert np.allclose(res.combined, 1.1 / TRUTH[0], atol=1e-9)


def test_noisy_calibration_matches_pseudo_inverse():
    batches = _batches(np.random.default_rng(7), gain=0.95, noise=5e-3)
    res = calibrate_scaling(batches, TRUTH[0])
    for i, (f, a) in enumerate(batches):
        assert res.combined[i] == pytest.approx((np.linalg.pinv(f[:, None]) @ a).item(), rel=1e-12)


def test_unexcited_axis_is_an_error():
    batches = _batches(np.random.default_rng(8))
    batches[1] = (np.zeros(10), np.zeros(10))
    with pytest.raises(InsufficientExcitationError):
        calibrate_scaling(batches, TRUTH[0])


# synchronize -----------------------------------------------------------------

def simulate_streams(rng, duration=6.0, loc_dt=0.016, ctl_dt=0.2):
    """Truth propagated on the localization grid with wrenches held per control period."""
    n_ctl = int(round(duration / ctl_dt))
    us = rng.uniform(-0.5, 0.5, (n_ctl, 6)) * LIMITS.vector
    ctl = [CtlRecord(k * ctl_dt, us[k]) for k in range(n_ctl)]
    x = dyn.make_state()
    loc = []
    per = int(round(ctl_dt / loc_dt))
    for k in range(n_ctl * per):
        t = k * loc_dt
        loc.append(LocRecord(t, x[dyn.VEL].copy(), x[dyn.ATT].copy(), x[dyn.OMEGA].copy()))
        x = dyn.step_rk4(x, us[min(int(t / ctl_dt + 1e-9), n_ctl - 1)], ASTROBEE, loc_dt)
    return ctl, loc


def with_arrival(records, rng, jitter):
    return [type(r)(**{**r.__dict__, "arrival": r.stamp + rng.uniform(0, jitter)}) for r in records]


def _same(a, b):
    return len(a) == len(b) and all(
        s.stamp == t.stamp and np.array_equal(s.a, t.a) and np.array_equal(s.alpha, t.alpha)
        and np.array_equal(s.u, t.u) for s, t in zip(a, b))


def test_ordered_constant_wrench_pairs_everything():
    loc = [LocRecord(0.016 * k, np.array([0.001 * k, 0, 0]), quat.IDENTITY, np.zeros(3)) for k in range(20)]
    ctl = [CtlRecord(0.0, np.array([0.1, 0, 0, 0, 0, 0]))]
    out, sync = synchronize(ctl, loc, 0.1)
    assert [s.stamp for s in out] == [r.stamp for r in loc[1:-1]]
    assert sync.dropped_late == 0 and sync.dropped_unpaired == 0


def test_swapped_wrench_stamps_come_out_ordered():
    rng = np.random.default_rng(9)
    ctl, loc = simulate_streams(rng, duration=2.0)
    ctl[3], ctl[4] = ctl[4], ctl[3]
    out, sync = synchronize(ctl, loc, 0.3)
    stamps = [s.stamp for s in out]
    assert np.all(np.diff(stamps) > 0)
    assert sync.dropped_late == 0


def test_jittered_streams_with_drops_match_full_sort():
    rng = np.random.default_rng(10)
    ctl, loc = simulate_streams(rng)
    loc = [r for r in loc if rng.random() >= 0.2]
    ctl_j, loc_j = with_arrival(ctl, rng, 0.05), with_arrival(loc, rng, 0.05)
    live, sync = synchronize(ctl_j, loc_j, 0.1)
    oracle, _ = synchronize(sorted(ctl, key=lambda r: r.stamp), sorted(loc, key=lambda r: r.stamp), 1e9)
    assert sync.dropped_late == 0
    assert _same(live, oracle)
    assert len(live) > 100


def test_synchronized_samples_measure_the_truth():
    rng = np.random.default_rng(11)
    ctl, loc = simulate_streams(rng)
    out, _ = synchronize(ctl, loc, 0.1)
    y = np.array([s.y for s in out])
    pred = np.array([regressor(s.u) @ THETA for s in out])
    # central differences plus the unmodelled gyroscopic term stay small
    assert np.max(np.abs(y - pred)) < 0.1 * np.max(np.abs(pred))


@settings(max_examples=10)
@given(st.integers(0, 2 ** 32 - 1))
def test_estimator_is_order_robust(seed):
    rng = np.random.default_rng(seed)
    ctl, loc = simulate_streams(rng, duration=3.0)
    noisy = [LocRecord(r.stamp, r.v + 1e-4 * rng.normal(size=3), r.q, r.w + 1e-4 * rng.normal(size=3))
             for r in loc]

    def estimate(records):
        est = OnlineEstimator(prior(), window=0.1)
        for r in records:
            est.push(r)
        est.flush()
        return est

    ordered = sorted(ctl + noisy, key=lambda r: (r.stamp, isinstance(r, LocRecord)))
    shuffled = with_arrival(ctl, rng, 0.05) + with_arrival(noisy, rng, 0.05)
    shuffled.sort(key=lambda r: r.arrival)
    a, b = estimate(ordered), estimate(shuffled)
    assert [r.accepted for r in a.log] == [r.accepted for r in b.log]
    assert np.array_equal(a.belief.theta, b.belief.theta)


def test_late_records_are_dropped_and_counted():
    ctl, loc = simulate_streams(np.random.default_rng(12), duration=1.0)
    records = sorted(ctl + loc, key=lambda r: r.stamp)
    late = records.pop(5)
    sync = Synchronizer(0.0)
    for r in records:
        sync.push(r)
    sync.push(late)
    assert sync.dropped_late == 1


def test_belief_validation():
    with pytest.raises(ValueError):
        InertialBelief([0.1, -1.0, 1.0, 1.0], np.eye(4))
    with pytest.raises(ValueError):
        InertialBelief(THETA, np.zeros((4, 4)))
    b = prior()
    with pytest.raises(ValueError):
        b.theta[0] = 1.0


def test_reinflation_keeps_mean():
    b = run_rls(prior(), excited_samples(np.random.default_rng(13), 100))
    r = b.reinflated(0.3)
    assert np.array_equal(r.theta, b.theta)
    assert np.allclose(r.theta_std, 0.3 * b.theta)
