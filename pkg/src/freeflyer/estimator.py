"""Recursive least-squares estimation of inverse mass and principal inertias.

The measurement model is linear in ``theta = [1/m, 1/Ixx, 1/Iyy, 1/Izz]``::

    [a; alpha] = H(u) theta,   H = [[F, 0], [0, diag(tau)]]

with ``a`` the body-frame linear acceleration and ``alpha`` the angular
acceleration.  Gyroscopic torque is not modelled here.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import chi2

from . import quaternion as quat

N_PARAMS = 4
MEAS_DIM = 6
DEFAULT_SIGMA_A = 5e-3
DEFAULT_SIGMA_ALPHA = 2e-2


@dataclass(frozen=True)
class InertialBelief:
    theta: np.ndarray
    P_cov: np.ndarray
    accepted: int = 0
    rejected: int = 0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(N_PARAMS)
        P = np.array(self.P_cov, dtype=float).reshape(N_PARAMS, N_PARAMS)
        if np.any(theta <= 0):
            raise ValueError("inverse parameters must be positive")
        P = 0.5 * (P + P.T)
        if np.linalg.eigvalsh(P)[0] <= 0:
            raise ValueError("belief covariance must be positive definite")
        theta.setflags(write=False)
        P.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "P_cov", P)

    @classmethod
    def from_params(cls, params, rel_std) -> "InertialBelief":
        """Prior from ``[m, Ixx, Iyy, Izz]`` with relative standard deviations."""
        params = np.asarray(params, dtype=float)
        theta = 1.0 / params
        sd = np.broadcast_to(np.asarray(rel_std, dtype=float), (N_PARAMS,)) * theta
        return cls(theta, np.diag(sd**2))

    @property
    def params(self) -> np.ndarray:
        """``[m, Ixx, Iyy, Izz]``."""
        return 1.0 / self.theta

    @property
    def theta_std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.P_cov))

    @property
    def param_std(self) -> np.ndarray:
        """First-order standard deviation of ``[m, Ixx, Iyy, Izz]``."""
        return self.theta_std / self.theta**2

    def reinflated(self, rel_std) -> "InertialBelief":
        """Same mean, covariance reset to the given relative spread."""
        sd = np.broadcast_to(np.asarray(rel_std, dtype=float), (N_PARAMS,)) * self.theta
        return replace(self, P_cov=np.diag(sd**2))


@dataclass(frozen=True)
class MeasurementSample:
    stamp: float
    a: np.ndarray
    alpha: np.ndarray
    u: np.ndarray

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([self.a, self.alpha])


@dataclass(frozen=True)
class ScalingModel:
    s: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float).reshape(3)
        if np.any(s <= 0):
            raise ValueError("scale factors must be positive")
        object.__setattr__(self, "s", s)

    def correct(self, a) -> np.ndarray:
        return np.asarray(a, dtype=float) / self.s


@dataclass
class OutlierGate:
    probability: float = 0.99
    dof: int = MEAS_DIM
    enabled: bool = True
    rejected: int = 0

    @property
    def threshold(self) -> float:
        return float(chi2.ppf(self.probability, self.dof))


class InsufficientExcitationError(ValueError):
    pass


def regressor(u) -> np.ndarray:
    """6x4 matrix mapping ``theta`` to ``[a; alpha]`` for wrench ``u``."""
    u = np.asarray(u, dtype=float)
    H = np.zeros(u.shape[:-1] + (MEAS_DIM, N_PARAMS))
    H[..., 0:3, 0] = u[..., 0:3]
    H[..., 3, 1] = u[..., 3]
    H[..., 4, 2] = u[..., 4]
    H[..., 5, 3] = u[..., 5]
    return H


def noise_cov(sigma_a: float = DEFAULT_SIGMA_A, sigma_alpha: float = DEFAULT_SIGMA_ALPHA) -> np.ndarray:
    return np.diag([sigma_a**2] * 3 + [sigma_alpha**2] * 3)


@dataclass(frozen=True)
class UpdateInfo:
    accepted: bool
    innovation: np.ndarray
    nis: float


def rls_update(belief: InertialBelief, sample: MeasurementSample, W, gate: OutlierGate | None = None,
               scale: ScalingModel | None = None) -> tuple[InertialBelief, UpdateInfo]:
    """One gated RLS step.

    The normalized innovation squared is compared against the chi-square
    threshold; a rejected sample leaves the estimate untouched.  An update
    that would drive an inverse parameter to zero or below is also rejected,
    since no physical body explains it.
    """
    H = regressor(sample.u)
    a = sample.a if scale is None else scale.correct(sample.a)
    y = np.concatenate([a, sample.alpha])
    P = belief.P_cov
    gamma = y - H @ belief.theta
    S = H @ P @ H.T + W
    Sinv_gamma = np.linalg.solve(S, gamma)
    nis = float(gamma @ Sinv_gamma)
    if gate is not None and gate.enabled and nis > gate.threshold:
        gate.rejected += 1
        return replace(belief, rejected=belief.rejected + 1), UpdateInfo(False, gamma, nis)
    K = np.linalg.solve(S, H @ P).T
    theta = belief.theta + K @ gamma
    if np.any(theta <= 0.0):
        return replace(belief, rejected=belief.rejected + 1), UpdateInfo(False, gamma, nis)
    IKH = np.eye(N_PARAMS) - K @ H
    # Joseph form keeps P symmetric positive definite; equals (I - KH) P in exact arithmetic
    P_new = IKH @ P @ IKH.T + K @ W @ K.T
    return (InertialBelief(theta, P_new, belief.accepted + 1, belief.rejected),
            UpdateInfo(True, gamma, nis))


def batch_least_squares(samples, W, prior: InertialBelief | None = None,
                        scale: ScalingModel | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Weighted least squares over all samples (optionally with the prior as a pseudo-measurement)."""
    Winv = np.linalg.inv(W)
    info = np.zeros((N_PARAMS, N_PARAMS))
    vec = np.zeros(N_PARAMS)
    if prior is not None:
        Pinv = np.linalg.inv(prior.P_cov)
        info += Pinv
        vec += Pinv @ prior.theta
    for smp in samples:
        H = regressor(smp.u)
        a = smp.a if scale is None else scale.correct(smp.a)
        y = np.concatenate([a, smp.alpha])
        info += H.T @ Winv @ H
        vec += H.T @ Winv @ y
    cov = np.linalg.inv(info)
    return cov @ vec, cov


@dataclass(frozen=True)
class CalibrationResult:
    scale: ScalingModel
    combined: np.ndarray
    residuals: tuple


def calibrate_scaling(batches, m_known: float) -> CalibrationResult:
    """Per-axis least squares of acceleration on force.

    ``batches[i] = (f_i, a_i)`` for axis ``i``.  The excess gain is
    ``theta'_i = (f'f)^-1 f'a - 1/m`` and the scale factor is
    ``s_i = m (theta'_i + 1/m)``.
    """
    theta = 1.0 / m_known
    combined = np.empty(3)
    residuals = []
    for i, (f, a) in enumerate(batches):
        f = np.asarray(f, dtype=float).reshape(-1)
        a = np.asarray(a, dtype=float).reshape(-1)
        ff = float(f @ f)
        if ff == 0.0:
            raise InsufficientExcitationError(f"no force excitation on axis {i}")
        excess = float(f @ a) / ff - theta
        combined[i] = excess + theta
        residuals.append(a - combined[i] * f)
    return CalibrationResult(ScalingModel(combined * m_known), combined, tuple(residuals))


# ---------------------------------------------------------------------------
# timestamp synchronization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CtlRecord:
    stamp: float
    u: np.ndarray
    arrival: float | None = None


@dataclass(frozen=True)
class LocRecord:
    stamp: float
    v: np.ndarray
    q: np.ndarray
    w: np.ndarray
    arrival: float | None = None


class Synchronizer:
    """Streaming reorder buffer that pairs differentiated velocities with wrenches.

    Records may arrive out of order.  A record is released in stamp order once
    the newest stamp seen exceeds it by ``window`` seconds; anything older
    than the release point is dropped as late.  Each released localization
    record ``k`` yields a sample from central differences over ``k-1 .. k+1``
    when one wrench was in force over that whole interval.
    """

    def __init__(self, window: float):
        if window < 0:
            raise ValueError("window must be non-negative")
        self.window = float(window)
        self._heap = []
        self._seq = 0
        self._newest = -np.inf
        self._released = (-np.inf, 1)  # (stamp, kind) of the last released record
        self._ctl = []          # released control records (stamp, u)
        self._loc = []          # last three released localization records
        self.dropped_late = 0
        self.dropped_unpaired = 0
        self.emitted = 0

    def push(self, rec) -> list:
        """Add one record; returns samples that became ready."""
        kind = 0 if isinstance(rec, CtlRecord) else 1
        if (rec.stamp, kind) <= self._released:
            self.dropped_late += 1
            return []
        # control first at equal stamps: a wrench stamped t is active from t on
        heapq.heappush(self._heap, (rec.stamp, kind, self._seq, rec))
        self._seq += 1
        self._newest = max(self._newest, rec.stamp)
        return self._release(self._newest - self.window)

    def flush(self) -> list:
        return self._release(np.inf)

    def _release(self, until: float) -> list:
        out = []
        while self._heap and self._heap[0][0] <= until:
            stamp, kind, _, rec = heapq.heappop(self._heap)
            self._released = (stamp, kind)
            if kind == 0:
                self._ctl.append((stamp, np.asarray(rec.u, dtype=float)))
                continue
            self._loc.append(rec)
            if len(self._loc) > 3:
                self._loc.pop(0)
            smp = self._sample()
            if smp is not None:
                out.append(smp)
        return out

    def _active(self, t):
        """Index of the wrench in force at time ``t`` (-1 if none yet)."""
        lo, hi = 0, len(self._ctl)
        while lo < hi:
            mid = (lo + hi) // 2
            if self._ctl[mid][0] <= t:
                lo = mid + 1
            else:
                hi = mid
        return lo - 1

    def _sample(self):
        if len(self._loc) < 3:
            return None
        r0, r1, r2 = self._loc
        i0 = self._active(r0.stamp)
        # the wrench must not change in (t0, t2]; t2 is released so all control
        # records up to it are known
        if i0 < 0 or self._active(r2.stamp) != i0:
            self.dropped_unpaired += 1
            return None
        h = r2.stamp - r0.stamp
        a_inertial = (np.asarray(r2.v) - np.asarray(r0.v)) / h
        a = quat.rotate_inverse(r1.q, a_inertial)
        alpha = (np.asarray(r2.w) - np.asarray(r0.w)) / h
        self.emitted += 1
        u = self._ctl[i0][1].copy()
        # later samples start at t1 or after, so older wrenches are never needed again
        del self._ctl[:i0]
        return MeasurementSample(r1.stamp, a, alpha, u)


def _arrival_key(rec):
    return rec.arrival if rec.arrival is not None else rec.stamp


def synchronize(ctl_stream, loc_stream, window: float) -> tuple[list, Synchronizer]:
    """Batch front end: merge both streams by arrival time and run the buffer."""
    merged = sorted([(_arrival_key(r), 0, i, r) for i, r in enumerate(ctl_stream)]
                    + [(_arrival_key(r), 1, i, r) for i, r in enumerate(loc_stream)],
                    key=lambda t: (t[0], t[1], t[2]))
    sync = Synchronizer(window)
    out = []
    for *_, rec in merged:
        out.extend(sync.push(rec))
    out.extend(sync.flush())
    return out, sync


@dataclass
class EstimatorLogRow:
    stamp: float
    theta: np.ndarray
    p_diag: np.ndarray
    innovation: np.ndarray
    nis: float
    accepted: bool


class OnlineEstimator:
    """Synchronizer + gated RLS; publishes immutable belief snapshots."""

    def __init__(self, belief: InertialBelief, W=None, window: float = 0.1,
                 gate: OutlierGate | None = None, scale: ScalingModel | None = None):
        self.belief = belief
        self.W = noise_cov() if W is None else np.asarray(W, dtype=float)
        self.sync = Synchronizer(window)
        self.gate = OutlierGate() if gate is None else gate
        self.scale = scale
        self.log: list[EstimatorLogRow] = []

    def push(self, rec) -> None:
        for smp in self.sync.push(rec):
            self.update(smp)

    def flush(self) -> None:
        for smp in self.sync.flush():
            self.update(smp)

    def update(self, smp: MeasurementSample) -> None:
        self.belief, info = rls_update(self.belief, smp, self.W, self.gate, self.scale)
        self.log.append(EstimatorLogRow(smp.stamp, self.belief.theta.copy(),
                                        np.diag(self.belief.P_cov).copy(), info.innovation,
                                        info.nis, info.accepted))
