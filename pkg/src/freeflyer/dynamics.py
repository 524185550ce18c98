"""Six degree-of-freedom rigid-body free-flyer model.

State layout (13 entries, see :data:`STATE_DIM`)::

    x = [r (3, m, inertial), q (4, body->inertial, scalar-last),
         v (3, m/s, inertial), w (3, rad/s, body)]

Inputs are body-frame wrenches ``u = [F (3, N), tau (3, N m)]``.

Linearizations use a 12-entry error state ``[dr, dtheta, dv, dw]`` where
``dtheta`` is the small-angle body-frame attitude error, ``q = q_bar ⊗
exp(dtheta)``.  Every function that takes states also accepts stacks of
states with shape ``(..., 13)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import quaternion as quat

STATE_DIM = 13
ERROR_DIM = 12
INPUT_DIM = 6

POS = slice(0, 3)
ATT = slice(3, 7)
VEL = slice(7, 10)
OMEGA = slice(10, 13)

DEFAULT_DT = 0.2
DEFAULT_MASS = 9.58
DEFAULT_INERTIA = (0.153, 0.143, 0.162)

# Approximate per-axis maximum thrust [N] against impeller speed [RPM].
FORCE_LIMIT_TABLE = {
    2000: (0.452, 0.216, 0.257),
    2500: (0.680, 0.332, 0.394),
    2800: (0.849, 0.406, 0.486),
}
TORQUE_TO_FORCE_RATIO = 0.1


class ModelError(ValueError):
    """Raised for physically invalid inertial parameters."""


@dataclass(frozen=True)
class InertialParams:
    mass: float = DEFAULT_MASS
    inertia: np.ndarray = field(default_factory=lambda: np.diag(DEFAULT_INERTIA))
    com_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        inertia = np.array(self.inertia, dtype=float)
        if inertia.shape == (3,):
            inertia = np.diag(inertia)
        com = np.array(self.com_offset, dtype=float).reshape(3)
        object.__setattr__(self, "inertia", inertia)
        object.__setattr__(self, "com_offset", com)
        object.__setattr__(self, "_inertia_inv", None)
        if not (np.isfinite(self.mass) and self.mass > 0):
            raise ModelError(f"mass must be positive, got {self.mass}")
        if inertia.shape != (3, 3) or not np.allclose(inertia, inertia.T, atol=1e-12):
            raise ModelError("inertia tensor must be a symmetric 3x3 matrix")
        eig = np.linalg.eigvalsh(inertia)
        if eig[0] <= 0:
            raise ModelError("inertia tensor must be positive definite")
        a, b, c = eig
        if c > a + b + 1e-12:
            raise ModelError("principal moments violate the triangle inequality")
        object.__setattr__(self, "_inertia_inv", np.linalg.inv(inertia))
        if np.any(com):
            C = quat.skew(com)
            M = np.block([[self.mass * np.eye(3), -self.mass * C], [self.mass * C, inertia]])
            Minv = np.linalg.inv(M)
        else:
            Minv = np.zeros((0, 6))
        object.__setattr__(self, "_kernel_args", (1.0 / self.mass, inertia, self._inertia_inv,
                                                  Minv, self.mass * com))

    @classmethod
    def from_theta(cls, theta, com_offset=(0.0, 0.0, 0.0)) -> "InertialParams":
        """Build from inverse parameters ``[1/m, 1/Ixx, 1/Iyy, 1/Izz]``."""
        theta = np.asarray(theta, dtype=float)
        return cls(1.0 / theta[0], np.diag(1.0 / theta[1:]), np.asarray(com_offset))

    @classmethod
    def plausible(cls, theta, floor: float = 1e-3) -> "InertialParams":
        """Nearest physically valid parameters for an estimate ``theta``.

        Inverse moments are floored at ``floor`` times the largest one, the
        largest moment is capped at the sum of the other two and the inverse
        mass is kept positive.  Valid estimates pass through unchanged.
        """
        theta = np.asarray(theta, dtype=float)
        m = 1.0 / max(theta[0], 1e-6)
        th = np.where(np.isfinite(theta[1:]), theta[1:], 0.0)
        th = np.maximum(th, floor * max(np.max(np.abs(th)), 1e-12))
        inertia = 1.0 / th
        i = int(np.argmax(inertia))
        rest = inertia.sum() - inertia[i]
        inertia[i] = min(inertia[i], rest)
        return cls(m, np.diag(inertia))

    @property
    def inertia_inv(self) -> np.ndarray:
        return self._inertia_inv

    @property
    def principal(self) -> np.ndarray:
        return np.diag(self.inertia).copy()

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([[1.0 / self.mass], 1.0 / np.diag(self.inertia)])

    @property
    def vector(self) -> np.ndarray:
        """``[m, Ixx, Iyy, Izz]``."""
        return np.concatenate([[self.mass], np.diag(self.inertia)])


@dataclass(frozen=True)
class WrenchLimits:
    force: np.ndarray
    torque: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.force, dtype=float).reshape(3)
        t = np.asarray(self.torque, dtype=float).reshape(3)
        if np.any(f <= 0) or np.any(t <= 0):
            raise ValueError("wrench limits must be positive")
        object.__setattr__(self, "force", f)
        object.__setattr__(self, "torque", t)

    @classmethod
    def from_rpm(cls, rpm: int = 2000, torque_ratio: float = TORQUE_TO_FORCE_RATIO):
        force = np.array(FORCE_LIMIT_TABLE[rpm])
        return cls(force, torque_ratio * force)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])


def make_state(r=None, q=None, v=None, w=None) -> np.ndarray:
    x = np.zeros(STATE_DIM)
    x[ATT] = quat.IDENTITY
    if r is not None:
        x[POS] = r
    if q is not None:
        x[ATT] = quat.normalize(q)
    if v is not None:
        x[VEL] = v
    if w is not None:
        x[OMEGA] = w
    return x


def _rot_h(q, f):
    # Homogeneous quadratic form of R(q) f; equals the rotation for unit q and
    # keeps the RK4 stage Jacobians consistent for non-unit stage quaternions.
    e, w = q[..., :3], q[..., 3:]
    return ((w * w - np.sum(e * e, axis=-1, keepdims=True)) * f
            + 2.0 * np.sum(e * f, axis=-1, keepdims=True) * e
            + 2.0 * w * quat.cross(e, f))


def derivative(x, u, p: InertialParams) -> np.ndarray:
    """Continuous-time state derivative of the Newton-Euler model.

    With a nonzero centre-of-mass offset the coupled 6x6 mass matrix is solved
    for the body-frame acceleration of the reference point and the angular
    acceleration.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    q = x[..., ATT]
    v = x[..., VEL]
    w = x[..., OMEGA]
    F = u[..., :3]
    tau = u[..., 3:]
    I = p.inertia
    Iw = w @ I.T
    gyro = quat.cross(w, Iw)
    if not np.any(p.com_offset):
        a_body = F / p.mass
        wdot = (tau - gyro) @ p.inertia_inv.T
    else:
        m, c = p.mass, p.com_offset
        C = quat.skew(c)
        M = np.block([[m * np.eye(3), -m * C], [m * C, I]])
        bias_f = m * quat.cross(w, quat.cross(w, np.broadcast_to(c, w.shape)))
        rhs = np.concatenate([F - bias_f, tau - gyro], axis=-1)
        sol = np.linalg.solve(M, rhs[..., None])[..., 0]
        a_body, wdot = sol[..., :3], sol[..., 3:]
    out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (STATE_DIM,)))
    out[..., POS] = v
    e, qw = q[..., :3], q[..., 3:]
    out[..., 3:6] = 0.5 * (qw * w + quat.cross(e, w))
    out[..., 6] = -0.5 * np.sum(e * w, axis=-1)
    out[..., VEL] = _rot_h(q, a_body)
    out[..., OMEGA] = wdot
    return out


def step_rk4(x, u, p: InertialParams, dt: float = DEFAULT_DT) -> np.ndarray:
    """One classical RK4 step with the wrench held constant; renormalizes q."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    X = np.ascontiguousarray(np.broadcast_to(x, shape + (STATE_DIM,)).reshape(-1, STATE_DIM))
    U = np.ascontiguousarray(np.broadcast_to(u, shape + (INPUT_DIM,)).reshape(-1, INPUT_DIM))
    out = _kernels.rk4_batch(X, U, *p._kernel_args, float(dt))
    return out.reshape(shape + (STATE_DIM,))


def _step_rk4_numpy(x, u, p: InertialParams, dt: float) -> np.ndarray:
    k1 = derivative(x, u, p)
    k2 = derivative(x + 0.5 * dt * k1, u, p)
    k3 = derivative(x + 0.5 * dt * k2, u, p)
    k4 = derivative(x + dt * k3, u, p)
    xn = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    xn[..., ATT] = quat.normalize(xn[..., ATT])
    return xn


def rollout(x0, inputs, p: InertialParams, dt: float = DEFAULT_DT) -> np.ndarray:
    """Open-loop propagation; returns ``len(inputs) + 1`` states."""
    inputs = np.asarray(inputs, dtype=float)
    if np.ndim(x0) == 1:
        return _kernels.rk4_rollout(np.asarray(x0, dtype=float), np.ascontiguousarray(inputs.reshape(-1, INPUT_DIM)),
                                    *p._kernel_args, float(dt))
    xs = np.empty((len(inputs) + 1,) + np.shape(x0))
    xs[0] = x0
    for k in range(len(inputs)):
        xs[k + 1] = step_rk4(xs[k], inputs[k], p, dt)
    return xs


def error_state(x, x_ref) -> np.ndarray:
    """12-entry error ``x ⊖ x_ref`` (body-frame small-angle attitude error)."""
    x = np.asarray(x, dtype=float)
    x_ref = np.asarray(x_ref, dtype=float)
    shape = np.broadcast_shapes(x.shape, x_ref.shape)[:-1]
    dx = np.empty(shape + (ERROR_DIM,))
    dx[..., 0:3] = x[..., POS] - x_ref[..., POS]
    dx[..., 3:6] = quat.error_angle(x_ref[..., ATT], x[..., ATT])
    dx[..., 6:9] = x[..., VEL] - x_ref[..., VEL]
    dx[..., 9:12] = x[..., OMEGA] - x_ref[..., OMEGA]
    return dx


def retract(x_ref, dx) -> np.ndarray:
    """``x_ref ⊕ dx``; inverts :func:`error_state` exactly except for a third-order attitude term."""
    x_ref = np.asarray(x_ref, dtype=float)
    dx = np.asarray(dx, dtype=float)
    shape = np.broadcast_shapes(x_ref.shape[:-1], dx.shape[:-1])
    x = np.empty(shape + (STATE_DIM,))
    x[..., POS] = x_ref[..., POS] + dx[..., 0:3]
    x[..., ATT] = quat.mul(x_ref[..., ATT], quat.from_rotvec(dx[..., 3:6]))
    x[..., VEL] = x_ref[..., VEL] + dx[..., 6:9]
    x[..., OMEGA] = x_ref[..., OMEGA] + dx[..., 9:12]
    return x


@dataclass(frozen=True)
class LtvMatrices:
    A: np.ndarray
    B: np.ndarray
    x_bar: np.ndarray
    u_bar: np.ndarray
    dt: float

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n:
            raise ValueError("inconsistent LTV matrix dimensions")


def _jacobians(x, u, p: InertialParams):
    """Continuous Jacobians (ambient 13 coords) for a zero CM offset."""
    q, w = x[ATT], x[OMEGA]
    e, qw = q[:3], q[3]
    F, tau = u[:3], u[3:]
    m = p.mass
    I = p.inertia
    Iinv = p.inertia_inv
    Jx = np.zeros((STATE_DIM, STATE_DIM))
    Ju = np.zeros((STATE_DIM, INPUT_DIM))
    Jx[POS, VEL] = np.eye(3)
    # quaternion kinematics
    Jx[3:6, 3:6] = -0.5 * quat.skew(w)
    Jx[3:6, 6] = 0.5 * w
    Jx[6, 3:6] = -0.5 * w
    Jx[3:6, 10:13] = 0.5 * (qw * np.eye(3) + quat.skew(e))
    Jx[6, 10:13] = -0.5 * e
    # translational acceleration R_h(q) F / m
    a = F / m
    Jx[VEL, 3:6] = (-2.0 * np.outer(a, e) + 2.0 * np.dot(e, a) * np.eye(3)
                    + 2.0 * np.outer(e, a) - 2.0 * qw * quat.skew(a))
    Jx[VEL, 6] = 2.0 * qw * a + 2.0 * quat.cross(e, a)
    Rh = (qw * qw - e @ e) * np.eye(3) + 2.0 * np.outer(e, e) + 2.0 * qw * quat.skew(e)
    Ju[VEL, 0:3] = Rh / m
    # Euler equations
    Jx[OMEGA, OMEGA] = -Iinv @ (quat.skew(w) @ I - quat.skew(I @ w))
    Ju[OMEGA, 3:6] = Iinv
    return Jx, Ju


def _rk4_jacobian(x, u, p: InertialParams, dt: float):
    """Exact Jacobian of :func:`step_rk4` in ambient coordinates."""
    n = STATE_DIM
    eye = np.eye(n)
    k1 = derivative(x, u, p)
    A1, B1 = _jacobians(x, u, p)
    x2 = x + 0.5 * dt * k1
    k2 = derivative(x2, u, p)
    A2, B2 = _jacobians(x2, u, p)
    x3 = x + 0.5 * dt * k2
    k3 = derivative(x3, u, p)
    A3, B3 = _jacobians(x3, u, p)
    x4 = x + dt * k3
    A4, B4 = _jacobians(x4, u, p)
    k4 = derivative(x4, u, p)

    dk1x, dk1u = A1, B1
    dk2x = A2 @ (eye + 0.5 * dt * dk1x)
    dk2u = A2 @ (0.5 * dt * dk1u) + B2
    dk3x = A3 @ (eye + 0.5 * dt * dk2x)
    dk3u = A3 @ (0.5 * dt * dk2u) + B3
    dk4x = A4 @ (eye + dt * dk3x)
    dk4u = A4 @ (dt * dk3u) + B4
    Dx = eye + (dt / 6.0) * (dk1x + 2 * dk2x + 2 * dk3x + dk4x)
    Du = (dt / 6.0) * (dk1u + 2 * dk2u + 2 * dk3u + dk4u)

    xn = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    qn = xn[ATT]
    nq = np.linalg.norm(qn)
    qh = qn / nq
    Nq = (np.eye(4) - np.outer(qh, qh)) / nq
    Dx[ATT, :] = Nq @ Dx[ATT, :]
    Du[ATT, :] = Nq @ Du[ATT, :]
    xn[ATT] = qh
    return xn, Dx, Du


def _retract_jacobian(q):
    e, w = q[:3], q[3]
    M = np.zeros((4, 3))
    M[:3] = 0.5 * (w * np.eye(3) + quat.skew(e))
    M[3] = -0.5 * e
    return M


def _log_jacobian(q):
    e, w = q[:3], q[3]
    return 2.0 * np.hstack([w * np.eye(3) - quat.skew(e), -e[:, None]])


def linearize_discretize(x_bar, u_bar, p: InertialParams, dt: float = DEFAULT_DT) -> LtvMatrices:
    """Discrete error-state matrices of the RK4/ZOH map about ``(x_bar, u_bar)``.

    ``A`` maps the error about ``x_bar`` to the error about
    ``step_rk4(x_bar, u_bar)``.  Analytic chain rule through the RK4 stages;
    a nonzero CM offset falls back to central differences.
    """
    x_bar = np.asarray(x_bar, dtype=float)
    u_bar = np.asarray(u_bar, dtype=float)
    if np.any(p.com_offset):
        return _linearize_fd(x_bar, u_bar, p, dt)
    xn, Dx, Du = _rk4_jacobian(x_bar, u_bar, p, dt)
    Tin = np.zeros((STATE_DIM, ERROR_DIM))
    Tin[POS, 0:3] = np.eye(3)
    Tin[ATT, 3:6] = _retract_jacobian(x_bar[ATT])
    Tin[VEL, 6:9] = np.eye(3)
    Tin[OMEGA, 9:12] = np.eye(3)
    Tout = np.zeros((ERROR_DIM, STATE_DIM))
    Tout[0:3, POS] = np.eye(3)
    Tout[3:6, ATT] = _log_jacobian(xn[ATT])
    Tout[6:9, VEL] = np.eye(3)
    Tout[9:12, OMEGA] = np.eye(3)
    return LtvMatrices(Tout @ Dx @ Tin, Tout @ Du, x_bar.copy(), u_bar.copy(), dt)


def _linearize_fd(x_bar, u_bar, p, dt, h=1e-6) -> LtvMatrices:
    xn = step_rk4(x_bar, u_bar, p, dt)
    E = np.eye(ERROR_DIM) * h
    xp = step_rk4(retract(x_bar, E), u_bar, p, dt)
    xm = step_rk4(retract(x_bar, -E), u_bar, p, dt)
    A = (error_state(xp, xn) - error_state(xm, xn)).T / (2 * h)
    Eu = np.eye(INPUT_DIM) * h
    up = step_rk4(x_bar, u_bar + Eu, p, dt)
    um = step_rk4(x_bar, u_bar - Eu, p, dt)
    B = (error_state(up, xn) - error_state(um, xn)).T / (2 * h)
    return LtvMatrices(A, B, x_bar.copy(), u_bar.copy(), dt)


@dataclass(frozen=True)
class QuadraticCost:
    """Running/terminal quadratic weights on the error state and input.

    Running cost ``0.5 dx'Q dx + 0.5 du'R du + dx'P du + q_lin'dx + r_lin'du``;
    terminal cost ``0.5 dx'H dx + q_terminal'dx``.
    """

    Q: np.ndarray
    R: np.ndarray
    H_terminal: np.ndarray
    q_lin: np.ndarray | None = None
    r_lin: np.ndarray | None = None
    P: np.ndarray | None = None
    q_terminal: np.ndarray | None = None

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        H = np.atleast_2d(np.asarray(self.H_terminal, dtype=float))
        n, m = Q.shape[0], R.shape[0]
        P = np.zeros((n, m)) if self.P is None else np.asarray(self.P, dtype=float)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "H_terminal", H)
        object.__setattr__(self, "P", P)
        for name, size in (("q_lin", n), ("r_lin", m), ("q_terminal", n)):
            val = getattr(self, name)
            object.__setattr__(self, name, np.zeros(size) if val is None else np.asarray(val, dtype=float))
        block = np.block([[Q, P], [P.T, R]])
        if np.linalg.eigvalsh(0.5 * (block + block.T))[0] < -1e-10:
            raise ValueError("cost block [[Q, P], [P', R]] must be positive semidefinite")
        if np.linalg.eigvalsh(0.5 * (H + H.T))[0] < -1e-10:
            raise ValueError("terminal weight must be positive semidefinite")

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.R.shape[0]

    def running(self, dx, du) -> float:
        return float(0.5 * dx @ self.Q @ dx + 0.5 * du @ self.R @ du + dx @ self.P @ du
                     + self.q_lin @ dx + self.r_lin @ du)

    def terminal(self, dx) -> float:
        return float(0.5 * dx @ self.H_terminal @ dx + self.q_terminal @ dx)


def eval_cost(traj, ref, cost: QuadraticCost) -> float:
    """Quadratic tracking cost of ``traj`` against ``ref`` (equal knots)."""
    if len(traj) != len(ref):
        raise ValueError(f"length mismatch: {len(traj)} vs {len(ref)}")
    if not np.allclose(traj.t, ref.t):
        raise ValueError("timestamps of trajectory and reference differ")
    dx = error_state(traj.x, ref.x)
    du = traj.u - ref.u
    n = len(traj) - 1
    Q, R, P = cost.Q, cost.R, cost.P
    run = (0.5 * np.einsum("ki,ij,kj->", dx[:n], Q, dx[:n])
           + 0.5 * np.einsum("ki,ij,kj->", du[:n], R, du[:n])
           + np.einsum("ki,ij,kj->", dx[:n], P, du[:n])
           + np.sum(dx[:n] @ cost.q_lin) + np.sum(du[:n] @ cost.r_lin))
    return float(run + cost.terminal(dx[n]))


def saturate(u, limits: WrenchLimits) -> np.ndarray:
    """Clamp a wrench componentwise into the actuator box."""
    lim = limits.vector
    return np.clip(np.asarray(u, dtype=float), -lim, lim)


def kinetic_energy(x, p: InertialParams) -> float:
    w = x[OMEGA]
    return float(0.5 * w @ p.inertia @ w)


def angular_momentum(x, p: InertialParams) -> np.ndarray:
    return quat.rotate(x[ATT], p.inertia @ x[OMEGA])


slerp = quat.slerp
