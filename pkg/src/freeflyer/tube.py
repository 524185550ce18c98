"""Robust tube MPC for the translational subsystem and LQR attitude hold.

Translation about a fixed attitude is three identical, decoupled double
integrators in the inertial frame, so every set here is handled per axis.
The tube cross-section is a box in the modal coordinates of the ancillary
closed loop (a parallelogram per axis in position/velocity); box arithmetic
in that basis is exact for the diagonal closed-loop map, where boxes in the
raw coordinates would not contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import quadprog
from scipy.linalg import solve_discrete_are

from . import dynamics as dyn
from . import quaternion as quat
from .trajectory import Trajectory

AXIS_DIM = 2  # position, velocity
DEFAULT_DISTURBANCE_N = 0.02


class TubeInfeasibleError(RuntimeError):
    """Tightened constraints are empty: the disturbance bound exceeds actuation."""


def axis_model(mass: float, dt: float = dyn.DEFAULT_DT) -> dyn.LtvMatrices:
    """Exact discretization of ``p'' = f / m`` under zero-order hold."""
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[0.5 * dt * dt / mass], [dt / mass]])
    return dyn.LtvMatrices(A, B, np.zeros(AXIS_DIM), np.zeros(1), dt)


def axis_cost(position: float, velocity: float, force: float) -> dyn.QuadraticCost:
    Q = np.diag([position, velocity])
    return dyn.QuadraticCost(Q, np.array([[force]]), Q)


@dataclass(frozen=True)
class DisturbanceSet:
    """Box ``{w : |w_i| <= w_max_i}`` of additive per-step state disturbances."""

    w_max: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w_max, dtype=float).reshape(-1)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("disturbance bounds must be finite and non-negative")
        object.__setattr__(self, "w_max", w)

    @classmethod
    def from_force(cls, f_max: float, ltv: dyn.LtvMatrices) -> "DisturbanceSet":
        """Box hull of ``B f`` for ``|f| <= f_max``."""
        return cls(np.abs(ltv.B[:, 0]) * f_max)

    def corners(self) -> np.ndarray:
        n = len(self.w_max)
        signs = np.array(np.meshgrid(*[[-1.0, 1.0]] * n, indexing="ij")).reshape(n, -1).T
        return signs * self.w_max


@dataclass(frozen=True)
class ModalBox:
    """``{e : |T^-1 e| <= b}``; a plain box when ``T`` is the identity."""

    T: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        T = np.atleast_2d(np.asarray(self.T, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if np.any(b < 0):
            raise ValueError("box half-widths must be non-negative")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "_T_inv", np.linalg.inv(T))

    @classmethod
    def zero(cls, n: int = AXIS_DIM) -> "ModalBox":
        return cls(np.eye(n), np.zeros(n))

    @property
    def T_inv(self) -> np.ndarray:
        return self._T_inv

    @property
    def is_zero(self) -> bool:
        return not np.any(self.b)

    def coords(self, e) -> np.ndarray:
        return np.asarray(e) @ self._T_inv.T

    def contains(self, e, rtol: float = 1e-9) -> np.ndarray:
        """Membership with a relative floating-point allowance."""
        c = np.abs(self.coords(e))
        return np.all(c <= self.b * (1.0 + rtol) + 1e-15, axis=-1)

    def outer(self) -> np.ndarray:
        """Half-widths of the smallest enclosing box in raw coordinates."""
        return np.abs(self.T) @ self.b

    def image_bound(self, K) -> np.ndarray:
        """Half-widths of the box hull of ``K Z``."""
        return np.abs(np.atleast_2d(K) @ self.T) @ self.b


def ancillary_gain(ltv: dyn.LtvMatrices, cost: dyn.QuadraticCost) -> np.ndarray:
    """Infinite-horizon LQR gain with the sign convention ``u = K x``."""
    A, B, Q, R = ltv.A, ltv.B, cost.Q, cost.R
    n = A.shape[0]
    ctrb = np.hstack([np.linalg.matrix_power(A, i) @ B for i in range(n)])
    if np.linalg.matrix_rank(ctrb) < n:
        # uncontrollable modes must already be stable
        ev = np.linalg.eigvals(A)
        for lam in ev[np.abs(ev) >= 1.0]:
            if np.linalg.matrix_rank(np.hstack([A - lam * np.eye(n), B])) < n:
                raise ValueError("pair (A, B) is not stabilizable")
    P = solve_discrete_are(A, B, Q, R)
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    if np.max(np.abs(np.linalg.eigvals(A + B @ K))) >= 1.0:
        raise ValueError("closed loop is not stable")
    return K


def terminal_weight(ltv: dyn.LtvMatrices, cost: dyn.QuadraticCost) -> np.ndarray:
    return solve_discrete_are(ltv.A, ltv.B, cost.Q, cost.R)


def modal_basis(A_cl) -> np.ndarray:
    """Real modal basis: eigenvectors, with [Re, Im] columns for complex pairs."""
    ev, V = np.linalg.eig(A_cl)
    cols = []
    for lam, v in zip(ev, V.T):
        if abs(lam.imag) <= 1e-12 * max(1.0, abs(lam)):
            cols.append(np.real(v))
        elif lam.imag > 0:
            cols.extend([np.real(v), np.imag(v)])
    T = np.array(cols).T
    if T.shape != A_cl.shape or np.linalg.cond(T) > 1e8:
        return np.eye(A_cl.shape[0])
    return T


def rpi_box(ltv: dyn.LtvMatrices, K, W: DisturbanceSet, eps: float = 1e-12,
            max_iter: int = 100000) -> ModalBox:
    """Outer approximation of the minimal robust positively invariant set.

    In modal coordinates the reachable boxes obey ``z_{k+1} = M z_k + w'``
    with ``M = |T^-1 A_cl T|``.  The partial sum is truncated once a term
    falls below ``eps`` and scaled by ``1 / (1 - alpha)``, where ``alpha`` is
    the smallest factor with ``M^s w' <= alpha w'``; the result is invariant
    by construction.
    """
    A_cl = ltv.A + ltv.B @ np.atleast_2d(K)
    T = modal_basis(A_cl)
    T_inv = np.linalg.inv(T)
    M = np.abs(T_inv @ A_cl @ T)
    if np.max(np.abs(np.linalg.eigvals(M))) >= 1.0:
        raise ValueError("closed loop is not contractive in the modal box norm")
    w = np.abs(T_inv) @ W.w_max
    if not np.any(w):
        return ModalBox(T, np.zeros(len(w)))
    acc = np.zeros_like(w)
    term = w.copy()
    for _ in range(max_iter):
        acc += term
        term = M @ term
        pos = w > 0
        if np.max(term) < eps * np.max(w) and not np.any(term[~pos] > 0):
            break
    else:
        raise ValueError("RPI iteration did not converge")
    alpha = float(np.max(term[pos] / w[pos]))
    return ModalBox(T, acc / (1.0 - alpha))


def is_invariant(Z: ModalBox, ltv: dyn.LtvMatrices, K, W: DisturbanceSet, rtol: float = 1e-12) -> bool:
    """Interval check of ``A_cl Z + W`` inside ``Z`` in the modal basis."""
    A_cl = ltv.A + ltv.B @ np.atleast_2d(K)
    M = np.abs(Z.T_inv @ A_cl @ Z.T)
    reach = M @ Z.b + np.abs(Z.T_inv) @ W.w_max
    return bool(np.all(reach <= Z.b * (1.0 + rtol) + 1e-300))


@dataclass(frozen=True)
class AxisBounds:
    """Per-axis state box (rows x, y, z; columns position, velocity) and input box."""

    x_lower: np.ndarray
    x_upper: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray

    def __post_init__(self):
        for name in ("x_lower", "x_upper"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3, AXIS_DIM))
        for name in ("u_lower", "u_upper"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))

    @classmethod
    def from_limits(cls, lower, upper, v_max: float, f_max: float) -> "AxisBounds":
        lo = np.column_stack([lower, -np.full(3, v_max)])
        hi = np.column_stack([upper, np.full(3, v_max)])
        return cls(lo, hi, -np.full(3, f_max), np.full(3, f_max))


def inertial_force_bound(limits: dyn.WrenchLimits) -> float:
    """Half-width of an inertial force box that fits the body box at any attitude."""
    return float(np.min(limits.force) / np.sqrt(3.0))


def tighten(X: AxisBounds, Z: ModalBox, K) -> AxisBounds:
    """Erode the state box by the tube and the input box by its image under ``K``."""
    dz = Z.outer()
    du = float(Z.image_bound(K)[0])
    out = AxisBounds(X.x_lower + dz, X.x_upper - dz, X.u_lower + du, X.u_upper - du)
    if np.any(out.x_lower >= out.x_upper) or np.any(out.u_lower >= out.u_upper):
        raise TubeInfeasibleError("disturbance bound exceeds the available actuation")
    return out


@dataclass(frozen=True)
class TubeSpec:
    K_anc: np.ndarray
    Z: ModalBox
    bounds: AxisBounds          # tightened
    nominal_bounds: AxisBounds  # original

    @classmethod
    def build(cls, ltv: dyn.LtvMatrices, anc_cost: dyn.QuadraticCost, W: DisturbanceSet,
              X: AxisBounds) -> "TubeSpec":
        K = ancillary_gain(ltv, anc_cost)
        Z = rpi_box(ltv, K, W)
        return cls(K, Z, tighten(X, Z, K), X)

    @classmethod
    def standard(cls, X: AxisBounds) -> "TubeSpec":
        """No tube: plain MPC on the untightened constraints."""
        return cls(np.zeros((1, AXIS_DIM)), ModalBox.zero(), X, X)


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 5
    dt: float = dyn.DEFAULT_DT
    position_weight: float = 10.0
    velocity_weight: float = 100.0
    force_weight: float = 1.0


@dataclass(frozen=True)
class ControlCommand:
    v: np.ndarray            # nominal inertial force
    u_anc: np.ndarray        # ancillary inertial force
    u_total: np.ndarray      # saturated body wrench
    z_bar: np.ndarray        # nominal state (3, 2) at the current step
    z_next: np.ndarray       # predicted nominal successor (3, 2)
    fallback: bool = False


def reference_window(ref: Trajectory, t: float, horizon: int, dt: float):
    """Reference states ``(N+1, 13)`` and inertial forces ``(N, 3)`` from ``t``."""
    ts = t + dt * np.arange(horizon + 1)
    xs = ref.sample(ts)
    k = np.searchsorted(ref.t, ts[:-1], side="right") - 1
    active = (ts[:-1] >= ref.t[0]) & (ts[:-1] < ref.t[-1])
    us = np.where(active[:, None], ref.u[np.clip(k, 0, len(ref) - 1)], 0.0)
    f = quat.rotate(xs[:-1, dyn.ATT], us[:, :3])
    return xs, f


class TubeMpc:
    """Condensed per-axis QP with the initial nominal state as a decision variable.

    Decision vector ``y = [z0 (2), v_0 .. v_{N-1}]``.  With ``Z = {0}`` the
    initial state is pinned to the measurement and ``K = 0`` gives standard MPC.
    """

    def __init__(self, spec: TubeSpec, cfg: MpcConfig = MpcConfig(), mass: float = dyn.DEFAULT_MASS):
        self.spec = spec
        self.cfg = cfg
        self.mass = mass
        self.ltv = axis_model(mass, cfg.dt)
        self.cost = axis_cost(cfg.position_weight, cfg.velocity_weight, cfg.force_weight)
        self.P_term = terminal_weight(self.ltv, self.cost)
        N, n = cfg.horizon, AXIS_DIM
        A, B = self.ltv.A, self.ltv.B
        ny = n + N
        E = np.zeros((N + 1, n, ny))
        E[0, :, :n] = np.eye(n)
        for k in range(N):
            E[k + 1] = A @ E[k]
            E[k + 1, :, n + k] += B[:, 0]
        self.E = E
        W = [self.cost.Q] * N + [self.P_term]
        G = np.zeros((ny, ny))
        for k in range(N + 1):
            G += 2.0 * E[k].T @ W[k] @ E[k]
        G[n:, n:] += 2.0 * self.cost.R[0, 0] * np.eye(N)
        self.G = G
        self.weights = W
        # quadprog accepts the inverse Cholesky factor of G in place of G
        self._G_factor = np.linalg.inv(np.linalg.cholesky(G).T)
        # linear term: lin = L @ [r_0, ..., r_N] (flattened) + 2 R [f_0 .. f_{N-1}]
        self._L = np.hstack([2.0 * E[k].T @ W[k] for k in range(N + 1)])
        self._r_force = 2.0 * self.cost.R[0, 0]
        rows = []
        for k in range(N + 1):
            rows.append(E[k])
            rows.append(-E[k])
        Sv = np.zeros((N, ny))
        Sv[:, n:] = np.eye(N)
        state_rows = np.vstack(rows)                 # (4(N+1), ny)
        input_rows = np.vstack([Sv, -Sv])            # (2N, ny)
        bd = spec.bounds
        self._b_fixed = [np.concatenate([np.tile([*bd.x_lower[a], *(-bd.x_upper[a])], N + 1),
                                         np.full(N, bd.u_lower[a]), np.full(N, -bd.u_upper[a])])
                         for a in range(3)]
        if spec.Z.is_zero:
            first = np.zeros((n, ny))
            first[:, :n] = np.eye(n)                 # z0 pinned to the measurement
            self._meq = n
        else:
            P0 = np.zeros((n, ny))
            P0[:, :n] = spec.Z.T_inv
            first = np.vstack([P0, -P0])             # T^-1 (x - z0) within +/- b
            self._meq = 0
        self._Ct = np.ascontiguousarray(np.vstack([first, state_rows, input_rows]).T)

    def _solve_axis(self, a: int, x_axis, r_axis, f_ref):
        lin = self._L @ r_axis.reshape(-1)
        lin[AXIS_DIM:] += self._r_force * f_ref
        if self.spec.Z.is_zero:
            head = x_axis
        else:
            c = self.spec.Z.T_inv @ x_axis
            zb = self.spec.Z.b
            head = np.concatenate([c - zb, -c - zb])
        b = np.concatenate([head, self._b_fixed[a]])
        return quadprog.solve_qp(self._G_factor, lin, self._Ct, b, self._meq, True)[0]

    def step(self, x_now, ref: Trajectory, t: float) -> ControlCommand:
        xs, f_ref = reference_window(ref, t, self.cfg.horizon, self.cfg.dt)
        r_ax = np.stack([xs[:, dyn.POS], xs[:, dyn.VEL]], axis=-1)     # (N+1, 3, 2)
        return self.step_window(x_now, r_ax, f_ref)

    def step_window(self, x_now, r_ax, f_ref) -> ControlCommand:
        """Step with a precomputed window: ``r_ax`` (N+1, 3, 2) [pos, vel], ``f_ref`` (N, 3)."""
        n = AXIS_DIM
        x_ax = np.column_stack([x_now[dyn.POS], x_now[dyn.VEL]])      # (3, 2)
        v = np.zeros(3)
        z0 = np.zeros((3, n))
        z1 = np.zeros((3, n))
        fallback = False
        for a in range(3):
            try:
                y = self._solve_axis(a, x_ax[a], r_ax[:, a], f_ref[:, a])
            except ValueError:
                fallback = True
                break
            z0[a] = y[:n]
            v[a] = y[n]
            z1[a] = self.E[1] @ y
        if fallback:
            # regulate toward the reference with the ancillary gain alone
            K = self.spec.K_anc if np.any(self.spec.K_anc) else ancillary_gain(self.ltv, self.cost)
            z0 = r_ax[0]
            v = f_ref[0].copy()
            z1 = r_ax[1]
            u_anc = (K @ (x_ax - z0).T)[0]
        else:
            u_anc = (self.spec.K_anc @ (x_ax - z0).T)[0]
        return ControlCommand(v, u_anc, np.concatenate([v + u_anc, np.zeros(3)]), z0, z1, fallback)


def tube_mpc_step(x_now, ref: Trajectory, spec: TubeSpec, cfg: MpcConfig = MpcConfig(),
                  t: float = 0.0, mass: float = dyn.DEFAULT_MASS) -> ControlCommand:
    """One-off controller step; build a :class:`TubeMpc` once for repeated use."""
    return TubeMpc(spec, cfg, mass).step(np.asarray(x_now, dtype=float), ref, t)


@dataclass(frozen=True)
class AttitudeGains:
    K: np.ndarray  # (3, 6) on [dtheta, omega - omega_ref]

    @classmethod
    def design(cls, p: dyn.InertialParams, dt: float = dyn.DEFAULT_DT, attitude: float = 1.0,
               rate: float = 5.0, torque: float = 200.0) -> "AttitudeGains":
        lin = dyn.linearize_discretize(dyn.make_state(), np.zeros(dyn.INPUT_DIM), p, dt)
        idx = np.r_[3:6, 9:12]
        A = lin.A[np.ix_(idx, idx)]
        B = lin.B[idx, 3:6]
        P = solve_discrete_are(A, B, np.diag([attitude] * 3 + [rate] * 3), torque * np.eye(3))
        K = np.linalg.solve(torque * np.eye(3) + B.T @ P @ B, B.T @ P @ A)
        return cls(K)


def attitude_lqr_step(x_now, x_ref, gains: AttitudeGains, limits: dyn.WrenchLimits,
                      tau_ref=None) -> np.ndarray:
    """Small-angle LQR torque toward ``x_ref``, saturated to the torque box."""
    dx = dyn.error_state(x_now, x_ref)
    e = np.concatenate([dx[3:6], dx[9:12]])
    tau = -gains.K @ e
    if tau_ref is not None:
        tau = tau + tau_ref
    return np.clip(tau, -limits.torque, limits.torque)


def body_wrench(x_now, force_inertial, torque, limits: dyn.WrenchLimits) -> np.ndarray:
    u = np.concatenate([quat.rotate_inverse(x_now[dyn.ATT], force_inertial), torque])
    return dyn.saturate(u, limits)


def reference_windows(ref: Trajectory, steps: int, cfg: MpcConfig, t0: float = 0.0):
    """Per-step reference windows on the control grid, for repeated episodes."""
    out = []
    for k in range(steps):
        xs, f = reference_window(ref, t0 + k * cfg.dt, cfg.horizon, cfg.dt)
        out.append((np.stack([xs[:, dyn.POS], xs[:, dyn.VEL]], axis=-1), f))
    return out


def sample_disturbance(rng, f_max: float, corner_fraction: float = 0.5) -> np.ndarray:
    """Per-axis force in ``[-f_max, f_max]^3``: a box corner or a uniform interior point."""
    if rng.random() < corner_fraction:
        return f_max * rng.choice([-1.0, 1.0], size=3)
    return rng.uniform(-f_max, f_max, 3)


@dataclass
class EpisodeResult:
    tube_exits: int
    fallbacks: int
    max_tracking_error: float
    steps: int


def track_episode(mpc: TubeMpc, windows, forces) -> EpisodeResult:
    """Close the loop on the per-axis model with the given disturbance forces.

    The truth is the nominal double integrator itself, so any exit of
    ``x - z_bar`` from ``Z`` is a controller fault rather than model error.
    ``forces`` has shape (steps, 3).
    """
    A, B = mpc.ltv.A, mpc.ltv.B
    x_ax = windows[0][0][0].copy()            # (3, 2), start on the reference
    Z = mpc.spec.Z
    exits = 0
    fallbacks = 0
    worst = 0.0
    state = np.zeros(dyn.STATE_DIM)
    state[dyn.ATT] = quat.IDENTITY
    for k, (r_ax, f_ref) in enumerate(windows):
        state[dyn.POS] = x_ax[:, 0]
        state[dyn.VEL] = x_ax[:, 1]
        cmd = mpc.step_window(state, r_ax, f_ref)
        fallbacks += int(cmd.fallback)
        u = cmd.v + cmd.u_anc
        x_ax = x_ax @ A.T + np.outer(u + forces[k], B[:, 0])
        if not Z.is_zero and not np.all(Z.contains(x_ax - cmd.z_next)):
            exits += 1
        if k + 1 < len(windows):
            worst = max(worst, float(np.linalg.norm(x_ax[:, 0] - windows[k + 1][0][0, :, 0])))
    return EpisodeResult(exits, fallbacks, worst, len(windows))
