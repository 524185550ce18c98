"""LQR steering shared by the sampling planner and the shortcut smoother.

Translational commands are computed as inertial-frame forces and rotated
into the body frame with the actual attitude before saturation, so the
translational loop is exactly linear and the same Riccati solution serves
every target attitude.  Rotational commands are body torques on the
small-angle attitude error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import dynamics as dyn
from .. import quaternion as quat
from ..trajectory import Trajectory
from .riccati import RiccatiSolution, lqr_infinite, riccati_backward


@dataclass(frozen=True)
class SteerWeights:
    position: float = 1.0
    attitude: float = 0.5
    velocity: float = 5.0
    omega: float = 0.5
    force: float = 1.5
    torque: float = 400.0
    terminal_scale: float = 1000.0


def planning_model(p: dyn.InertialParams, dt: float) -> dyn.LtvMatrices:
    """Error-state model about rest at identity attitude (inertial force inputs)."""
    return dyn.linearize_discretize(dyn.make_state(), np.zeros(dyn.INPUT_DIM), p, dt)


def steer_cost(model: dyn.LtvMatrices, w: SteerWeights) -> dyn.QuadraticCost:
    Q = np.diag([w.position] * 3 + [w.attitude] * 3 + [w.velocity] * 3 + [w.omega] * 3)
    R = np.diag([w.force] * 3 + [w.torque] * 3)
    S_inf, _ = lqr_infinite(model.A, model.B, Q, R)
    return dyn.QuadraticCost(Q, R, w.terminal_scale * S_inf)


class SteerModel:
    """Finite-horizon LQR toward a target state, indexed by steps-to-go.

    The target's own velocity makes the error dynamics affine
    (``g = [v dt, 0, 0, 0]``).  The homogeneous part (``S``, ``K``) is shared
    by all targets; the affine part is linear in the target velocity (and the
    constant quadratic), so it is assembled from three basis solutions.
    """

    def __init__(self, p: dyn.InertialParams, limits: dyn.WrenchLimits, dt: float,
                 n_max: int, weights: SteerWeights = SteerWeights()):
        self.p = p
        self.limits = limits
        self.dt = dt
        self.n_max = int(n_max)
        self.model = planning_model(p, dt)
        self.cost = steer_cost(self.model, weights)
        base = riccati_backward(self.model, self.cost, self.n_max)
        self.S, self.K = base.S, base.K
        S_inf, K_inf = lqr_infinite(self.model.A, self.model.B, self.cost.Q, self.cost.R)
        self.S_inf, self.K_inf = S_inf, K_inf
        s_b, k_b, c_b = [], [], []
        for a in range(3):
            g = np.zeros(dyn.ERROR_DIM)
            g[a] = dt
            sol = riccati_backward(self.model, self.cost, self.n_max, drift=g)
            s_b.append(sol.s)
            k_b.append(sol.k)
            c_b.append(sol.c)
        self._s_basis = np.stack(s_b, axis=-1)       # (N+1, n, 3)
        self._k_basis = np.stack(k_b, axis=-1)       # (N, m, 3)
        C = np.zeros((self.n_max + 1, 3, 3))
        for a in range(3):
            C[:, a, a] = c_b[a]
            for b in range(a + 1, 3):
                g = np.zeros(dyn.ERROR_DIM)
                g[a] = g[b] = dt
                c_ab = riccati_backward(self.model, self.cost, self.n_max, drift=g).c
                C[:, a, b] = C[:, b, a] = 0.5 * (c_ab - c_b[a] - c_b[b])
        self._c_basis = C

    def solution(self, v_target) -> RiccatiSolution:
        """Riccati solution about a target moving with inertial velocity ``v_target``."""
        v = np.asarray(v_target, dtype=float)
        s = self._s_basis @ v
        k = self._k_basis @ v
        c = np.einsum("a,kab,b->k", v, self._c_basis, v)
        return RiccatiSolution(self.S, s, c, self.K, k)

    def value(self, states, target, steps_to_go: int | None = None) -> np.ndarray:
        """Cost-to-go metric from ``states`` to ``target`` (lower is closer)."""
        j = self.n_max - (self.n_max if steps_to_go is None else steps_to_go)
        dx = dyn.error_state(states, target)
        v = target[dyn.VEL]
        s = self._s_basis[j] @ v
        c = v @ self._c_basis[j] @ v
        return 0.5 * np.einsum("...i,ij,...j->...", dx, self.S[j], dx) + dx @ s + c

    def command(self, X, targets, K, k) -> np.ndarray:
        """Saturated body wrench for states ``X`` given per-row gains."""
        dx = dyn.error_state(X, targets)
        u = -np.einsum("bij,bj->bi", K, dx) - k
        return self.to_body(X, u)

    def to_body(self, X, u_inertial) -> np.ndarray:
        u = np.array(u_inertial, dtype=float)
        u[..., :3] = quat.rotate_inverse(X[..., dyn.ATT], u[..., :3])
        return dyn.saturate(u, self.limits)

    def steer(self, X0, targets, steps) -> tuple[np.ndarray, np.ndarray]:
        """Closed-loop rollouts from rows of ``X0`` toward rows of ``targets``.

        ``steps`` gives each row's horizon (<= ``n_max``).  Returns states
        ``(b, max_steps + 1, 13)`` and inputs ``(b, max_steps + 1, 6)``; rows
        shorter than the longest are padded by holding their final state.
        """
        X0 = np.atleast_2d(np.asarray(X0, dtype=float))
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        b = len(X0)
        targets = np.broadcast_to(targets, (b, dyn.STATE_DIM))
        steps = np.broadcast_to(np.asarray(steps, dtype=int), (b,))
        if np.any(steps < 1) or np.any(steps > self.n_max):
            raise ValueError("steer horizon out of range")
        n = int(steps.max())
        xs = np.empty((b, n + 1, dyn.STATE_DIM))
        us = np.zeros((b, n + 1, dyn.INPUT_DIM))
        xs[:, 0] = X0
        v = targets[:, dyn.VEL]
        k_all = np.einsum("kmi,bi->bkm", self._k_basis, v)
        X = X0.copy()
        rows = np.arange(b)
        for i in range(n):
            active = i < steps
            j = np.clip(self.n_max - steps + i, 0, self.n_max - 1)
            u = self.command(X, targets, self.K[j], k_all[rows, j])
            u[~active] = 0.0
            Xn = dyn.step_rk4(X, u, self.p, self.dt)
            Xn[~active] = X[~active]
            us[:, i] = u
            xs[:, i + 1] = Xn
            X = Xn
        return xs, us

    def horizon_for(self, x_from, x_to, cruise_speed=0.05, cruise_rate=0.1,
                    accel=0.01, t_min=1.0) -> np.ndarray:
        """Step count from a crude time-to-go estimate, clipped to ``n_max``."""
        x_from = np.atleast_2d(x_from)
        dr = np.linalg.norm(x_from[:, dyn.POS] - x_to[dyn.POS], axis=-1)
        dv = np.linalg.norm(x_from[:, dyn.VEL] - x_to[dyn.VEL], axis=-1)
        dth = quat.angle_between(x_from[:, dyn.ATT], x_to[dyn.ATT])
        T = t_min + dr / cruise_speed + dv / accel + dth / cruise_rate
        return np.clip(np.ceil(T / self.dt).astype(int), 1, self.n_max)


def path_cost(traj: Trajectory, limits: dyn.WrenchLimits, time_weight: float = 1.0,
              effort_weight: float = 1.0) -> float:
    """Duration plus normalized control effort, ``sum dt (w_t + w_e/2 |u/u_max|^2)``."""
    if len(traj) < 2:
        return 0.0
    dts = np.diff(traj.t)
    un = traj.u[:-1] / limits.vector
    return float(np.sum(dts * (time_weight + 0.5 * effort_weight * np.sum(un * un, axis=1))))


def edge_cost(us, dt, limits: dyn.WrenchLimits, time_weight=1.0, effort_weight=1.0) -> np.ndarray:
    """Same metric as :func:`path_cost` for rows of held inputs ``us`` (..., k, 6)."""
    un = np.asarray(us) / limits.vector
    return dt * (time_weight * us.shape[-2] + 0.5 * effort_weight * np.sum(un * un, axis=(-1, -2)))


def velocity_ok(xs, v_max: float, tol: float = 1e-9) -> np.ndarray:
    return np.all(np.abs(xs[..., dyn.VEL]) <= v_max + tol, axis=(-1, -2))


def track(ref: Trajectory, x0, model: SteerModel) -> Trajectory:
    """Closed-loop re-integration following ``ref`` from ``x0``.

    Feedforward forces are carried in the inertial frame of the reference and
    the stationary LQR gain corrects the error, so the output is exactly
    consistent with the integrator even when ``ref`` has small joins.
    """
    n = len(ref) - 1
    xs = np.empty((n + 1, dyn.STATE_DIM))
    us = np.zeros((n + 1, dyn.INPUT_DIM))
    xs[0] = x0
    dts = np.diff(ref.t)
    ff = np.array(ref.u)
    ff[:, :3] = quat.rotate(ref.x[:, dyn.ATT], ref.u[:, :3])
    for k in range(n):
        dx = dyn.error_state(xs[k], ref.x[k])
        u = ff[k] - model.K_inf @ dx
        u = model.to_body(xs[k][None], u[None])[0]
        us[k] = u
        xs[k + 1] = dyn.step_rk4(xs[k], u, model.p, float(dts[k]))
    return Trajectory(ref.t.copy(), xs, us)


def within_tolerance(x, x_goal, pos_tol, vel_tol, att_tol_rad) -> bool:
    return bool(np.linalg.norm(x[dyn.POS] - x_goal[dyn.POS]) <= pos_tol
                and np.linalg.norm(x[dyn.VEL] - x_goal[dyn.VEL]) <= vel_tol
                and quat.angle_between(x[dyn.ATT], x_goal[dyn.ATT]) <= att_tol_rad)
