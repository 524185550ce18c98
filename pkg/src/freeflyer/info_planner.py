"""Receding-horizon local planner trading tracking cost against parameter information.

The objective is

    J(U) = tracking(U) + sum_i gamma_i [ (F_prior + F(U) + eps I)^-1 ]_ii / theta_i^2

where ``F(U)`` is the Fisher information of the linear-in-parameters
measurement model accumulated over the horizon.  The information term is
normalized by the squared estimate so every parameter contributes a relative
variance.  It is solved by single-shooting sequential quadratic programming
with a fixed iteration budget.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import quadprog
from scipy.linalg import hadamard

from . import dynamics as dyn
from .estimator import InertialBelief, N_PARAMS, noise_cov, regressor
from .trajectory import Trajectory
from .world import WorldModel, point_free

SENSOR_RATE_HZ = 62.5
EPS_INFO = 1e-6


class LocalPlanError(RuntimeError):
    pass


@dataclass(frozen=True)
class FisherInfo:
    F: np.ndarray
    cumulative: np.ndarray  # (N, 4, 4) running sums, for plotting

    @property
    def diag(self) -> np.ndarray:
        return np.diag(self.F).copy()


def _inputs_of(plan) -> np.ndarray:
    if isinstance(plan, LocalPlan):
        return plan.u
    if isinstance(plan, Trajectory):
        return plan.u[:-1]
    return np.asarray(plan, dtype=float).reshape(-1, dyn.INPUT_DIM)


def fisher_info(plan, W=None, samples_per_step: float = 1.0) -> FisherInfo:
    """``F = n_s sum_k H_k' W^-1 H_k`` with ``H_k = regressor(u_k)``.

    ``plan`` may be a :class:`LocalPlan`, a :class:`Trajectory` or an input
    array.  The measurement model is linear in the parameters, so this is the
    exact information and does not depend on the current estimate.
    """
    U = _inputs_of(plan)
    W = noise_cov() if W is None else np.asarray(W, dtype=float)
    Winv = np.linalg.inv(W)
    H = regressor(U)                                   # (N, 6, 4)
    per = samples_per_step * np.einsum("kai,ab,kbj->kij", H, Winv, H)
    cum = np.cumsum(per, axis=0) if len(per) else np.zeros((0, N_PARAMS, N_PARAMS))
    F = cum[-1] if len(cum) else np.zeros((N_PARAMS, N_PARAMS))
    return FisherInfo(F, cum)


@dataclass(frozen=True)
class InfoWeights:
    gamma0: np.ndarray
    sigma_n: np.ndarray
    alpha: float = 2.0
    beta: float = 1.0
    gamma: np.ndarray | None = None

    def __post_init__(self):
        g0 = np.asarray(self.gamma0, dtype=float).reshape(N_PARAMS)
        sn = np.asarray(self.sigma_n, dtype=float).reshape(N_PARAMS)
        if np.any(g0 < 0) or np.any(sn <= 0) or self.alpha <= 0 or self.beta <= 0:
            raise ValueError("invalid information weights")
        g = g0.copy() if self.gamma is None else np.asarray(self.gamma, dtype=float).reshape(N_PARAMS)
        if np.any(g < 0):
            raise ValueError("gamma must be non-negative")
        object.__setattr__(self, "gamma0", g0)
        object.__setattr__(self, "sigma_n", sn)
        object.__setattr__(self, "gamma", g)

    @classmethod
    def off(cls) -> "InfoWeights":
        return cls(np.zeros(N_PARAMS), np.ones(N_PARAMS))


def covar_weight_values(sigma, w: InfoWeights) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    with np.errstate(divide="ignore"):
        decayed = w.gamma0 * np.exp(-w.beta * w.sigma_n / sigma)
    return np.where(sigma <= w.alpha * w.sigma_n, 0.0, decayed)


def covar_weight(belief: InertialBelief, w: InfoWeights) -> InfoWeights:
    """Per-parameter decay: zero once the std is within ``alpha`` tolerances."""
    return replace(w, gamma=covar_weight_values(belief.param_std, w))


@dataclass(frozen=True)
class LocalConfig:
    horizon: int = 40
    dt: float = 0.3
    iterations: int = 5
    position_weight: float = 10.0
    attitude_weight: float = 2.0
    velocity_weight: float = 50.0
    omega_weight: float = 2.0
    force_weight: float = 20.0
    torque_weight: float = 200.0
    terminal_scale: float = 10.0
    velocity_limit_mps: float = 0.1
    omega_limit_rps: float = 0.2
    force_limit_n: float | None = None       # per body axis; None uses the wrench limits
    limits: dyn.WrenchLimits = field(default_factory=lambda: dyn.WrenchLimits.from_rpm(2000))
    sensor_rate_hz: float = SENSOR_RATE_HZ
    excitation_block_steps: int = 16    # power of two
    excitation_fraction: float = 0.5
    obstacle_margin: float = 3.0   # linearize obstacles whose level is below this
    regularization: float = 1e-6


@dataclass(frozen=True)
class LocalPlan:
    t0: float
    x: np.ndarray
    u: np.ndarray
    dt: float
    tracking_cost: float
    info_cost: float
    iterations: int = 0
    converged: bool = False
    stationarity: float = float("nan")
    gamma: np.ndarray | None = None
    solve_time_s: float = 0.0

    @property
    def cost(self) -> float:
        return self.tracking_cost + self.info_cost

    def to_trajectory(self) -> Trajectory:
        u = np.vstack([self.u, np.zeros((1, dyn.INPUT_DIM))])
        return Trajectory(self.t0 + self.dt * np.arange(len(self.x)), self.x, u)


class _Problem:
    def __init__(self, x_now, ref_x, ref_u, belief, gamma, world, cfg, W):
        self.x0 = x_now
        self.ref_x = ref_x
        self.ref_u = ref_u
        self.cfg = cfg
        self.world = world
        self.p = dyn.InertialParams.plausible(belief.theta)
        self.theta = belief.theta
        self.F_prior = np.linalg.inv(belief.P_cov)
        self.gamma = np.asarray(gamma, dtype=float)
        self.Winv = np.linalg.inv(W)
        self.n_s = cfg.dt * cfg.sensor_rate_hz
        self.Q = np.diag([cfg.position_weight] * 3 + [cfg.attitude_weight] * 3
                         + [cfg.velocity_weight] * 3 + [cfg.omega_weight] * 3)
        self.Qf = cfg.terminal_scale * self.Q
        self.R = np.diag([cfg.force_weight] * 3 + [cfg.torque_weight] * 3)
        f_lim = cfg.limits.force if cfg.force_limit_n is None else np.full(3, cfg.force_limit_n)
        self.u_max = np.concatenate([np.minimum(f_lim, cfg.limits.force), cfg.limits.torque])

    def rollout(self, U):
        return dyn.rollout(self.x0, U, self.p, self.cfg.dt)

    def tracking(self, X, U) -> float:
        e = dyn.error_state(X, self.ref_x)
        du = U - self.ref_u
        run = np.einsum("ki,ij,kj->", e[:-1], self.Q, e[:-1]) + np.einsum("ki,ij,kj->", du, self.R, du)
        return 0.5 * float(run + e[-1] @ self.Qf @ e[-1])

    def _F(self, U):
        H = regressor(U)
        return self.F_prior + self.n_s * np.einsum("kai,ab,kbj->ij", H, self.Winv, H) + EPS_INFO * np.eye(N_PARAMS)

    def info(self, U) -> float:
        if not np.any(self.gamma):
            return 0.0
        Finv = np.linalg.inv(self._F(U))
        return float(np.sum(self.gamma * np.diag(Finv) / self.theta**2))

    def info_grad(self, U) -> np.ndarray:
        g = np.zeros_like(U)
        if not np.any(self.gamma):
            return g
        Finv = np.linalg.inv(self._F(U))
        G = Finv @ np.diag(self.gamma / self.theta**2) @ Finv
        Mk = np.einsum("ab,kbi,ij->kaj", self.Winv, regressor(U), G)   # (N, 6, 4)
        col = np.array([0, 0, 0, 1, 2, 3])
        g = -2.0 * self.n_s * Mk[:, np.arange(dyn.INPUT_DIM), col]
        return g

    def objective(self, U, X=None):
        if X is None:
            X = self.rollout(U)
        return self.tracking(X, U), self.info(U), X

    def feasible(self, X, U, tol: float = 1e-6) -> bool:
        if np.any(np.abs(U) > self.u_max + 1e-12):
            return False
        if np.any(np.abs(X[:, dyn.VEL]) > self.cfg.velocity_limit_mps + tol):
            return False
        if np.any(np.abs(X[:, dyn.OMEGA]) > self.cfg.omega_limit_rps + tol):
            return False
        r = X[:, dyn.POS]
        lo, hi = self.world.keep_in.lower, self.world.keep_in.upper
        if np.any(r < lo - tol) or np.any(r > hi + tol):
            return False
        for obs in self.world.inflated_obstacles:
            if np.any(obs.level(r) < 1.0 - tol):
                return False
        return True

    def sensitivities(self, X, U):
        """``S[k] = d(error state of x_k) / dU`` (N+1, 12, 6N)."""
        N = len(U)
        m = dyn.INPUT_DIM
        S = np.zeros((N + 1, dyn.ERROR_DIM, m * N))
        for k in range(N):
            lin = dyn.linearize_discretize(X[k], U[k], self.p, self.cfg.dt)
            S[k + 1] = lin.A @ S[k]
            S[k + 1][:, m * k: m * (k + 1)] += lin.B
        return S

    def qp_step(self, X, U, rho):
        cfg = self.cfg
        N, m = len(U), dyn.INPUT_DIM
        nv = N * m
        S = self.sensitivities(X, U)
        e = dyn.error_state(X, self.ref_x)
        Wk = [self.Q] * N + [self.Qf]
        Hm = np.zeros((nv, nv))
        g = np.zeros(nv)
        for k in range(N + 1):
            SQ = S[k].T @ Wk[k]
            Hm += SQ @ S[k]
            g += SQ @ e[k]
        Rb = np.kron(np.eye(N), self.R)
        Hm += Rb
        g += Rb @ (U - self.ref_u).reshape(-1)
        g += self.info_grad(U).reshape(-1)
        scale = max(np.trace(Hm) / nv, 1e-12)
        Hm += (rho + cfg.regularization) * scale * np.eye(nv)
        Hm = 0.5 * (Hm + Hm.T)
        rows, rhs = [], []
        # input box on U + d
        I = np.eye(nv)
        um = np.tile(self.u_max, N)
        u = U.reshape(-1)
        rows += [I, -I]
        rhs += [-um - u, -um + u]
        # velocity, rate and keep-in boxes, linearized
        lo, hi = self.world.keep_in.lower, self.world.keep_in.upper
        for k in range(1, N + 1):
            Sp = S[k][0:3]
            Sv = S[k][6:9]
            Sw = S[k][9:12]
            r, v, w = X[k, dyn.POS], X[k, dyn.VEL], X[k, dyn.OMEGA]
            vm, wm = cfg.velocity_limit_mps, cfg.omega_limit_rps
            rows += [Sp, -Sp, Sv, -Sv, Sw, -Sw]
            rhs += [lo - r, r - hi, -vm - v, v - vm, -wm - w, w - wm]
            for obs in self.world.inflated_obstacles:
                lev = float(obs.level(r))
                if lev < cfg.obstacle_margin:
                    grad = 2.0 * obs.shape_inv @ (r - obs.center)
                    rows.append((grad @ Sp)[None])
                    rhs.append(np.array([1.0 - lev]))
        C = np.vstack(rows)
        b = np.concatenate(rhs)
        # quadprog rejects dependent or all-zero rows; drop rows with no coupling
        keep = np.any(C != 0.0, axis=1)
        infeasible_const = (~keep) & (b > 0)
        if np.any(infeasible_const):
            # an uncontrollable row already violated (e.g. at k with zero sensitivity)
            b = np.where(infeasible_const, 0.0, b)
        C, b = C[keep], b[keep]
        d = quadprog.solve_qp(Hm, -g, C.T, b, 0)[0]
        return d.reshape(N, m), float(np.linalg.norm(g))


def walsh_rows(length: int = 16) -> np.ndarray:
    """Rows of a Hadamard matrix ordered by number of sign changes."""
    H = hadamard(length).astype(float)
    changes = np.sum(H[:, 1:] != H[:, :-1], axis=1)
    return H[np.argsort(changes, kind="stable")]


# (sign-change index, wrench axis): mutually orthogonal zero-mean waves so the
# force and torque channels do not alias into each other's parameters
_EXCITATION_ROWS = {0: ((3, 0), (4, 1), (5, 2)), 1: ((6, 3),), 2: ((7, 4),), 3: ((8, 5),)}


def _excitation(N: int, gamma, cfg: LocalConfig, u_max) -> np.ndarray:
    """Zero-mean orthogonal square-wave seed on the wrench axes whose parameters are weighted."""
    seed = np.zeros((N, dyn.INPUT_DIM))
    if not np.any(gamma):
        return seed
    L = cfg.excitation_block_steps
    rows = walsh_rows(L)
    n_full = (N // L) * L   # whole blocks only, so every wave stays zero-mean
    for i, g in enumerate(gamma):
        if g <= 0:
            continue
        for r, axis in _EXCITATION_ROWS[i]:
            seed[:n_full, axis] = cfg.excitation_fraction * u_max[axis] * np.tile(rows[r], N // L)
    return seed


def reference_horizon(ref: Trajectory, t0: float, N: int, dt: float):
    ts = t0 + dt * np.arange(N + 1)
    xs = ref.sample(ts)
    us = np.array([ref.input_at(t) for t in ts[:-1]])
    return xs, us


def plan_local(x_now, ref: Trajectory, belief: InertialBelief, w: InfoWeights, world: WorldModel,
               cfg: LocalConfig = LocalConfig(), t0: float = 0.0, warm: LocalPlan | None = None,
               W=None) -> LocalPlan:
    """One replan over ``cfg.horizon`` steps starting at ``t0``.

    Warm start: the previous plan shifted to ``t0`` where it overlaps, the
    reference inputs elsewhere.  When any weight is active a zero-mean
    excitation seed is added.  The returned plan never has a higher objective
    than the unseeded warm start.
    """
    start = time.perf_counter()
    x_now = np.asarray(x_now, dtype=float)
    if not point_free(x_now[dyn.POS], world):
        raise LocalPlanError("current state is in collision")
    N = cfg.horizon
    W = noise_cov() if W is None else np.asarray(W, dtype=float)
    ref_x, ref_u = reference_horizon(ref, t0, N, cfg.dt)
    prob = _Problem(x_now, ref_x, ref_u, belief, w.gamma, world, cfg, W)
    U0 = np.clip(ref_u, -prob.u_max, prob.u_max)
    if warm is not None:
        shift = int(round((t0 - warm.t0) / cfg.dt))
        if 0 <= shift < len(warm.u):
            n = min(N, len(warm.u) - shift)
            U0[:n] = np.clip(warm.u[shift:shift + n], -prob.u_max, prob.u_max)

    def evaluate(U):
        tr, inf, X = prob.objective(U)
        return tr + inf, tr, inf, X

    J0, tr0, in0, X0 = evaluate(U0)
    best = (J0, tr0, in0, X0, U0, prob.feasible(X0, U0))
    candidates = [U0]
    if np.any(w.gamma):
        candidates.append(np.clip(U0 + _excitation(N, w.gamma, cfg, prob.u_max), -prob.u_max, prob.u_max))

    stationarity = float("nan")
    converged = False
    iters = 0
    U = candidates[-1]
    J, tr, inf, X = evaluate(U)
    feas = prob.feasible(X, U)
    rho = 0.0
    for it in range(cfg.iterations):
        iters = it + 1
        try:
            d, stationarity = prob.qp_step(X, U, rho)
        except ValueError:
            rho = 10.0 * rho if rho > 0 else 1e-3
            continue
        accepted = False
        for step in (1.0, 0.5, 0.25, 0.125):
            Uc = np.clip(U + step * d, -prob.u_max, prob.u_max)
            Jc, trc, infc, Xc = evaluate(Uc)
            fc = prob.feasible(Xc, Uc)
            if (fc and (not feas or Jc < J)) or (not feas and not fc and Jc < J):
                U, J, tr, inf, X, feas = Uc, Jc, trc, infc, Xc, fc
                accepted = True
                break
        if not accepted:
            rho = 10.0 * rho if rho > 0 else 1e-3
            continue
        rho = 0.1 * rho
        if np.max(np.abs(step * d)) < 1e-9:
            converged = True
            break
    better = (feas and not best[5]) or (feas == best[5] and J <= best[0])
    if better:
        best = (J, tr, inf, X, U, feas)
    J, tr, inf, X, U, feas = best
    return LocalPlan(t0, X, U, cfg.dt, tr, inf, iters, converged, stationarity,
                     np.array(w.gamma), time.perf_counter() - start)
