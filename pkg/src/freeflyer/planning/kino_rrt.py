"""Guided kinodynamic RRT over constant-wrench motion primitives."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .. import dynamics as dyn
from ..trajectory import Trajectory
from ..world import CheckResolution, WorldModel, positions_free, trajectory_free
from .lqr_rrt import NoPathError


@dataclass(frozen=True)
class MotionPrimitiveSet:
    """The zero wrench plus +/- ``c`` times the limit on each actuated axis."""

    actions: np.ndarray
    t_a: float = 2.0
    c: float = 0.5
    dt: float = 0.2

    def __post_init__(self):
        acts = np.asarray(self.actions, dtype=float).reshape(-1, dyn.INPUT_DIM)
        if len(acts) % 2 != 1 or np.any(acts[0] != 0.0):
            raise ValueError("primitive set must be the zero action plus +/- pairs")
        if not 0.0 <= self.c <= 1.0 or self.t_a <= 0 or self.dt <= 0:
            raise ValueError("invalid primitive scale or durations")
        if abs(self.t_a / self.dt - round(self.t_a / self.dt)) > 1e-9:
            raise ValueError("t_a must be a multiple of dt")
        object.__setattr__(self, "actions", acts)

    @classmethod
    def from_limits(cls, limits: dyn.WrenchLimits, c: float = 0.5, t_a: float = 2.0,
                    dt: float = 0.2, axes=(0, 1, 2)) -> "MotionPrimitiveSet":
        """Actions on the listed wrench axes (0-2 force, 3-5 torque)."""
        lim = limits.vector
        acts = [np.zeros(dyn.INPUT_DIM)]
        for a in axes:
            for sign in (1.0, -1.0):
                u = np.zeros(dyn.INPUT_DIM)
                u[a] = sign * c * lim[a]
                acts.append(u)
        return cls(np.array(acts), t_a, c, dt)

    @property
    def steps(self) -> int:
        return int(round(self.t_a / self.dt))

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class KinoConfig:
    max_iterations: int = 4000
    goal_bias: float = 0.1
    position_weight: float = 1.0
    velocity_weight: float = 2.0
    goal_position_m: float = 0.05
    goal_velocity_mps: float = 0.05
    velocity_limit_mps: float = 0.1
    sample_velocity_mps: float = 0.1
    resolution: CheckResolution = field(default_factory=CheckResolution)
    collision_mode: str = "ellipsoid"
    time_budget_s: float | None = None
    sample_margin_m: float | None = 0.5
    goal_extend_steps: int = 20
    seed: int = 0


def _weights(cfg: KinoConfig) -> np.ndarray:
    return np.array([cfg.position_weight] * 3 + [cfg.velocity_weight] * 3)


def _features(x) -> np.ndarray:
    x = np.asarray(x)
    return np.concatenate([x[..., dyn.POS], x[..., dyn.VEL]], axis=-1)


def weighted_distance(x, x_ref, cfg: KinoConfig) -> np.ndarray:
    """``||x - x_ref||_w`` over position and velocity."""
    d = (_features(x) - _features(x_ref)) * _weights(cfg)
    return np.sqrt(np.sum(d * d, axis=-1))


def guided_steer(x_near, x_rand, mp: MotionPrimitiveSet, p: dyn.InertialParams, cfg: KinoConfig):
    """Integrate every primitive for ``t_a`` and pick the closest approach to ``x_rand``.

    The approach of a primitive is its minimum distance over the knots after
    the start.  Returns ``(index, knot, states (k, steps + 1, 13), distances
    (k,))``; the chosen edge ends at ``knot``.  Ties go to the lowest index, so
    the zero action loses to any strictly better primitive.
    """
    k = len(mp)
    X = np.repeat(np.asarray(x_near, dtype=float)[None], k, axis=0)
    xs = np.empty((k, mp.steps + 1, dyn.STATE_DIM))
    xs[:, 0] = X
    for i in range(mp.steps):
        X = dyn.step_rk4(X, mp.actions, p, mp.dt)
        xs[:, i + 1] = X
    along = weighted_distance(xs[:, 1:], x_rand, cfg)
    knot = np.argmin(along, axis=1)
    dist = along[np.arange(k), knot]
    j = int(np.argmin(dist))
    return j, int(knot[j]) + 1, xs, dist


def _goal_reached(x, x_goal, cfg: KinoConfig) -> np.ndarray:
    x = np.asarray(x)
    dp = np.linalg.norm(x[..., dyn.POS] - x_goal[dyn.POS], axis=-1)
    dv = np.linalg.norm(x[..., dyn.VEL] - x_goal[dyn.VEL], axis=-1)
    return (dp <= cfg.goal_position_m) & (dv <= cfg.goal_velocity_mps)


def kino_rrt(x0, x_goal, world: WorldModel, mp: MotionPrimitiveSet, cfg: KinoConfig = KinoConfig(),
             p: dyn.InertialParams = dyn.InertialParams(), log=None) -> Trajectory:
    """Grow a primitive tree from ``x0`` until a knot lands within the goal tolerance.

    ``log`` (optional list) receives one record per expansion for offline
    checking of the primitive choice.
    """
    x0 = np.asarray(x0, dtype=float)
    x_goal = np.asarray(x_goal, dtype=float)
    if not positions_free(x0[dyn.POS], world, cfg.collision_mode):
        raise ValueError("start state is in collision")
    if not positions_free(x_goal[dyn.POS], world, cfg.collision_mode):
        raise NoPathError("goal state is in collision", {"iterations": 0})
    if _goal_reached(x0, x_goal, cfg):
        return Trajectory.stationary(x0)
    rng = np.random.default_rng(cfg.seed)
    lo, hi = world.keep_in.lower, world.keep_in.upper
    if cfg.sample_margin_m is not None:
        # sample around the start/goal bounding box, clipped to the keep-in volume
        ends = np.array([x0[dyn.POS], x_goal[dyn.POS]])
        lo = np.maximum(lo, ends.min(axis=0) - cfg.sample_margin_m)
        hi = np.minimum(hi, ends.max(axis=0) + cfg.sample_margin_m)
    nodes = [x0]
    feats = [_features(x0)]
    parent = [-1]
    edges = [None]
    w = _weights(cfg)
    start = time.perf_counter()
    def extend(i_near, x_rand):
        """One guided expansion; returns (new node index or None, goal hit)."""
        j, knot, xs, dist = guided_steer(nodes[i_near], x_rand, mp, p, cfg)
        if log is not None:
            log.append({"node": i_near, "x_near": np.array(nodes[i_near]), "x_rand": np.array(x_rand),
                        "choice": j, "distances": dist})
        if dist[j] >= float(weighted_distance(nodes[i_near], x_rand, cfg)):
            return None, False  # trapped: no primitive makes progress toward the sample
        ex = xs[j, : knot + 1]
        if np.any(np.abs(ex[:, dyn.VEL]) > cfg.velocity_limit_mps + 1e-12):
            return None, False
        eu = np.repeat(mp.actions[j][None], len(ex), axis=0)
        hit = np.nonzero(_goal_reached(ex[1:], x_goal, cfg))[0]
        if len(hit):
            ex, eu = ex[: hit[0] + 2], eu[: hit[0] + 2]
        eu[-1] = 0.0
        seg = Trajectory(mp.dt * np.arange(len(ex)), ex, eu)
        if not trajectory_free(seg, world, cfg.resolution, cfg.collision_mode):
            return None, False
        nodes.append(ex[-1])
        feats.append(_features(ex[-1]))
        parent.append(i_near)
        edges.append((ex, eu))
        return len(nodes) - 1, bool(len(hit))

    it = -1
    for it in range(cfg.max_iterations):
        if cfg.time_budget_s is not None and time.perf_counter() - start > cfg.time_budget_s:
            break
        if rng.random() < cfg.goal_bias:
            x_rand = x_goal
        else:
            x_rand = dyn.make_state(rng.uniform(lo, hi),
                                    v=rng.uniform(-cfg.sample_velocity_mps, cfg.sample_velocity_mps, 3))
        F = np.array(feats)
        d = (F - _features(x_rand)) * w
        i_near = int(np.argmin(np.sum(d * d, axis=1)))
        new, hit = extend(i_near, x_rand)
        # greedy follow-up toward the goal from the fresh node
        for _ in range(cfg.goal_extend_steps):
            if new is None or hit:
                break
            new, hit = extend(new, x_goal)
        if hit:
            return _assemble(len(nodes) - 1, nodes, parent, edges, mp.dt)
    err = NoPathError("kinodynamic RRT budget exhausted",
                      {"iterations": it + 1, "nodes": len(nodes)})
    err.tree_states = np.array(nodes)
    raise err


def _assemble(i, nodes, parent, edges, dt) -> Trajectory:
    chain = []
    while parent[i] >= 0:
        chain.append(i)
        i = parent[i]
    xs = [nodes[0][None]]
    us = []
    for k in reversed(chain):
        ex, eu = edges[k]
        xs.append(ex[1:])
        us.append(eu[:-1])
    xs = np.vstack(xs)
    us = np.vstack(us + [np.zeros((1, dyn.INPUT_DIM))])
    return Trajectory(dt * np.arange(len(xs)), xs, us)
