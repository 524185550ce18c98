"""LQR-RRT*: RRT* with an LQR cost-to-go metric and closed-loop LQR steering."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .. import dynamics as dyn
from .. import quaternion as quat
from ..trajectory import Trajectory
from ..world import CheckResolution, WorldModel, positions_free, trajectory_free
from .steer import SteerModel, SteerWeights, path_cost, track, velocity_ok, within_tolerance


class NoPathError(RuntimeError):
    """Planner budget exhausted (or goal unreachable) without a solution."""

    def __init__(self, message: str, stats: dict | None = None):
        super().__init__(message)
        self.stats = stats or {}


@dataclass(frozen=True)
class GoalTolerance:
    position_m: float = 0.05
    velocity_mps: float = 0.05
    attitude_deg: float = 10.0

    def reached(self, x, x_goal) -> bool:
        return within_tolerance(x, x_goal, self.position_m, self.velocity_mps,
                                np.deg2rad(self.attitude_deg))


@dataclass(frozen=True)
class RrtConfig:
    max_samples: int = 2000
    gamma: float = 2.5
    goal_bias: float = 0.1
    max_step_m: float = 0.3
    dt_s: float = 0.2
    t_max_s: float = 30.0
    velocity_limit_mps: float = 0.1
    sample_velocity_mps: float = 0.1
    attitude_sampling: str = "yaw"
    near_max: int = 10
    connect_tol: float = 5e-3
    goal_connect_radius_m: float = 1.0
    goal: GoalTolerance = field(default_factory=GoalTolerance)
    resolution: CheckResolution = field(default_factory=CheckResolution)
    collision_mode: str = "point"
    time_weight: float = 1.0
    effort_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.attitude_sampling not in ("yaw", "full", "fixed"):
            raise ValueError(f"unknown attitude sampling {self.attitude_sampling!r}")
        if self.max_samples < 1 or self.max_step_m <= 0 or self.dt_s <= 0:
            raise ValueError("invalid planner budget or step settings")


@dataclass
class PlanTree:
    """Growing RRT* tree; node ``i`` stores its state, parent and incoming edge."""

    states: list = field(default_factory=list)
    parent: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    edge_cost: list = field(default_factory=list)
    edges: list = field(default_factory=list)
    children: list = field(default_factory=list)

    def add(self, x, parent: int, cost: float, edge_cost: float, edge) -> int:
        self.states.append(np.asarray(x, dtype=float))
        self.parent.append(parent)
        self.cost.append(float(cost))
        self.edge_cost.append(float(edge_cost))
        self.edges.append(edge)
        self.children.append(set())
        if parent >= 0:
            self.children[parent].add(len(self.states) - 1)
        self._stack = None
        return len(self.states) - 1

    def __len__(self) -> int:
        return len(self.states)

    def state_array(self) -> np.ndarray:
        if getattr(self, "_stack", None) is None or len(self._stack) != len(self.states):
            self._stack = np.array(self.states)
        return self._stack

    def ancestors(self, i: int) -> set:
        out = set()
        while self.parent[i] >= 0:
            i = self.parent[i]
            out.add(i)
        return out

    def reparent(self, i: int, new_parent: int, edge_cost: float, edge) -> None:
        old = self.parent[i]
        if new_parent == i or i in self.ancestors(new_parent):
            raise ValueError("rewire would create a cycle")
        self.children[old].discard(i)
        self.children[new_parent].add(i)
        self.parent[i] = new_parent
        self.edge_cost[i] = float(edge_cost)
        self.edges[i] = edge
        delta = self.cost[new_parent] + edge_cost - self.cost[i]
        stack = [i]
        while stack:
            j = stack.pop()
            self.cost[j] += delta
            stack.extend(self.children[j])

    def path_to(self, i: int) -> list:
        path = [i]
        while self.parent[path[-1]] >= 0:
            path.append(self.parent[path[-1]])
        return path[::-1]

    def consistent(self, tol: float = 1e-9) -> bool:
        for i, par in enumerate(self.parent):
            if par < 0:
                if self.cost[i] != 0.0:
                    return False
            elif abs(self.cost[i] - self.cost[par] - self.edge_cost[i]) > tol:
                return False
        return True

    def dump_jsonl(self, fh) -> None:
        for i, x in enumerate(self.states):
            fh.write(json.dumps({"node": i, "parent": self.parent[i], "cost": self.cost[i],
                                 "state": np.asarray(x).tolist()}) + "\n")


def lqr_nearest(tree: PlanTree, x_rand, model: SteerModel) -> int:
    """Node with the smallest LQR cost-to-go toward ``x_rand`` (lowest index on ties)."""
    if len(tree) == 0:
        raise ValueError("empty tree")
    d = model.value(tree.state_array(), np.asarray(x_rand))
    return int(np.argmin(d))


def lqr_steer(x_from, x_to, model: SteerModel, t_max: float) -> Trajectory:
    """Closed-loop LQR rollout toward ``x_to`` truncated at ``t_max``."""
    x_from = np.asarray(x_from, dtype=float)
    x_to = np.asarray(x_to, dtype=float)
    if np.max(np.abs(dyn.error_state(x_from, x_to))) == 0.0:
        return Trajectory.stationary(x_from)
    n_cap = max(1, min(model.n_max, int(np.floor(t_max / model.dt + 1e-9))))
    n = int(min(model.horizon_for(x_from, x_to)[0], n_cap))
    xs, us = model.steer(x_from, x_to, n)
    us[0, -1] = 0.0
    return Trajectory(model.dt * np.arange(n + 1), xs[0], us[0])


class LqrRrtStar:
    """Seeded, single-threaded LQR-RRT* planner instance."""

    def __init__(self, world: WorldModel, cfg: RrtConfig = RrtConfig(),
                 p: dyn.InertialParams = dyn.InertialParams(),
                 limits: dyn.WrenchLimits = dyn.WrenchLimits.from_rpm(2000),
                 weights: SteerWeights = SteerWeights()):
        self.world = world
        self.cfg = cfg
        self.p = p
        self.limits = limits
        n_max = int(round(cfg.t_max_s / cfg.dt_s))
        self.model = SteerModel(p, limits, cfg.dt_s, n_max, weights)
        self.rng = np.random.default_rng(cfg.seed)
        self.tree = PlanTree()
        self.stats = {"samples": 0, "nodes": 0, "rewires": 0, "goal_attempts": 0}

    # sampling -------------------------------------------------------------
    def _sample(self, x_goal) -> np.ndarray:
        cfg, rng = self.cfg, self.rng
        if rng.random() < cfg.goal_bias:
            return np.array(x_goal, dtype=float)
        box = self.world.keep_in
        r = rng.uniform(box.lower, box.upper)
        v = rng.uniform(-cfg.sample_velocity_mps, cfg.sample_velocity_mps, 3)
        if cfg.attitude_sampling == "yaw":
            q = quat.from_yaw(rng.uniform(-np.pi, np.pi))
        elif cfg.attitude_sampling == "full":
            q = quat.normalize(rng.normal(size=4))
        else:
            q = np.array(x_goal[dyn.ATT])
        return dyn.make_state(r, q, v)

    def _clip(self, x_rand, x_near) -> np.ndarray:
        d = x_rand[dyn.POS] - x_near[dyn.POS]
        dist = float(np.linalg.norm(d))
        if dist <= self.cfg.max_step_m:
            return x_rand
        out = x_rand.copy()
        out[dyn.POS] = x_near[dyn.POS] + d * (self.cfg.max_step_m / dist)
        frac = self.cfg.max_step_m / dist
        out[dyn.ATT] = quat.slerp(x_near[dyn.ATT], x_rand[dyn.ATT], frac)
        return out

    # edges ------------------------------------------------------------------
    def _edges(self, X0, target, steps=None):
        """Steer rows of ``X0`` to ``target``; returns per-row (xs, us, n, cost, ok)."""
        X0 = np.atleast_2d(X0)
        if steps is None:
            steps = self.model.horizon_for(X0, target)
        xs, us = self.model.steer(X0, target, steps)
        cfg = self.cfg
        out = []
        for b in range(len(X0)):
            n = int(steps[b])
            ex, eu = xs[b, :n + 1], us[b, :n + 1].copy()
            eu[-1] = 0.0
            un = eu[:-1] / self.limits.vector
            c = float(np.sum(cfg.dt_s * (cfg.time_weight + 0.5 * cfg.effort_weight * np.sum(un * un, axis=1))))
            ok = bool(velocity_ok(ex[None], cfg.velocity_limit_mps)[0]) and self._edge_free(ex)
            out.append((ex, eu, n, c, ok))
        return out

    def _edge_free(self, xs) -> bool:
        traj = Trajectory(self.cfg.dt_s * np.arange(len(xs)), xs, np.zeros((len(xs), dyn.INPUT_DIM)))
        return trajectory_free(traj, self.world, self.cfg.resolution, self.cfg.collision_mode)

    def _reached(self, x_end, target) -> bool:
        return float(np.max(np.abs(dyn.error_state(x_end, target)))) <= self.cfg.connect_tol

    def _near(self, x_new) -> np.ndarray:
        n = len(self.tree)
        nx = dyn.ERROR_DIM
        radius = self.cfg.gamma * (np.log(n) / n) ** (1.0 / nx) if n > 1 else self.cfg.gamma
        X = self.tree.state_array()
        d = self.model.value(X, x_new) - self.model.value(x_new, x_new)
        idx = np.nonzero(d <= radius)[0]
        idx = idx[np.argsort(d[idx], kind="stable")][: self.cfg.near_max]
        return idx

    # main loop ---------------------------------------------------------------
    def plan(self, x0, x_goal) -> Trajectory:
        x0 = np.asarray(x0, dtype=float)
        x_goal = np.asarray(x_goal, dtype=float)
        mode = self.cfg.collision_mode
        if not positions_free(x0[dyn.POS], self.world, mode):
            raise ValueError("start state is in collision")
        if not positions_free(x_goal[dyn.POS], self.world, mode):
            raise NoPathError("goal state is in collision", dict(self.stats))
        self._goal = x_goal
        tree = self.tree
        tree.add(x0, -1, 0.0, 0.0, None)
        if self.cfg.goal.reached(x0, x_goal):
            return Trajectory.stationary(x0)
        result = self._try_goal(0, x_goal)
        if result is not None:
            return result
        for _ in range(self.cfg.max_samples):
            self.stats["samples"] += 1
            x_rand = self._sample(x_goal)
            i_near = lqr_nearest(tree, x_rand, self.model)
            x_rand = self._clip(x_rand, tree.states[i_near])
            ex, eu, n, c, ok = self._edges(tree.states[i_near], x_rand)[0]
            if not ok:
                continue
            x_new = ex[-1]
            if np.max(np.abs(dyn.error_state(x_new, tree.states[i_near]))) < 1e-6:
                continue
            new = self._insert(x_new, i_near, (ex, eu), c)
            result = self._try_goal(new, x_goal)
            if result is not None:
                return result
        self.stats["nodes"] = len(tree)
        raise NoPathError(f"no path found after {self.cfg.max_samples} samples", dict(self.stats))

    def _insert(self, x_new, i_near, edge, c_edge) -> int:
        tree = self.tree
        near = [int(i) for i in self._near(x_new) if i != i_near]
        best_parent, best_cost, best_edge, best_state = i_near, tree.cost[i_near] + c_edge, edge, x_new
        if near:
            cand = self._edges(np.array([tree.states[i] for i in near]), x_new)
            for i, (ex, eu, n, c, ok) in zip(near, cand):
                if ok and self._reached(ex[-1], x_new) and tree.cost[i] + c < best_cost:
                    best_parent, best_cost, best_edge, best_state = i, tree.cost[i] + c, (ex, eu), ex[-1]
        new = tree.add(best_state, best_parent, best_cost, best_cost - tree.cost[best_parent], best_edge)
        # rewire
        rewire = [i for i in near if i != best_parent and i not in tree.ancestors(new)]
        if rewire:
            for i in rewire:
                ex, eu, n, c, ok = self._edges(best_state, tree.states[i])[0]
                if ok and self._reached(ex[-1], tree.states[i]) and tree.cost[new] + c < tree.cost[i] - 1e-12:
                    tree.reparent(i, new, c, (ex, eu))
                    self.stats["rewires"] += 1
        return new

    def _try_goal(self, i: int, x_goal):
        x = self.tree.states[i]
        if np.linalg.norm(x[dyn.POS] - x_goal[dyn.POS]) > self.cfg.goal_connect_radius_m:
            return None
        self.stats["goal_attempts"] += 1
        ex, eu, n, c, ok = self._edges(x, x_goal)[0]
        if not ok or not self.cfg.goal.reached(ex[-1], x_goal):
            return None
        g = self.tree.add(ex[-1], i, self.tree.cost[i] + c, c, (ex, eu))
        traj = self._extract(g)
        if traj is None:
            return None
        self.stats["nodes"] = len(self.tree)
        return traj

    def _extract(self, i_goal: int):
        path = self.tree.path_to(i_goal)
        xs = [self.tree.states[0][None]]
        us = []
        for i in path[1:]:
            ex, eu = self.tree.edges[i]
            xs.append(ex[1:])
            us.append(eu[:-1])
        xs = np.vstack(xs)
        us = np.vstack(us + [np.zeros((1, dyn.INPUT_DIM))])
        ref = Trajectory(self.cfg.dt_s * np.arange(len(xs)), xs, us)
        traj = track(ref, xs[0], self.model)
        ok = (trajectory_free(traj, self.world, self.cfg.resolution, self.cfg.collision_mode)
              and bool(velocity_ok(traj.x[None], self.cfg.velocity_limit_mps)[0])
              and self.cfg.goal.reached(traj.x[-1], self._goal))
        return traj if ok else None


def lqr_rrt_star(x0, x_goal, world: WorldModel, cfg: RrtConfig = RrtConfig(),
                 p: dyn.InertialParams = dyn.InertialParams(),
                 limits: dyn.WrenchLimits = dyn.WrenchLimits.from_rpm(2000)) -> Trajectory:
    """Plan from ``x0`` to ``x_goal``; raises :class:`NoPathError` on failure."""
    return LqrRrtStar(world, cfg, p, limits).plan(x0, x_goal)
