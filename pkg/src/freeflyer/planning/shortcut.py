"""Randomized LQR shortcutting of a dynamically consistent trajectory."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import dynamics as dyn
from ..trajectory import Trajectory
from ..world import CheckResolution, WorldModel, trajectory_free
from .steer import SteerModel, SteerWeights, path_cost, track, velocity_ok


@dataclass(frozen=True)
class ShortcutConfig:
    iterations: int = 60
    min_gap_steps: int = 5
    velocity_limit_mps: float = 0.1
    end_tol: float = 5e-3
    time_weight: float = 1.0
    effort_weight: float = 1.0
    resolution: CheckResolution = field(default_factory=CheckResolution)
    collision_mode: str = "point"
    t_max_s: float = 30.0
    seed: int = 0


def shortcut(traj: Trajectory, world: WorldModel, cfg: ShortcutConfig = ShortcutConfig(),
             p: dyn.InertialParams = dyn.InertialParams(),
             limits: dyn.WrenchLimits = dyn.WrenchLimits.from_rpm(2000),
             model: SteerModel | None = None) -> Trajectory:
    """Replace random sub-arcs by LQR connections when that lowers the path cost.

    Each candidate steers from knot ``a`` toward knot ``b``; the remainder of the
    path is re-integrated in closed loop from the new junction so the result
    stays exactly consistent with the integrator.  A candidate is kept only
    if it is collision-free, within the velocity box, ends within ``end_tol``
    of the original final state, and strictly lowers the cost.
    """
    if len(traj) < 3:
        return traj
    dts = np.diff(traj.t)
    dt = float(dts[0])
    if not np.allclose(dts, dt):
        raise ValueError("shortcut needs a uniformly sampled trajectory")
    if model is None:
        model = SteerModel(p, limits, dt, int(round(cfg.t_max_s / dt)), SteerWeights())
    rng = np.random.default_rng(cfg.seed)
    goal = traj.x[-1].copy()

    def cost(tr):
        return path_cost(tr, limits, cfg.time_weight, cfg.effort_weight)

    best = traj
    best_cost = cost(best)
    for _ in range(cfg.iterations):
        n = len(best)
        if n - 1 < cfg.min_gap_steps:
            break
        a = int(rng.integers(0, n - cfg.min_gap_steps))
        b = int(rng.integers(a + cfg.min_gap_steps, n))
        xa, xb = best.x[a], best.x[b]
        steps = int(model.horizon_for(xa, xb)[0])
        if steps >= b - a:
            continue
        xs, us = model.steer(xa, xb, steps)
        seg_x, seg_u = xs[0], us[0]
        # cheap screen with the unmodified suffix before re-integrating it
        seg = Trajectory(dt * np.arange(steps + 1), seg_x, seg_u)
        seg_cost = path_cost(seg, limits, cfg.time_weight, cfg.effort_weight)
        approx = cost(best.slice(0, a + 1)) + seg_cost + cost(best.slice(b))
        if approx >= best_cost:
            continue
        if not (velocity_ok(seg_x[None], cfg.velocity_limit_mps)[0]
                and trajectory_free(seg, world, cfg.resolution, cfg.collision_mode)):
            continue
        ref_x = np.vstack([best.x[:a], seg_x, best.x[b + 1:]])
        ref_u = np.vstack([best.u[:a], seg_u[:-1], best.u[b:]])
        ref = Trajectory(best.t[0] + dt * np.arange(len(ref_x)), ref_x, ref_u)
        cand = _retrack(ref, a + steps, model)
        if np.max(np.abs(dyn.error_state(cand.x[-1], goal))) > cfg.end_tol:
            continue
        c = cost(cand)
        if c >= best_cost:
            continue
        if not (velocity_ok(cand.x[None], cfg.velocity_limit_mps)[0]
                and trajectory_free(cand, world, cfg.resolution, cfg.collision_mode)):
            continue
        best, best_cost = cand, c
    return best


def _retrack(ref: Trajectory, join: int, model: SteerModel) -> Trajectory:
    """Keep knots up to ``join`` and re-integrate the rest while tracking ``ref``."""
    tail = track(ref.slice(join), ref.x[join], model)
    head = ref.slice(0, join + 1)
    u = np.vstack([head.u[:-1], tail.u])
    return Trajectory(ref.t, np.vstack([head.x[:-1], tail.x]), u)
