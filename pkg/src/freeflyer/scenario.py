"""Deterministic three-segment assembly scenario.

A-B: offline plan, standard MPC, no learning.
B-C: payload picked up at B; online global plan, information-aware local
     replanning, tube MPC and online parameter estimation.
C-A: offline plan tracked by tube MPC with the learned model.

The truth state advances only through the RK4 integrator on a fixed base
tick; controllers see it through the sensor model.  Every random stream is
spawned from one seed, so a run is reproducible bit for bit.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from . import quaternion as quat
from . import tube
from .config import ScenarioConfig
from .estimator import (CtlRecord, InertialBelief, LocRecord, OnlineEstimator, OutlierGate,
                        noise_cov)
from .info_planner import (InfoWeights, LocalConfig, LocalPlan, LocalPlanError, covar_weight,
                           fisher_info, plan_local)
from .planning.kino_rrt import KinoConfig, MotionPrimitiveSet, kino_rrt
from .planning.lqr_rrt import NoPathError, RrtConfig, lqr_rrt_star
from .planning.shortcut import ShortcutConfig, shortcut
from .planning.steer import SteerModel, SteerWeights
from .telemetry import CsvLog, NullLog, stream_row
from .trajectory import Trajectory
from .world import Box, CheckResolution, Ellipsoid, WorldModel, point_free, trajectory_free

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NO_PATH = 3
EXIT_TUBE_INFEASIBLE = 4
EXIT_TIMEOUT = 5

BASE_TICK_S = 0.008
LOC_TICKS = 2          # 62.5 Hz localization
CTL_TICKS = 25         # 5 Hz control


@dataclass(frozen=True)
class SegmentFlags:
    name: str
    online_planning: bool
    robust_tracking: bool
    model_improvement: bool


SEGMENT_TABLE = (
    SegmentFlags("A-B", False, False, False),
    SegmentFlags("B-C", True, True, True),
    SegmentFlags("C-A", False, True, False),
)


@dataclass(frozen=True)
class ScenarioSpec:
    cfg: ScenarioConfig
    world: WorldModel
    waypoints: dict
    params_before: dyn.InertialParams
    params_after: dyn.InertialParams
    limits: dyn.WrenchLimits
    segments: tuple = SEGMENT_TABLE
    gamma_mode: str = "auto"
    fixed_gamma: float = 1.0
    tube_enabled: bool = True
    offline_planner: str = "lqr-rrt-star"

    @classmethod
    def from_config(cls, cfg: ScenarioConfig) -> "ScenarioSpec":
        wc = cfg.world
        world = WorldModel(Box.around(wc.keep_in_center_m, wc.keep_in_half_extent_m),
                           tuple(Ellipsoid.sphere(o.center_m, o.radius_m) for o in wc.obstacles),
                           wc.robot_radius_m)
        q = quat.from_yaw(np.deg2rad(cfg.waypoints.yaw_deg))
        wps = {k: dyn.make_state(getattr(cfg.waypoints, f"{k.lower()}_m"), q) for k in "ABC"}
        rc, pc = cfg.robot, cfg.payload
        before = dyn.InertialParams(rc.mass_kg, np.diag(rc.inertia_kgm2))
        after = dyn.InertialParams(rc.mass_kg + pc.mass_kg,
                                   np.diag(np.asarray(rc.inertia_kgm2) * np.asarray(pc.inertia_scale)),
                                   pc.com_offset_m)
        return cls(cfg, world, wps, before, after, dyn.WrenchLimits.from_rpm(rc.thrust_rpm),
                   gamma_mode=cfg.info.mode, fixed_gamma=cfg.info.fixed_gamma,
                   tube_enabled=cfg.segments.tube, offline_planner=cfg.planner.offline)

    def blocked_waypoints(self) -> list:
        """Waypoints in collision; segments touching them end as ``no_path``."""
        return [k for k, x in self.waypoints.items() if not point_free(x[dyn.POS], self.world)]

    def segment(self, name: str) -> SegmentFlags:
        for s in self.segments:
            if s.name == name:
                return s
        raise KeyError(name)

    def endpoints(self, name: str):
        a, b = name.split("-")
        return self.waypoints[a], self.waypoints[b]

    def prior_belief(self) -> InertialBelief:
        return InertialBelief.from_params(self.params_before.vector, self.cfg.estimator.prior_rel_std)

    def info_weights(self) -> InfoWeights:
        ic = self.cfg.info
        w = InfoWeights(ic.gamma0, ic.sigma_n, ic.alpha, ic.beta)
        if self.gamma_mode == "off":
            return InfoWeights.off()
        if self.gamma_mode == "fixed":
            g = np.full(4, self.fixed_gamma)
            return InfoWeights(g, ic.sigma_n, ic.alpha, ic.beta)
        return w

    @property
    def plan_force(self) -> float:
        """Per-axis force budget for reference plans, below the tightened tube input box."""
        return 0.5 * tube.inertial_force_bound(self.limits)


class Streams:
    """Independent generators spawned from the scenario seed."""

    NAMES = ("disturbance", "sensor", "jump", "latency", "offline_plan", "online_plan", "shortcut")

    def __init__(self, seed: int):
        children = np.random.SeedSequence(seed).spawn(len(self.NAMES))
        for name, ss in zip(self.NAMES, children):
            setattr(self, name, np.random.default_rng(ss))

    def seed_for(self, name: str) -> int:
        return int(getattr(self, name).integers(0, 2**31 - 1))


class TruthState:
    """Exact simulated state; advanced only by :meth:`advance`."""

    def __init__(self, x, params: dyn.InertialParams):
        self._x = np.array(x, dtype=float)
        self.params = params
        self.applied = []   # (t, body wrench incl. disturbance)

    @property
    def x(self) -> np.ndarray:
        return self._x.copy()

    def advance(self, u_body, dt: float) -> None:
        self._x = dyn.step_rk4(self._x, u_body, self.params, dt)

    def swap_payload(self, params: dyn.InertialParams) -> None:
        self.params = params


class SensorModel:
    """Pose/velocity sensing with white noise, localization jumps and acceleration scaling."""

    def __init__(self, cfg, rng_noise, rng_jump):
        self.cfg = cfg
        self.rng = rng_noise
        self.rng_jump = rng_jump
        self.scale = np.asarray(cfg.accel_scale, dtype=float)
        self.jump_until = -np.inf
        self.jump_dr = np.zeros(3)
        self.jump_dth = np.zeros(3)
        self._spike = None
        self._v_meas = None
        self._v_prev = None

    def maybe_jump(self, t: float) -> bool:
        """Draw the jump process once per control step; True when a jump starts."""
        c = self.cfg
        if self.rng_jump.random() >= c.jump_probability or t < self.jump_until:
            return False
        d = self.rng_jump.normal(size=3)
        d /= np.linalg.norm(d)
        a = self.rng_jump.normal(size=3)
        a /= np.linalg.norm(a)
        self.jump_dr = d * self.rng_jump.uniform(*c.jump_position_m)
        self.jump_dth = a * np.deg2rad(self.rng_jump.uniform(*c.jump_attitude_deg))
        self.jump_until = t + c.jump_duration_s
        self._spike = (self.jump_dr / c.jump_filter_s, self.jump_dth / c.jump_filter_s)
        return True

    def jump_active(self, t: float) -> bool:
        return t < self.jump_until

    def estimate(self, x, t: float) -> np.ndarray:
        """State estimate handed to the controllers."""
        c = self.cfg
        xh = np.array(x, dtype=float)
        xh[dyn.POS] += c.position_std_m * self.rng.normal(size=3)
        dth = c.attitude_std_rad * self.rng.normal(size=3)
        xh[dyn.VEL] += c.velocity_std_mps * self.rng.normal(size=3)
        xh[dyn.OMEGA] += c.omega_std_rps * self.rng.normal(size=3)
        if self.jump_active(t):
            xh[dyn.POS] += self.jump_dr
            dth = dth + self.jump_dth
        xh[dyn.ATT] = quat.mul(xh[dyn.ATT], quat.from_rotvec(dth))
        return xh

    def localization(self, x, t: float) -> LocRecord:
        """Record for the estimator: velocity, attitude, body rate."""
        c = self.cfg
        v = x[dyn.VEL]
        if self._v_meas is None or np.all(self.scale == 1.0):
            v_meas = v.copy()
        else:
            # scaled velocity increments emulate a per-axis acceleration scale in the body frame
            dv = quat.rotate_inverse(x[dyn.ATT], v - self._v_prev)
            v_meas = self._v_meas + quat.rotate(x[dyn.ATT], self.scale * dv)
        self._v_prev = v.copy()
        self._v_meas = v_meas.copy()
        v_out = v_meas + c.velocity_std_mps * self.rng.normal(size=3)
        w_out = x[dyn.OMEGA] + c.omega_std_rps * self.rng.normal(size=3)
        if self._spike is not None:
            v_out = v_out + self._spike[0]
            w_out = w_out + self._spike[1]
            self._spike = None
        return LocRecord(t, v_out, x[dyn.ATT].copy(), w_out)


@dataclass
class SegmentResult:
    name: str
    success: bool
    status: str                   # ok | no_path | tube_infeasible | timeout
    duration_s: float
    terminal_position_error_m: float
    max_tracking_error_m: float
    tube_violations: int
    fallbacks: int
    saturated_steps: int
    control_steps: int
    final_state: np.ndarray
    belief: InertialBelief | None = None
    plan_stats: dict = field(default_factory=dict)
    estimator_stats: dict = field(default_factory=dict)
    info_stats: dict = field(default_factory=dict)
    executed: Trajectory | None = None
    executed_free: bool = True
    timing: dict = field(default_factory=dict)
    gamma_history: list = field(default_factory=list)
    fim_history: list = field(default_factory=list)


def axis_bounds(spec: ScenarioSpec) -> tube.AxisBounds:
    w = spec.world
    return tube.AxisBounds.from_limits(w.keep_in.lower, w.keep_in.upper, spec.cfg.control.velocity_limit_mps,
                                       tube.inertial_force_bound(spec.limits))


def tube_spec_for(spec: ScenarioSpec, mass: float, robust: bool) -> tube.TubeSpec:
    cc = spec.cfg.control
    X = axis_bounds(spec)
    if not (robust and spec.tube_enabled):
        return tube.TubeSpec.standard(X)
    ltv = tube.axis_model(mass, cc.period_s)
    W = tube.DisturbanceSet.from_force(spec.cfg.noise.disturbance_force_n + cc.model_margin_n, ltv)
    anc = tube.axis_cost(cc.ancillary_position_weight, cc.ancillary_velocity_weight, cc.ancillary_force_weight)
    return tube.TubeSpec.build(ltv, anc, W, X)


def mpc_config(spec: ScenarioSpec) -> tube.MpcConfig:
    cc = spec.cfg.control
    return tube.MpcConfig(cc.horizon, cc.period_s, cc.position_weight, cc.velocity_weight, cc.force_weight)


def plan_limits(spec: ScenarioSpec) -> dyn.WrenchLimits:
    return dyn.WrenchLimits(np.full(3, spec.plan_force), spec.limits.torque)


def plan_offline(spec: ScenarioSpec, x0, x_goal, params: dyn.InertialParams, seed: int,
                 planner: str | None = None) -> tuple[Trajectory, dict]:
    """Reference for an offline segment (raises :class:`NoPathError`)."""
    planner = planner or spec.offline_planner
    limits = plan_limits(spec)
    pc = spec.cfg.planner
    t0 = time.perf_counter()
    stats = {"planner": planner}
    if planner == "kino-rrt":
        traj = _plan_kino(spec, x0, x_goal, params, seed)
    else:
        cfg = RrtConfig(max_samples=pc.max_samples, attitude_sampling="fixed", seed=seed,
                        velocity_limit_mps=spec.cfg.control.velocity_limit_mps)
        traj = lqr_rrt_star(x0, x_goal, spec.world, cfg, params, limits)
        stats["raw_duration_s"] = traj.duration
        model = SteerModel(params, limits, cfg.dt_s, int(round(cfg.t_max_s / cfg.dt_s)), SteerWeights())
        sc = ShortcutConfig(iterations=pc.shortcut_iterations, seed=seed + 1,
                            velocity_limit_mps=spec.cfg.control.velocity_limit_mps)
        traj = shortcut(traj, spec.world, sc, params, limits, model)
    stats["duration_s"] = traj.duration
    stats["wall_s"] = time.perf_counter() - t0
    return traj, stats


def plan_segment(spec: ScenarioSpec, name: str, params: dyn.InertialParams, streams: "Streams",
                 planner: str | None = None) -> tuple[Trajectory, dict]:
    """Global reference for one segment with the planner its flags select."""
    x0, xg = spec.endpoints(name)
    if spec.segment(name).online_planning and planner is None:
        t0 = time.perf_counter()
        traj = _plan_kino(spec, x0, xg, params, streams.seed_for("online_plan"))
        return traj, {"planner": "kino-rrt", "duration_s": traj.duration, "wall_s": time.perf_counter() - t0}
    return plan_offline(spec, x0, xg, params, streams.seed_for("offline_plan"), planner)


def _plan_kino(spec: ScenarioSpec, x0, x_goal, params, seed: int) -> Trajectory:
    mp = MotionPrimitiveSet.from_limits(plan_limits(spec), c=0.5)
    kc = KinoConfig(max_iterations=spec.cfg.planner.kino_iterations, seed=seed,
                    velocity_limit_mps=spec.cfg.control.velocity_limit_mps)
    traj = kino_rrt(x0, x_goal, spec.world, mp, kc, params)
    # hold the goal attitude; primitives carry no torque
    return traj


def _ref_hold(traj: Trajectory, t_end: float) -> Trajectory:
    """Extend a reference by holding its final state (zero input) until ``t_end``."""
    if traj.t[-1] >= t_end:
        return traj
    x_end = traj.x[-1].copy()
    x_end[dyn.VEL] = 0.0
    x_end[dyn.OMEGA] = 0.0
    t = np.append(traj.t, t_end)
    x = np.vstack([traj.x, x_end])
    u = np.vstack([traj.u[:-1], np.zeros((2, dyn.INPUT_DIM))])
    return Trajectory(t, x, u)


class _Pending:
    """Records in flight to the estimator, delivered in arrival order."""

    def __init__(self):
        self.items = []
        self.seq = 0

    def add(self, rec):
        self.items.append((rec.arrival, self.seq, rec))
        self.seq += 1

    def due(self, t: float) -> list:
        self.items.sort(key=lambda e: (e[0], e[1]))
        n = 0
        while n < len(self.items) and self.items[n][0] <= t:
            n += 1
        out = [e[2] for e in self.items[:n]]
        del self.items[:n]
        return out


def _telemetry_row(t, x, xh, ref_r, cmd, u, viol, jump, belief, gamma, fim, event):
    theta = belief.theta if belief is not None else np.full(4, np.nan)
    pd = np.diag(belief.P_cov) if belief is not None else np.full(4, np.nan)
    return [t, *x, *xh, *ref_r, *cmd.v, *cmd.u_anc, *u, *cmd.z_bar[:, 0], *cmd.z_bar[:, 1],
            int(cmd.fallback), int(viol), int(jump), *theta, *pd, *gamma, *np.diag(fim), event]


def run_segment(spec: ScenarioSpec, name: str, truth: TruthState, streams: Streams,
                belief: InertialBelief | None = None, out_dir: Path | None = None,
                reference: Trajectory | None = None) -> SegmentResult:
    """Execute one segment; planner and tube failures are reported in the result."""
    flags = spec.segment(name)
    cfg = spec.cfg
    cc = cfg.control
    x_start, x_goal = spec.endpoints(name)
    period = cc.period_s
    timing = {"plan_s": 0.0, "local_plan_s": [], "control_s": []}
    logs = _open_logs(out_dir, name)
    try:
        return _run(spec, name, flags, truth, streams, belief, x_start, x_goal, period, timing, logs, reference)
    finally:
        for log in logs.values():
            log.close()


def _open_logs(out_dir, name):
    if out_dir is None:
        return {"telemetry": NullLog(), "estimation": NullLog(), "streams": NullLog()}
    out_dir = Path(out_dir)
    tag = name.replace("-", "")
    return {k: CsvLog(out_dir / f"{k}_{tag}.csv", k) for k in ("telemetry", "estimation", "streams")}


def _model_params(belief: InertialBelief | None, default: dyn.InertialParams) -> dyn.InertialParams:
    return default if belief is None else dyn.InertialParams.plausible(belief.theta)


def _run(spec, name, flags, truth, streams, belief, x_start, x_goal, period, timing, logs, reference):
    cfg = spec.cfg
    cc = cfg.control
    sc = cfg.segments
    learning = flags.model_improvement
    model_p = _model_params(belief, spec.params_before)
    result_kw = {}

    for label, x in (("start", x_start), ("goal", x_goal)):
        if not point_free(x[dyn.POS], spec.world):
            return _failed(name, "no_path", truth, belief, {"error": f"{label} waypoint is in collision"})

    # reference plan
    plan_stats = {}
    t0 = time.perf_counter()
    try:
        if reference is not None:
            ref_global = reference
        else:
            ref_global, plan_stats = plan_segment(spec, name, model_p, streams)
    except NoPathError as exc:
        return _failed(name, "no_path", truth, belief, {"error": str(exc), **getattr(exc, "stats", {})})
    timing["plan_s"] = time.perf_counter() - t0
    plan_stats["wall_s"] = timing["plan_s"]

    # controllers
    try:
        tspec = tube_spec_for(spec, model_p.mass, flags.robust_tracking)
    except tube.TubeInfeasibleError as exc:
        return _failed(name, "tube_infeasible", truth, belief, {"error": str(exc)})
    mpc = tube.TubeMpc(tspec, mpc_config(spec), model_p.mass)
    att_gains = tube.AttitudeGains.design(model_p, period)

    estimator = None
    weights = spec.info_weights()
    gamma = np.zeros(4)
    if learning:
        estimator = make_estimator(spec, belief)
    sensor = SensorModel(cfg.noise, streams.sensor, streams.jump)
    pending = _Pending()
    local_cfg = LocalConfig(horizon=cfg.local.horizon, dt=cfg.local.dt_s, iterations=cfg.local.iterations,
                            velocity_limit_mps=cc.velocity_limit_mps, limits=spec.limits,
                            force_limit_n=cfg.local.force_fraction * tube.inertial_force_bound(spec.limits),
                            force_weight=cfg.local.force_weight, torque_weight=cfg.local.torque_weight)
    local_plan: LocalPlan | None = None
    ref = _ref_hold(ref_global, ref_global.t[-1] + sc.timeout_s)
    t_ref_end = ref_global.t[-1]
    next_replan = 0.0
    fim = np.zeros((4, 4))
    n_s_ctl = period * 62.5
    tick = 0
    t = 0.0
    settle = 0.0
    prev_next = None
    counts = {"violations": 0, "fallbacks": 0, "saturated": 0, "steps": 0}
    max_err = 0.0
    xs_exec, us_exec, ts_exec = [], [], []
    gamma_hist, fim_hist = [], []
    status = "timeout"
    dist_max = cfg.noise.disturbance_force_n
    hold_ticks = max(1, int(round(cfg.noise.disturbance_hold_s / BASE_TICK_S)))
    f_d = np.zeros(3)
    while t <= sc.timeout_s + 1e-9:
        x_true = truth.x
        event = ""
        if sensor.maybe_jump(t):
            event = "jump"
        xh = sensor.estimate(x_true, t)
        cur_belief = estimator.belief if estimator is not None else belief
        if flags.online_planning and t >= next_replan - 1e-9 and t < t_ref_end + cfg.local.replan_s:
            if cur_belief is not None:
                weights = covar_weight(cur_belief, weights) if spec.gamma_mode == "auto" else weights
                gamma = np.array(weights.gamma)
            tl = time.perf_counter()
            try:
                local_plan = plan_local(xh, ref_global, cur_belief, weights, spec.world, local_cfg, t0=t,
                                        warm=local_plan)
                ref = _ref_hold(local_plan.to_trajectory(), t + sc.timeout_s)
                if t + cfg.local.replan_s >= t_ref_end:
                    # last replan: hand over to the global reference end state
                    ref = _splice(ref, ref_global, t + local_cfg.horizon * local_cfg.dt, sc.timeout_s)
            except LocalPlanError:
                ref = _ref_hold(ref_global, t + sc.timeout_s)
            timing["local_plan_s"].append(time.perf_counter() - tl)
            model_p = _model_params(cur_belief, spec.params_before)
            try:
                tspec = tube_spec_for(spec, model_p.mass, flags.robust_tracking)
            except tube.TubeInfeasibleError as exc:
                return _failed(name, "tube_infeasible", truth, cur_belief, {"error": str(exc)})
            mpc = tube.TubeMpc(tspec, mpc_config(spec), model_p.mass)
            att_gains = tube.AttitudeGains.design(model_p, period)
            prev_next = None
            next_replan = t + cfg.local.replan_s
            event = (event + ";replan").lstrip(";")

        tc = time.perf_counter()
        cmd = mpc.step(xh, ref, t)
        x_ref = ref.sample(t)
        tau = tube.attitude_lqr_step(xh, x_ref, att_gains, spec.limits, ref.input_at(t)[3:])
        f_in = cmd.v + cmd.u_anc
        u_raw = np.concatenate([quat.rotate_inverse(xh[dyn.ATT], f_in), tau])
        u = dyn.saturate(u_raw, spec.limits)
        timing["control_s"].append(time.perf_counter() - tc)
        counts["steps"] += 1
        if np.any(np.abs(u - u_raw) > 1e-12):
            counts["saturated"] += 1
        viol = False
        if prev_next is not None and not tspec.Z.is_zero:
            e = np.column_stack([xh[dyn.POS], xh[dyn.VEL]]) - prev_next
            viol = not bool(np.all(tspec.Z.contains(e)))
        counts["violations"] += int(viol)
        counts["fallbacks"] += int(cmd.fallback)
        prev_next = cmd.z_next

        err = float(np.linalg.norm(x_true[dyn.POS] - x_ref[dyn.POS]))
        max_err = max(max_err, err)
        fim = fim + fisher_info(u[None], samples_per_step=n_s_ctl).F
        gamma_hist.append(gamma.copy())
        fim_hist.append(np.diag(fim).copy())
        logs["telemetry"].write(_telemetry_row(t, x_true, xh, x_ref[dyn.POS], cmd, u, viol,
                                               sensor.jump_active(t), cur_belief, gamma, fim, event))
        xs_exec.append(x_true)
        us_exec.append(u)
        ts_exec.append(t)

        # termination
        if t >= t_ref_end:
            near = (np.linalg.norm(x_true[dyn.POS] - x_goal[dyn.POS]) <= sc.goal_position_m
                    and np.linalg.norm(x_true[dyn.VEL]) <= sc.goal_velocity_mps)
            skip = name == "B-C" and not sc.regulate_at_c
            settle = settle + period if near else 0.0
            if skip or settle >= sc.settle_s:
                status = "ok"
                break

        # actuate and integrate the truth over one control period
        if estimator is not None:
            arrival = t + cfg.noise.latency_max_s * streams.latency.random()
            pending.add(CtlRecord(t, u.copy(), arrival))
        for _ in range(CTL_TICKS):
            if tick % hold_ticks == 0:
                f_d = streams.disturbance.uniform(-dist_max, dist_max, 3)
            u_truth = u + np.concatenate([quat.rotate_inverse(truth.x[dyn.ATT], f_d), np.zeros(3)])
            truth.advance(u_truth, BASE_TICK_S)
            tick += 1
            if estimator is not None and tick % LOC_TICKS == 0:
                ts = tick * BASE_TICK_S
                rec = sensor.localization(truth.x, ts)
                if streams.latency.random() >= cfg.noise.loc_drop_probability:
                    arrival = ts + cfg.noise.latency_max_s * streams.latency.random()
                    pending.add(replace(rec, arrival=arrival))
        t = tick * BASE_TICK_S
        if estimator is not None:
            _deliver(estimator, pending.due(t), logs)

    if estimator is not None:
        _deliver(estimator, pending.due(np.inf), logs)
        for row in _flush(estimator):
            logs["estimation"].write(row)
    final_belief = estimator.belief if estimator is not None else belief
    x_end = truth.x
    executed = Trajectory(np.array(ts_exec), np.array(xs_exec), np.array(us_exec))
    res = SegmentResult(
        name=name, success=status == "ok", status=status, duration_s=t,
        terminal_position_error_m=float(np.linalg.norm(x_end[dyn.POS] - x_goal[dyn.POS])),
        max_tracking_error_m=max_err, tube_violations=counts["violations"], fallbacks=counts["fallbacks"],
        saturated_steps=counts["saturated"], control_steps=counts["steps"], final_state=x_end,
        belief=final_belief, plan_stats=plan_stats, executed=executed,
        executed_free=bool(trajectory_free(executed, spec.world, CheckResolution(), "point")),
        timing=timing, gamma_history=gamma_hist, fim_history=fim_hist)
    if estimator is not None:
        res.estimator_stats = {
            "emitted": estimator.sync.emitted, "dropped_late": estimator.sync.dropped_late,
            "dropped_unpaired": estimator.sync.dropped_unpaired, "accepted": final_belief.accepted,
            "rejected": final_belief.rejected}
    res.info_stats = {"fim_diag": np.diag(fim).tolist(), "gamma_final": gamma.tolist()}
    return res


def make_estimator(spec: ScenarioSpec, belief: InertialBelief, gate_enabled: bool | None = None) -> OnlineEstimator:
    """Online estimator configured from the scenario; shared by live runs and replay."""
    ec = spec.cfg.estimator
    enabled = ec.gate_enabled if gate_enabled is None else gate_enabled
    return OnlineEstimator(belief, noise_cov(ec.sigma_a_mps2, ec.sigma_alpha_rps2), ec.window_s,
                           OutlierGate(ec.gate_probability, enabled=enabled))


def learning_prior(spec: ScenarioSpec) -> InertialBelief:
    """Belief at the start of the learning segment, after the payload swap."""
    return spec.prior_belief().reinflated(spec.cfg.estimator.prior_rel_std)


def replay_records(spec: ScenarioSpec, records, belief: InertialBelief | None = None,
                   gate_enabled: bool | None = None) -> OnlineEstimator:
    """Feed recorded ctl/loc records, in file order, through a fresh estimator."""
    est = make_estimator(spec, learning_prior(spec) if belief is None else belief, gate_enabled)
    for rec in records:
        est.push(rec)
    est.flush()
    return est


def _deliver(estimator, recs, logs):
    n0 = len(estimator.log)
    for rec in recs:
        logs["streams"].write(stream_row(rec))
        estimator.push(rec)
    for row in estimator.log[n0:]:
        logs["estimation"].write(estimation_row(row))


def _flush(estimator):
    n0 = len(estimator.log)
    estimator.flush()
    return [estimation_row(r) for r in estimator.log[n0:]]


def estimation_row(r) -> list:
    return [r.stamp, *r.theta, *r.p_diag, *r.innovation, r.nis, int(r.accepted)]


def _splice(local: Trajectory, glob: Trajectory, t_from: float, timeout: float) -> Trajectory:
    """Local plan up to ``t_from`` and the global reference afterwards."""
    keep = local.t < t_from
    gl = glob.t > t_from
    t = np.concatenate([local.t[keep], glob.t[gl]])
    if len(t) < 2 or not np.all(np.diff(t) > 0):
        return local
    x = np.vstack([local.x[keep], glob.x[gl]])
    u = np.vstack([local.u[keep], glob.u[gl]])
    return _ref_hold(Trajectory(t, x, u), t[-1] + timeout)


def _failed(name, status, truth, belief, stats) -> SegmentResult:
    x = truth.x
    return SegmentResult(name, False, status, 0.0, float("nan"), float("nan"), 0, 0, 0, 0, x, belief,
                         plan_stats=stats)


@dataclass
class ScenarioReport:
    segments: list
    exit_code: int
    true_params_after: dyn.InertialParams
    prior: InertialBelief

    def summary(self) -> dict:
        out = {"exit_code": self.exit_code, "segments": []}
        for s in self.segments:
            d = {
                "name": s.name, "success": s.success, "status": s.status, "duration_s": s.duration_s,
                "terminal_position_error_m": s.terminal_position_error_m,
                "max_tracking_error_m": s.max_tracking_error_m, "tube_violations": s.tube_violations,
                "fallbacks": s.fallbacks, "saturated_steps": s.saturated_steps,
                "control_steps": s.control_steps, "executed_collision_free": s.executed_free,
                "plan": {k: v for k, v in s.plan_stats.items() if k != "wall_s"},
                "estimator": s.estimator_stats, "information": s.info_stats,
            }
            if s.belief is not None and s.estimator_stats:
                d["estimation"] = estimation_summary(s.belief, self.prior, self.true_params_after)
            out["segments"].append(d)
        return out


def estimation_summary(belief: InertialBelief, prior: InertialBelief, truth: dyn.InertialParams) -> dict:
    names = ["mass", "Ixx", "Iyy", "Izz"]
    est = belief.params
    true = truth.vector
    err = np.abs(est - true) / true * 100.0
    red = (1.0 - np.diag(belief.P_cov) / np.diag(prior.P_cov)) * 100.0
    return {n: {"estimate": float(e), "truth": float(tr), "percent_error": float(pe),
                "percent_cov_reduction": float(r)}
            for n, e, tr, pe, r in zip(names, est, true, err, red)}


def run_scenario(spec: ScenarioSpec, out_dir: Path | None = None) -> ScenarioReport:
    streams = Streams(spec.cfg.seed)
    truth = TruthState(spec.waypoints["A"], spec.params_before)
    prior = spec.prior_belief()
    belief = None
    results = []
    exit_code = EXIT_OK
    for seg in spec.segments:
        if seg.name == "B-C":
            truth.swap_payload(spec.params_after)
            belief = learning_prior(spec)
        res = run_segment(spec, seg.name, truth, streams, belief, out_dir)
        results.append(res)
        if res.belief is not None:
            belief = res.belief
        if not res.success:
            exit_code = {"no_path": EXIT_NO_PATH, "tube_infeasible": EXIT_TUBE_INFEASIBLE,
                         "timeout": EXIT_TIMEOUT}[res.status]
            break
    return ScenarioReport(results, exit_code, spec.params_after, prior)


def write_report(report: ScenarioReport, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    timing = {}
    for s in report.segments:
        ctl = np.array(s.timing.get("control_s", [])) if s.timing else np.zeros(0)
        lp = np.array(s.timing.get("local_plan_s", [])) if s.timing else np.zeros(0)
        timing[s.name] = {
            "plan_s": s.timing.get("plan_s", 0.0) if s.timing else 0.0,
            "control_mean_s": float(ctl.mean()) if len(ctl) else None,
            "control_max_s": float(ctl.max()) if len(ctl) else None,
            "local_plan_mean_s": float(lp.mean()) if len(lp) else None,
            "local_plan_max_s": float(lp.max()) if len(lp) else None,
        }
    with open(out_dir / "timing.json", "w") as fh:
        json.dump(timing, fh, indent=2, sort_keys=True)
        fh.write("\n")
