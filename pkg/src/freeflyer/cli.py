"""Command-line entry points.

Verbs
-----
run               execute the three-segment scenario, write telemetry and a report
plan              plan the global reference of one segment
estimate-replay   re-run the online estimator over a recorded ``streams_*.csv``
bench             timing suites for the controller and planners

Exit codes
----------
0 success, 2 usage or configuration error, 3 no path, 4 tube infeasible,
5 segment timeout.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from . import scenario as sc
from . import tube
from .config import ConfigError, ScenarioConfig, default_config, dump_config, load_config
from .estimator import InertialBelief
from .info_planner import LocalConfig, plan_local
from .planning.lqr_rrt import NoPathError
from .scenario import EXIT_NO_PATH, EXIT_OK, EXIT_TUBE_INFEASIBLE, EXIT_USAGE, EXIT_TIMEOUT  # noqa: F401
from .telemetry import SchemaError, CsvLog, read_csv, records_from_rows
from .trajectory import Trajectory

log = logging.getLogger("freeflyer")

PLANNERS = ("lqr-rrt-star", "kino-rrt")
SEGMENTS = ("A-B", "B-C", "C-A")
BUDGETS_S = {"controller": 0.2, "local": 12.0, "kino": 2.0, "lqr": None}
DEFAULT_RUNS = {"controller": 200, "local": 5, "kino": 20, "lqr": 3}


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Resolved command-line options for one invocation."""

    scenario: Path | None = None
    seed: int | None = None
    out: Path = Path("out")
    planner: str | None = None
    gamma: str | None = None
    tube: bool = True
    verbosity: int = 0

    def load(self) -> ScenarioConfig:
        """Scenario config with command-line overrides applied."""
        if self.scenario is not None and not Path(self.scenario).is_file():
            raise UsageError(f"scenario file not found: {self.scenario}")
        cfg = default_config() if self.scenario is None else load_config(self.scenario)
        if self.seed is not None:
            cfg = dataclasses.replace(cfg, seed=self.seed)
        if self.planner is not None:
            cfg = dataclasses.replace(cfg, planner=dataclasses.replace(cfg.planner, offline=self.planner))
        if not self.tube:
            cfg = dataclasses.replace(cfg, segments=dataclasses.replace(cfg.segments, tube=False))
        if self.gamma is not None:
            mode, value = parse_gamma(self.gamma)
            info = dataclasses.replace(cfg.info, mode=mode,
                                       fixed_gamma=cfg.info.fixed_gamma if value is None else value)
            cfg = dataclasses.replace(cfg, info=info)
        return cfg


def parse_gamma(text: str) -> tuple[str, float | None]:
    """``auto``, ``off`` or ``fixed:<v>`` with ``v >= 0``."""
    if text in ("auto", "off"):
        return text, None
    if text.startswith("fixed:"):
        try:
            v = float(text[len("fixed:"):])
        except ValueError:
            raise UsageError(f"--gamma: cannot parse value in '{text}'") from None
        if not np.isfinite(v) or v < 0:
            raise UsageError(f"--gamma: fixed value must be finite and non-negative, got {v}")
        return "fixed", v
    raise UsageError(f"--gamma: expected auto, off or fixed:<v>, got '{text}'")


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits: {text}")
    return v


def _run_config(args) -> RunConfig:
    return RunConfig(scenario=args.scenario, seed=args.seed, out=Path(args.out),
                     planner=getattr(args, "planner", None), gamma=getattr(args, "gamma", None),
                     tube=not getattr(args, "no_tube", False), verbosity=args.verbose)


# --------------------------------------------------------------------- run

def cmd_run(rc: RunConfig) -> int:
    cfg = rc.load()
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenario.yaml").write_text(dump_config(cfg))
    spec = sc.ScenarioSpec.from_config(cfg)
    blocked = spec.blocked_waypoints()
    if blocked:
        log.warning("waypoints in collision: %s", ", ".join(blocked))
    t0 = time.perf_counter()
    report = sc.run_scenario(spec, out)
    sc.write_report(report, out)
    for s in report.segments:
        log.info("%s: %s after %.1f s, terminal error %.3f m, tube violations %d",
                 s.name, s.status, s.duration_s, s.terminal_position_error_m, s.tube_violations)
    summary = report.summary()
    est = next((seg.get("estimation") for seg in summary["segments"] if seg.get("estimation")), None)
    print(json.dumps({"exit_code": report.exit_code, "segments": {s.name: s.status for s in report.segments},
                      "estimation": est, "wall_s": round(time.perf_counter() - t0, 3)}, indent=2))
    return report.exit_code


# -------------------------------------------------------------------- plan

def cmd_plan(rc: RunConfig, segment: str) -> int:
    cfg = rc.load()
    spec = sc.ScenarioSpec.from_config(cfg)
    a, b = segment.split("-")
    blocked = [k for k in (a, b) if k in spec.blocked_waypoints()]
    if blocked:
        print(f"error: waypoint {blocked[0]} is in collision", file=sys.stderr)
        return EXIT_NO_PATH
    params = spec.params_before if segment == "A-B" else spec.params_after
    try:
        traj, stats = sc.plan_segment(spec, segment, params, sc.Streams(cfg.seed), rc.planner)
    except NoPathError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_PATH
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"plan_{segment.replace('-', '')}.csv"
    write_trajectory(traj, path)
    print(json.dumps({"segment": segment, "file": str(path), **stats}, indent=2, sort_keys=True))
    return EXIT_OK


def write_trajectory(traj: Trajectory, path) -> None:
    with CsvLog(path, "trajectory") as fh:
        for t, x, u in zip(traj.t, traj.x, traj.u):
            fh.write([t, *x, *u])


# --------------------------------------------------------- estimate-replay

def cmd_replay_estimator(rc: RunConfig, streams_csv, gate: bool = True, out_csv=None) -> dict:
    """Replay recorded streams; returns the estimation report."""
    cfg = rc.load()
    spec = sc.ScenarioSpec.from_config(cfg)
    rows, warnings = read_csv(streams_csv, "streams")
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    records = records_from_rows(rows)
    est = sc.replay_records(spec, records, gate_enabled=gate)
    if out_csv is not None:
        with CsvLog(out_csv, "estimation") as fh:
            for r in est.log:
                fh.write(sc.estimation_row(r))
    b: InertialBelief = est.belief
    return {
        "records": len(records), "samples": len(est.log), "accepted": b.accepted, "rejected": b.rejected,
        "gate": gate, "partial": bool(warnings), "warnings": warnings,
        "theta": b.theta.tolist(), "theta_std": b.theta_std.tolist(),
        "estimation": sc.estimation_summary(b, sc.learning_prior(spec), spec.params_after),
    }


# ------------------------------------------------------------------- bench

def _stats(samples, budget) -> dict:
    s = np.asarray(samples, dtype=float)
    return {"runs": int(len(s)), "mean_s": float(s.mean()), "std_s": float(s.std()), "max_s": float(s.max()),
            "median_s": float(np.median(s)), "budget_s": budget,
            "within_budget": None if budget is None else bool(s.max() <= budget)}


def bench_suite(name: str, cfg: ScenarioConfig | None = None, runs: int | None = None) -> dict:
    """Wall-clock samples for one suite, summarized against its budget."""
    cfg = default_config() if cfg is None else cfg
    runs = DEFAULT_RUNS[name] if runs is None else runs
    spec = sc.ScenarioSpec.from_config(cfg)
    streams = sc.Streams(cfg.seed)
    p = spec.params_after
    samples = []
    if name in ("controller", "local"):
        ref, _ = sc.plan_segment(spec, "B-C", p, streams)
        period = cfg.control.period_s
        if name == "controller":
            mpc = tube.TubeMpc(sc.tube_spec_for(spec, p.mass, True), sc.mpc_config(spec), p.mass)
            rng = np.random.default_rng(cfg.seed)
            for k in range(runs):
                t = (k * period) % max(ref.duration, period)
                x = ref.sample(t).copy()
                x[dyn.POS] += rng.uniform(-2e-3, 2e-3, 3)
                x[dyn.VEL] += rng.uniform(-1e-3, 1e-3, 3)
                t0 = time.perf_counter()
                mpc.step(x, ref, t)
                samples.append(time.perf_counter() - t0)
        else:
            lc = cfg.local
            local_cfg = LocalConfig(horizon=lc.horizon, dt=lc.dt_s, iterations=lc.iterations,
                                    velocity_limit_mps=cfg.control.velocity_limit_mps, limits=spec.limits,
                                    force_limit_n=lc.force_fraction * tube.inertial_force_bound(spec.limits),
                                    force_weight=lc.force_weight, torque_weight=lc.torque_weight)
            belief = sc.learning_prior(spec)
            weights = spec.info_weights()
            for k in range(runs):
                t = min(k * lc.replan_s, ref.duration)
                t0 = time.perf_counter()
                plan_local(ref.sample(t), ref, belief, weights, spec.world, local_cfg, t0=t)
                samples.append(time.perf_counter() - t0)
    elif name == "kino":
        x0, xg = spec.endpoints("B-C")
        for k in range(runs):
            t0 = time.perf_counter()
            sc._plan_kino(spec, x0, xg, p, cfg.seed + k)
            samples.append(time.perf_counter() - t0)
    elif name == "lqr":
        x0, xg = spec.endpoints("A-B")
        for k in range(runs):
            t0 = time.perf_counter()
            sc.plan_offline(spec, x0, xg, spec.params_before, cfg.seed + k, "lqr-rrt-star")
            samples.append(time.perf_counter() - t0)
    else:
        raise UsageError(f"unknown bench suite '{name}'")
    return {"suite": name, **_stats(samples, BUDGETS_S[name])}


def format_bench(rows) -> str:
    head = f"{'suite':<11}{'runs':>6}{'mean_s':>12}{'std_s':>12}{'max_s':>12}{'budget_s':>10}  ok"
    lines = [head]
    for r in rows:
        budget = "-" if r["budget_s"] is None else f"{r['budget_s']:g}"
        ok = "-" if r["within_budget"] is None else ("yes" if r["within_budget"] else "NO")
        lines.append(f"{r['suite']:<11}{r['runs']:>6}{r['mean_s']:>12.5f}{r['std_s']:>12.5f}"
                     f"{r['max_s']:>12.5f}{budget:>10}  {ok}")
    return "\n".join(lines)


def cmd_bench(rc: RunConfig, suites, runs: int | None = None, json_path=None) -> int:
    unknown = [s for s in suites if s not in BUDGETS_S]
    if unknown:
        raise UsageError(f"unknown bench suite '{unknown[0]}' (choose from {', '.join(BUDGETS_S)})")
    if runs is not None and runs < 1:
        raise UsageError("--runs must be positive")
    cfg = rc.load()
    rows = [bench_suite(s, cfg, runs) for s in suites]
    print(format_bench(rows))
    if json_path is not None:
        Path(json_path).write_text(json.dumps(rows, indent=2) + "\n")
    return EXIT_OK


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", type=Path, help="scenario YAML (default: bundled scenario)")
    common.add_argument("--seed", type=_seed, help="override the scenario seed (unsigned 64-bit)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    ap = argparse.ArgumentParser(prog="freeflyer", description=__doc__.split("\n")[0],
                                 formatter_class=argparse.RawDescriptionHelpFormatter,
                                 epilog="exit codes: 0 ok, 2 usage/config, 3 no path, 4 tube infeasible, 5 timeout")
    sub = ap.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", parents=[common], help="run the three-segment scenario")
    run.add_argument("--planner", choices=PLANNERS, help="offline planner for A-B and C-A")
    run.add_argument("--no-tube", action="store_true", help="track with standard MPC everywhere")
    run.add_argument("--gamma", help="information weights: auto, off or fixed:<v>")

    plan = sub.add_parser("plan", parents=[common], help="plan one segment's global reference")
    plan.add_argument("--segment", choices=SEGMENTS, default="A-B")
    plan.add_argument("--planner", choices=PLANNERS, help="default: the segment's own planner")

    rep = sub.add_parser("estimate-replay", parents=[common], help="replay recorded estimator streams")
    rep.add_argument("streams", type=Path, help="streams_*.csv written by 'run'")
    rep.add_argument("--no-gate", action="store_true", help="disable the outlier gate")
    rep.add_argument("--csv", type=Path, help="write the estimate/covariance series here")

    bench = sub.add_parser("bench", parents=[common], help="timing benchmarks")
    bench.add_argument("suites", nargs="*", default=["controller", "kino", "local"],
                       help="any of: controller, local, kino, lqr")
    bench.add_argument("--runs", type=int, help="samples per suite")
    bench.add_argument("--json", type=Path, help="also write the table as JSON")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        rc = _run_config(args)
        if args.verb == "run":
            return cmd_run(rc)
        if args.verb == "plan":
            return cmd_plan(rc, args.segment)
        if args.verb == "estimate-replay":
            if not args.streams.is_file():
                raise UsageError(f"streams file not found: {args.streams}")
            rep = cmd_replay_estimator(rc, args.streams, gate=not args.no_gate, out_csv=args.csv)
            print(json.dumps(rep, indent=2))
            return EXIT_OK
        return cmd_bench(rc, args.suites, args.runs, args.json)
    except (ConfigError, UsageError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
