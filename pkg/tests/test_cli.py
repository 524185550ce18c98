import dataclasses
import json

import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st

from freeflyer import cli
from freeflyer import scenario as sc
from freeflyer.config import ConfigError, default_config, default_config_text, dump_config, parse_config
from freeflyer.telemetry import CsvLog, SchemaError, columns, read_csv

from conftest import override


# config ----------------------------------------------------------------------

def test_config_round_trip_is_idempotent():
    cfg = default_config()
    text = dump_config(cfg)
    assert parse_config(text) == cfg
    assert dump_config(parse_config(text)) == text


@settings(max_examples=20)
@given(st.integers(0, 2 ** 64 - 1), st.floats(0.0, 0.1), st.sampled_from(["auto", "off", "fixed"]),
       st.lists(st.floats(0.1, 10.0), min_size=3, max_size=3))
def test_modified_configs_round_trip(seed, force, mode, scale):
    cfg = override(default_config(), noise=dict(disturbance_force_n=force), info=dict(mode=mode),
                   payload=dict(inertia_scale=scale))
    cfg = dataclasses.replace(cfg, seed=seed)
    assert parse_config(dump_config(cfg)) == cfg


def test_unknown_field_names_its_line():
    text = default_config_text().replace("  window_s: 0.1", "  windw_s: 0.1")
    line = next(i for i, ln in enumerate(text.splitlines(), 1) if "windw_s" in ln)
    with pytest.raises(ConfigError, match=rf"estimator\.windw_s.*line {line}"):
        parse_config(text)


@pytest.mark.parametrize("edit, pattern", [
    (("mode: auto", "mode: sometimes"), "info.mode"),
    (("seed: 0", "seed: zero"), "seed"),
    (("robot_radius_m: 0.26", "robot_radius_m: -0.26"), "robot_radius_m"),
    (("  yaw_deg: 0.0", "  yaw_deg: [0.0]"), "yaw_deg"),
])
def test_invalid_values_are_diagnosed(edit, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_config(default_config_text().replace(*edit))


# telemetry -------------------------------------------------------------------

def _write_rows(path, n):
    with CsvLog(path, "estimation") as log:
        for k in range(n):
            log.write([0.1 * k] + [float(k)] * (len(log.columns) - 2) + [1])


def test_floats_survive_a_round_trip(tmp_path):
    vals = np.random.default_rng(0).normal(size=len(columns("estimation")) - 1)
    with CsvLog(tmp_path / "e.csv", "estimation") as log:
        log.write([*vals, 0])
    rows, warnings = read_csv(tmp_path / "e.csv", "estimation")
    assert not warnings
    assert [rows[0][c] for c in columns("estimation")[:-1]] == list(vals)


def test_truncated_file_gives_prefix_and_warning(tmp_path):
    path = tmp_path / "e.csv"
    _write_rows(path, 5)
    text = path.read_text()
    path.write_text(text[:-7])
    rows, warnings = read_csv(path, "estimation")
    assert len(rows) == 4 and len(warnings) == 1


def test_header_mismatch_names_the_column(tmp_path):
    path = tmp_path / "e.csv"
    _write_rows(path, 2)
    cols = columns("estimation")
    path.write_text(path.read_text().replace(cols[3], "bogus", 1))
    with pytest.raises(SchemaError, match=f"'bogus', expected '{cols[3]}'"):
        read_csv(path, "estimation")


def test_row_width_is_enforced(tmp_path):
    with CsvLog(tmp_path / "e.csv", "estimation") as log:
        with pytest.raises(SchemaError):
            log.write([1.0, 2.0])


# command line ----------------------------------------------------------------

def test_gamma_parsing():
    assert cli.parse_gamma("auto") == ("auto", None)
    assert cli.parse_gamma("fixed:2.5") == ("fixed", 2.5)
    for bad in ("fixed:", "fixed:-1", "fixed:nan", "on"):
        with pytest.raises(cli.UsageError):
            cli.parse_gamma(bad)


@pytest.mark.parametrize("argv", [
    ["run", "--gamma", "fixed:-1"],
    ["run", "--scenario", "does-not-exist.yaml"],
    ["bench", "warp"],
    ["bench", "--runs", "0"],
])
def test_usage_errors_exit_2(argv, tmp_path):
    assert cli.main(argv + ["--out", str(tmp_path)]) == cli.EXIT_USAGE


@pytest.mark.parametrize("argv", [["run", "--seed", "-1"], ["run", "--planner", "dijkstra"], ["fly"]])
def test_argparse_rejections_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 2


def test_config_typo_exits_2(tmp_path, capsys):
    path = tmp_path / "s.yaml"
    path.write_text(default_config_text().replace("thrust_rpm", "thrust_rmp"))
    assert cli.main(["run", "--scenario", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_USAGE
    assert "robot.thrust_rmp" in capsys.readouterr().err


def test_goal_in_obstacle_exits_no_path(tmp_path):
    data = yaml.safe_load(default_config_text())
    data["waypoints"]["b_m"] = data["world"]["obstacles"][0]["center_m"]
    path = tmp_path / "s.yaml"
    path.write_text(yaml.safe_dump(data))
    assert cli.main(["run", "--scenario", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_NO_PATH
    assert cli.main(["plan", "--segment", "A-B", "--scenario", str(path), "--out", str(tmp_path)]) \
        == cli.EXIT_NO_PATH


def test_plan_writes_a_reference(tmp_path, capsys):
    assert cli.main(["plan", "--segment", "B-C", "--out", str(tmp_path)]) == cli.EXIT_OK
    info = json.loads(capsys.readouterr().out)
    rows, warnings = read_csv(info["file"], "trajectory")
    assert not warnings and len(rows) > 2
    t = [r["t_s"] for r in rows]
    assert all(b > a for a, b in zip(t, t[1:]))


def test_bench_reports_budgets(tmp_path, capsys):
    path = tmp_path / "bench.json"
    assert cli.main(["bench", "controller", "--runs", "20", "--json", str(path)]) == cli.EXIT_OK
    row = json.loads(path.read_text())[0]
    assert row["suite"] == "controller" and row["runs"] == 20 and row["budget_s"] == 0.2
    assert row["mean_s"] <= 0.01 and row["within_budget"]
    assert "controller" in capsys.readouterr().out


def test_run_reports_three_segments(default_run):
    assert default_run["exit_code"] == cli.EXIT_OK
    report = json.loads((default_run["out"] / "report.json").read_text())
    assert len(report["segments"]) == 3
    assert parse_config((default_run["out"] / "scenario.yaml").read_text()) == default_config()


def test_replay_matches_live_belief(default_run, tmp_path, capsys):
    out = default_run["out"]
    series = tmp_path / "est.csv"
    assert cli.main(["estimate-replay", str(out / "streams_BC.csv"), "--csv", str(series)]) == cli.EXIT_OK
    replay = json.loads(capsys.readouterr().out)
    live = json.loads((out / "report.json").read_text())
    live_est = next(s["estimation"] for s in live["segments"] if s["name"] == "B-C")
    assert replay["estimation"] == live_est
    assert not replay["partial"]
    assert (out / "estimation_BC.csv").read_text() == series.read_text()


def test_replay_of_truncated_streams_is_partial(default_run, tmp_path, capsys):
    text = (default_run["out"] / "streams_BC.csv").read_text()
    cut = tmp_path / "cut.csv"
    cut.write_text(text[: len(text) // 2])
    assert cli.main(["estimate-replay", str(cut)]) == cli.EXIT_OK
    captured = capsys.readouterr()
    rep = json.loads(captured.out)
    assert rep["partial"] and rep["samples"] > 0
    assert "warning" in captured.err


def test_replay_rejects_wrong_schema(default_run, capsys):
    assert cli.main(["estimate-replay", str(default_run["out"] / "telemetry_BC.csv")]) == cli.EXIT_USAGE
    assert "column 0" in capsys.readouterr().err


def test_replay_without_gate_is_worse_on_jumpy_data(tmp_path, capsys):
    cfg = override(default_config(), noise=dict(jump_probability=0.02))
    path = tmp_path / "jumpy.yaml"
    path.write_text(dump_config(cfg))
    spec = sc.ScenarioSpec.from_config(cfg)
    truth = sc.TruthState(spec.waypoints["B"], spec.params_after)
    sc.run_segment(spec, "B-C", truth, sc.Streams(cfg.seed), sc.learning_prior(spec), tmp_path)
    reports = []
    for extra in ([], ["--no-gate"]):
        argv = ["estimate-replay", str(tmp_path / "streams_BC.csv"), "--scenario", str(path)] + extra
        assert cli.main(argv) == cli.EXIT_OK
        reports.append(json.loads(capsys.readouterr().out))
    gated, ungated = (sum(r["estimation"][k]["percent_error"] for k in ("Ixx", "Iyy", "Izz")) for r in reports)
    assert reports[0]["rejected"] > 0 and reports[1]["rejected"] == 0
    assert ungated > gated
