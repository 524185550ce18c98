"""Scenario configuration: YAML with unit-suffixed keys, unknown keys rejected.

Every section maps onto a frozen dataclass.  Parsing keeps the YAML node
marks so a bad field is reported with its line number.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .world import JEM_CENTROID, JEM_HALF_EXTENT, DEFAULT_ROBOT_RADIUS

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed configuration; the message names the field and line."""


def _c(offset):
    return [round(float(a + b), 12) for a, b in zip(JEM_CENTROID, offset)]


@dataclass(frozen=True)
class ObstacleConfig:
    center_m: list
    radius_m: float


@dataclass(frozen=True)
class WorldConfig:
    keep_in_center_m: list = field(default_factory=lambda: [float(v) for v in JEM_CENTROID])
    keep_in_half_extent_m: list = field(default_factory=lambda: [float(v) for v in JEM_HALF_EXTENT])
    robot_radius_m: float = float(DEFAULT_ROBOT_RADIUS)
    obstacles: list = field(default_factory=lambda: [ObstacleConfig([float(v) for v in JEM_CENTROID], 0.2)])


@dataclass(frozen=True)
class WaypointConfig:
    a_m: list = field(default_factory=lambda: _c((0.0, -1.0, 0.0)))
    b_m: list = field(default_factory=lambda: _c((0.0, 1.0, 0.0)))
    c_m: list = field(default_factory=lambda: _c((0.3, 2.0, 0.2)))
    yaw_deg: float = 0.0


@dataclass(frozen=True)
class RobotConfig:
    mass_kg: float = 9.58
    inertia_kgm2: list = field(default_factory=lambda: [0.153, 0.143, 0.162])
    thrust_rpm: int = 2000


@dataclass(frozen=True)
class PayloadConfig:
    mass_kg: float = 2.0
    inertia_scale: list = field(default_factory=lambda: [1.4, 1.5, 1.6])
    com_offset_m: list = field(default_factory=lambda: [0.02, 0.0, 0.0])


@dataclass(frozen=True)
class NoiseConfig:
    disturbance_force_n: float = 0.02
    disturbance_hold_s: float = 0.008    # resample period; a multiple of the base tick
    position_std_m: float = 1e-3
    attitude_std_rad: float = 2e-3
    velocity_std_mps: float = 2e-5
    omega_std_rps: float = 4.5e-4
    jump_probability: float = 0.002
    jump_position_m: list = field(default_factory=lambda: [0.05, 0.10])
    jump_attitude_deg: list = field(default_factory=lambda: [2.0, 5.0])
    jump_duration_s: float = 1.0
    jump_filter_s: float = 0.5
    accel_scale: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    latency_max_s: float = 0.03
    loc_drop_probability: float = 0.0


@dataclass(frozen=True)
class EstimatorConfig:
    prior_rel_std: list = field(default_factory=lambda: [0.5, 0.5, 0.5, 0.5])
    window_s: float = 0.1
    gate_probability: float = 0.99
    gate_enabled: bool = True
    sigma_a_mps2: float = 5e-3
    sigma_alpha_rps2: float = 2e-2


@dataclass(frozen=True)
class InfoConfig:
    mode: str = "auto"          # auto | off | fixed
    fixed_gamma: float = 1.0
    gamma0: list = field(default_factory=lambda: [80.0, 80.0, 20.0, 10.0])
    sigma_n: list = field(default_factory=lambda: [0.2, 0.004, 0.006, 0.009])
    alpha: float = 2.0
    beta: float = 1.0


@dataclass(frozen=True)
class ControlConfig:
    period_s: float = 0.2
    horizon: int = 5
    position_weight: float = 10.0
    velocity_weight: float = 100.0
    force_weight: float = 1.0
    ancillary_position_weight: float = 100.0
    ancillary_velocity_weight: float = 1000.0
    ancillary_force_weight: float = 1.0
    model_margin_n: float = 0.005
    velocity_limit_mps: float = 0.1


@dataclass(frozen=True)
class LocalPlannerConfig:
    horizon: int = 40
    dt_s: float = 0.3
    replan_s: float = 12.0
    iterations: int = 5
    force_fraction: float = 0.8       # of the per-axis inertial force bound
    force_weight: float = 1.0
    torque_weight: float = 20.0


@dataclass(frozen=True)
class PlannerConfig:
    offline: str = "lqr-rrt-star"   # lqr-rrt-star | kino-rrt
    online: str = "kino-rrt"
    max_samples: int = 2000
    kino_iterations: int = 4000
    shortcut_iterations: int = 60


@dataclass(frozen=True)
class SegmentConfig:
    timeout_s: float = 300.0
    goal_position_m: float = 0.05
    goal_velocity_mps: float = 0.02
    settle_s: float = 2.0
    regulate_at_c: bool = True
    tube: bool = True


@dataclass(frozen=True)
class ScenarioConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    waypoints: WaypointConfig = field(default_factory=WaypointConfig)
    robot: RobotConfig = field(default_factory=RobotConfig)
    payload: PayloadConfig = field(default_factory=PayloadConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    info: InfoConfig = field(default_factory=InfoConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    local: LocalPlannerConfig = field(default_factory=LocalPlannerConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    segments: SegmentConfig = field(default_factory=SegmentConfig)


_VECTOR_LEN = {
    "center_m": 3, "keep_in_center_m": 3, "keep_in_half_extent_m": 3, "a_m": 3, "b_m": 3, "c_m": 3,
    "inertia_kgm2": 3, "inertia_scale": 3, "com_offset_m": 3, "accel_scale": 3,
    "jump_position_m": 2, "jump_attitude_deg": 2, "prior_rel_std": 4, "gamma0": 4, "sigma_n": 4,
}

_CHOICES = {
    ("info", "mode"): ("auto", "off", "fixed"),
    ("planner", "offline"): ("lqr-rrt-star", "kino-rrt"),
    ("planner", "online"): ("lqr-rrt-star", "kino-rrt"),
}


def _where(node) -> str:
    return f"line {node.start_mark.line + 1}"


def _scalar(node, typ, path):
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigError(f"{path}: expected a scalar ({_where(node)})")
    val = yaml.safe_load(node.value) if node.tag != "tag:yaml.org,2002:str" else node.value
    if typ is bool:
        if not isinstance(val, bool):
            raise ConfigError(f"{path}: expected true/false ({_where(node)})")
        return val
    if typ is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{path}: expected an integer ({_where(node)})")
        return val
    if typ is float:
        if isinstance(val, str):
            try:
                val = float(val)  # YAML 1.1 reads "1e-3" as a string
            except ValueError:
                pass
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{path}: expected a number ({_where(node)})")
        return float(val)
    if typ is str:
        return str(node.value)
    raise ConfigError(f"{path}: unsupported field type ({_where(node)})")


def _build(cls, node, path: str):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{path or 'config'}: expected a mapping ({_where(node)})")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for knode, vnode in node.value:
        key = knode.value
        full = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"unknown field '{full}' ({_where(knode)})")
        if key in kwargs:
            raise ConfigError(f"duplicate field '{full}' ({_where(knode)})")
        kwargs[key] = _value(cls, key, hints[key], vnode, full)
    try:
        obj = cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc} ({_where(node)})") from None
    _check(obj, path, node)
    return obj


def _value(cls, key, typ, node, path):
    if dataclasses.is_dataclass(typ):
        return _build(typ, node, path)
    if typ is list:
        if not isinstance(node, yaml.SequenceNode):
            raise ConfigError(f"{path}: expected a list ({_where(node)})")
        if key == "obstacles":
            return [_build(ObstacleConfig, item, f"{path}[{i}]") for i, item in enumerate(node.value)]
        vals = [_scalar(item, float, f"{path}[{i}]") for i, item in enumerate(node.value)]
        n = _VECTOR_LEN.get(key)
        if n is not None and len(vals) != n:
            raise ConfigError(f"{path}: expected {n} values, got {len(vals)} ({_where(node)})")
        return vals
    return _scalar(node, typ, path)


def _check(obj, path, node):
    section = path.split(".")[-1] if path else ""
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        choices = _CHOICES.get((section, f.name))
        if choices and val not in choices:
            raise ConfigError(f"{path}.{f.name}: must be one of {', '.join(choices)} ({_where(node)})")
        positive = f.name.endswith(("_s", "_kg", "radius_m")) or f.name in ("horizon", "iterations")
        if section == "payload" or f.name.startswith("latency"):
            positive = False
        if positive and isinstance(val, (int, float)) and val <= 0:
            raise ConfigError(f"{path}.{f.name}: must be positive ({_where(node)})")
        if f.name.endswith("probability") and not 0.0 <= val <= 1.0:
            raise ConfigError(f"{path}.{f.name}: must lie in [0, 1] ({_where(node)})")
        if f.name.endswith(("_std_m", "_std_rad", "_std_mps", "_std_rps", "_force_n")) and val < 0:
            raise ConfigError(f"{path}.{f.name}: must be non-negative ({_where(node)})")


def parse_config(text: str, source: str = "<string>") -> ScenarioConfig:
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if node is None:
        return ScenarioConfig()
    cfg = _build(ScenarioConfig, node, "")
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {cfg.schema_version} is not supported (expected {SCHEMA_VERSION})")
    return cfg


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def default_config_text() -> str:
    return resources.files("freeflyer").joinpath("data/default_scenario.yaml").read_text()


def default_config() -> ScenarioConfig:
    return parse_config(default_config_text(), "default_scenario.yaml")


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


class _Dumper(yaml.SafeDumper):
    pass


_Dumper.add_representer(list, lambda d, v: d.represent_sequence("tag:yaml.org,2002:seq", v,
                                                                 flow_style=not any(isinstance(i, dict) for i in v)))


def dump_config(cfg: ScenarioConfig) -> str:
    """Serialize; ``parse_config(dump_config(c)) == c``."""
    return yaml.dump(to_dict(cfg), Dumper=_Dumper, sort_keys=False, default_flow_style=False)
