"""Run configuration: every tunable of the stack with its documented
default, loadable from a JSON file.  Unknown keys are rejected so typos
fail loudly at parse time."""

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import longitudinal_control as lon
from . import simulation as sim
from .lateral_control import (DEFAULT_DT, DEFAULT_MAX_ITER, DEFAULT_Q_DIAG,
                              DEFAULT_R, DEFAULT_TOL, LqrWeights)
from .path_planner import PathPlannerConfig
from .speed_planner import SpeedPlannerConfig
from .trajectory import MpcConfig

TRACKER_MODES = ("dlqr_pid", "mpc")


@dataclass(frozen=True)
class RunConfig:
    tracker: str = "dlqr_pid"
    dt_control: float = sim.DT_CONTROL
    plan_period: float = sim.PLAN_PERIOD
    compose_horizon: float = sim.COMPOSE_HORIZON
    compose_dt: float = sim.COMPOSE_DT
    actuator_tau: float = lon.ACTUATOR_TAU
    deadband: float = lon.DEADBAND
    lqr_q_diag: tuple = DEFAULT_Q_DIAG
    lqr_r: float = DEFAULT_R
    lqr_dt: float = DEFAULT_DT
    lqr_tol: float = DEFAULT_TOL
    lqr_max_iter: int = DEFAULT_MAX_ITER
    station_pid: dict = field(default_factory=lambda: {
        "kp": lon.STATION_KP, "ki": lon.STATION_KI, "kd": lon.STATION_KD})
    speed_pid: dict = field(default_factory=lambda: {
        "kp": lon.SPEED_KP, "ki": lon.SPEED_KI, "kd": lon.SPEED_KD})
    path: PathPlannerConfig = field(default_factory=PathPlannerConfig)
    speed: SpeedPlannerConfig = field(default_factory=SpeedPlannerConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)

    def __post_init__(self):
        if self.tracker not in TRACKER_MODES:
            raise ValueError(f"tracker must be one of {TRACKER_MODES}")
        if self.dt_control <= 0.0 or self.plan_period <= 0.0:
            raise ValueError("rates must be positive")
        ratio = self.plan_period / self.dt_control
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("plan_period must be an integer multiple of dt_control")
        lon.PidConfig(**self.station_pid)  # validates gains
        lon.PidConfig(**self.speed_pid)

    def lqr_weights(self) -> LqrWeights:
        return LqrWeights(Q=np.diag(self.lqr_q_diag), R=self.lqr_r,
                          dt=self.lqr_dt, max_iter=self.lqr_max_iter,
                          tol=self.lqr_tol)


def _build(cls, data: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    for key, cls in (("path", PathPlannerConfig), ("speed", SpeedPlannerConfig),
                     ("mpc", MpcConfig)):
        if key in data:
            data[key] = _build(cls, data[key])
    if "lqr_q_diag" in data:
        data["lqr_q_diag"] = tuple(data["lqr_q_diag"])
    return _build(RunConfig, data)


def load_config(path) -> RunConfig:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    try:
        return config_from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{path}: {exc}") from exc


def config_to_dict(cfg: RunConfig) -> dict:
    out = asdict(cfg)
    out["lqr_q_diag"] = list(cfg.lqr_q_diag)
    return out


def apply_override(cfg: RunConfig, key: str, value):
    """Override one (possibly dotted) config key, returning a new config."""
    data = config_to_dict(cfg)
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ValueError(f"unknown config group '{p}' in '{key}'")
        node = node[p]
    if parts[-1] not in node:
        raise ValueError(f"unknown config key '{key}'")
    node[parts[-1]] = value
    return config_from_dict(data)
