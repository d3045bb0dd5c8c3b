"""Deterministic closed-loop simulation.

Fixed rates: plant and controllers at 100 Hz, planners at 10 Hz (exactly
ten control ticks per planning cycle).  Runs are pure functions of
(scenario, config): identical inputs give bit-identical logs.  Dynamic
obstacles are replayed open loop from their scenario trajectories; the
planners only ever see sampled constant-velocity predictions.
"""

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import longitudinal_control as lon
from .lateral_control import GainSchedule, LqrWeights, feedforward, steer_command
from .path_planner import (PathPlannerConfig, PathQp, PlanningFailure,
                           dp_path_search, extract_corridor, project_obstacles)
from .reference_line import ReferenceLine, build_reference, error_state, project
from .speed_planner import (PredictedObstacle, SpeedPlannerConfig, SpeedProfile,
                            SpeedQp, build_st_regions, emergency_profile,
                            plan_speed)
from .trajectory import MpcConfig, MpcTracker, compose_local_trajectory
from .vehicle import ControlCommand, VehicleParams, VehicleState, kinematic_step

DT_CONTROL = 0.01       # s, plant and controller tick
PLAN_PERIOD = 0.1       # s, planner cycle
COMPOSE_HORIZON = 2.0   # s, local trajectory span handed to the trackers
COMPOSE_DT = 0.1        # s, local trajectory sampling
PREDICTION_DT = 0.25    # s, obstacle prediction sampling
BACK_PAD = 5.0          # m, local line extension behind the vehicle

# Ego footprint: rectangle centered 1.4 m behind the front axle.
EGO_LENGTH = 4.8
EGO_WIDTH = 1.9
EGO_CENTER_BEHIND_FRONT_AXLE = 1.4


@dataclass(frozen=True)
class DynamicObstacle:
    """Waypoint-timed obstacle trajectory with a translating footprint."""

    times: np.ndarray       # s, strictly increasing
    positions: np.ndarray   # (k, 2) world positions of the footprint center
    footprint: np.ndarray   # (m, 2) local polygon vertices

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        fp = np.asarray(self.footprint, dtype=float).reshape(-1, 2)
        if len(t) != len(pos) or len(t) < 1:
            raise ValueError("times and positions must have equal nonzero length")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("obstacle times must be strictly increasing")
        if len(fp) < 3:
            raise ValueError("footprint needs at least 3 vertices")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "footprint", fp)

    def position_at(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.times, self.positions[:, 0]),
                         np.interp(t, self.times, self.positions[:, 1])])

    def velocity_at(self, t: float) -> np.ndarray:
        if len(self.times) < 2 or t >= self.times[-1] or t < self.times[0]:
            return np.zeros(2)
        i = min(int(np.searchsorted(self.times, t, side="right")), len(self.times) - 1)
        dt = self.times[i] - self.times[i - 1]
        return (self.positions[i] - self.positions[i - 1]) / dt

    def polygon_at(self, t: float) -> np.ndarray:
        return self.footprint + self.position_at(t)


@dataclass(frozen=True)
class Scenario:
    name: str
    waypoints: np.ndarray
    v_ref: float
    road_half_width: float
    duration: float
    vehicle: VehicleParams = VehicleParams()
    static_obstacles: tuple = ()
    dynamic_obstacles: tuple = ()
    initial_state: VehicleState | None = None

    def __post_init__(self):
        object.__setattr__(self, "waypoints",
                           np.asarray(self.waypoints, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "static_obstacles",
                           tuple(np.asarray(p, dtype=float).reshape(-1, 2)
                                 for p in self.static_obstacles))
        object.__setattr__(self, "dynamic_obstacles", tuple(self.dynamic_obstacles))
        if self.duration <= 0.0:
            raise ValueError("duration must be positive")
        if self.v_ref < 0.0 or self.v_ref > self.vehicle.v_max:
            raise ValueError("v_ref must lie in [0, v_max]")
        if self.road_half_width <= 0.0:
            raise ValueError("road_half_width must be positive")


def scenario_from_dict(data: dict) -> Scenario:
    """Build a scenario from parsed JSON, rejecting unknown keys."""
    known = {"name", "waypoints", "v_ref", "road_half_width", "duration",
             "vehicle", "static_obstacles", "dynamic_obstacles", "initial_state"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
    vehicle = VehicleParams(**data.get("vehicle", {}))
    dyn = tuple(DynamicObstacle(times=np.asarray(d["times"], dtype=float),
                                positions=np.asarray(d["positions"], dtype=float),
                                footprint=np.asarray(d["footprint"], dtype=float))
                for d in data.get("dynamic_obstacles", ()))
    init = None
    if data.get("initial_state") is not None:
        init = VehicleState(**data["initial_state"])
    return Scenario(name=data["name"],
                    waypoints=np.asarray(data["waypoints"], dtype=float),
                    v_ref=float(data["v_ref"]),
                    road_half_width=float(data["road_half_width"]),
                    duration=float(data["duration"]),
                    vehicle=vehicle,
                    static_obstacles=tuple(np.asarray(p, dtype=float)
                                           for p in data.get("static_obstacles", ())),
                    dynamic_obstacles=dyn,
                    initial_state=init)


def load_scenario(path) -> Scenario:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    try:
        return scenario_from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: {exc}") from exc


def validate_scenario(sc: Scenario) -> list[str]:
    """Invariant check; returns human-readable problems (empty = valid)."""
    problems = []
    try:
        ref = build_reference(sc.waypoints)
    except ValueError as exc:
        return [f"waypoints: {exc}"]
    state = initial_vehicle_state(sc, ref)
    pose = project(ref, (state.x, state.y))
    if pose.clamped or abs(pose.l) >= sc.road_half_width:
        problems.append(f"initial state off the road: |l| = {abs(pose.l):.2f} "
                        f">= {sc.road_half_width}")
    if sc.duration * sc.v_ref > ref.length * 1.5:
        problems.append("reference line is much shorter than v_ref * duration")
    return problems


def initial_vehicle_state(sc: Scenario, ref: ReferenceLine) -> VehicleState:
    if sc.initial_state is not None:
        return sc.initial_state
    x0, y0 = ref.points[0]
    return VehicleState(x=float(x0), y=float(y0),
                        theta=float(ref.headings[0]), v=sc.v_ref)


def ego_polygon(state: VehicleState, params: VehicleParams) -> np.ndarray:
    """Oriented ego rectangle in world coordinates."""
    cx_off = params.a - EGO_CENTER_BEHIND_FRONT_AXLE
    c, s = math.cos(state.theta), math.sin(state.theta)
    half_l, half_w = EGO_LENGTH / 2.0, EGO_WIDTH / 2.0
    corners = np.array([[half_l, half_w], [half_l, -half_w],
                        [-half_l, -half_w], [-half_l, half_w]])
    corners[:, 0] += cx_off
    rot = np.array([[c, -s], [s, c]])
    return corners @ rot.T + np.array([state.x, state.y])


def _project_interval(poly: np.ndarray, axis: np.ndarray):
    d = poly @ axis
    return float(d.min()), float(d.max())


def polygons_collide(p1: np.ndarray, p2: np.ndarray) -> bool:
    """Separating-axis test for convex polygons; touching counts as overlap."""
    for poly in (p1, p2):
        for i in range(len(poly)):
            edge = poly[(i + 1) % len(poly)] - poly[i]
            norm = math.hypot(edge[0], edge[1])
            if norm < 1e-12:
                continue
            axis = np.array([-edge[1], edge[0]]) / norm
            lo1, hi1 = _project_interval(p1, axis)
            lo2, hi2 = _project_interval(p2, axis)
            if hi1 < lo2 or hi2 < lo1:
                return False
    return True


def _point_segment_dist(p, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom < 1e-18 else min(max(float((p - a) @ ab) / denom, 0.0), 1.0)
    return float(np.hypot(*(p - (a + t * ab))))


def polygon_distance(p1: np.ndarray, p2: np.ndarray) -> float:
    """Euclidean gap between convex polygons (0 on overlap)."""
    if polygons_collide(p1, p2):
        return 0.0
    best = math.inf
    for pa, pb in ((p1, p2), (p2, p1)):
        for v in pa:
            for i in range(len(pb)):
                best = min(best, _point_segment_dist(v, pb[i], pb[(i + 1) % len(pb)]))
    return best


def collision_check(state: VehicleState, params: VehicleParams, obstacles) -> bool:
    """True when the ego rectangle overlaps any obstacle polygon."""
    ego = ego_polygon(state, params)
    return any(polygons_collide(ego, np.asarray(poly)) for poly in obstacles)


@dataclass
class CycleLog:
    index: int
    t: float
    path_stations: np.ndarray
    path_l: np.ndarray
    path_dl: np.ndarray
    path_ddl: np.ndarray
    dp_times: np.ndarray
    dp_s: np.ndarray
    speed: SpeedProfile
    regions: list
    trajectory_jerk: np.ndarray
    degraded: bool
    emergency: bool


@dataclass
class SimLog:
    columns: dict = field(default_factory=dict)
    cycles: list = field(default_factory=list)
    collision_events: list = field(default_factory=list)
    planning_failed: bool = False
    failure_message: str = ""

    COLUMN_ORDER = ("t", "x", "y", "theta", "v", "d", "e_phi",
                    "steer", "throttle", "brake", "accel")

    def as_arrays(self) -> dict:
        return {k: np.asarray(v) for k, v in self.columns.items()}

    def write_csvs(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = self.columns
        with open(out / "log.csv", "w") as f:
            f.write(",".join(self.COLUMN_ORDER) + "\n")
            for i in range(len(cols["t"])):
                f.write(",".join(repr(float(cols[c][i])) for c in self.COLUMN_ORDER) + "\n")
        cyc_dir = out / "cycles"
        cyc_dir.mkdir(exist_ok=True)
        with open(cyc_dir / "index.csv", "w") as f:
            f.write("cycle,t,degraded,emergency,n_regions\n")
            for c in self.cycles:
                f.write(f"{c.index},{c.t!r},{int(c.degraded)},{int(c.emergency)},"
                        f"{len(c.regions)}\n")
        for c in self.cycles:
            base = cyc_dir / f"cycle_{c.index:04d}"
            with open(f"{base}_path.csv", "w") as f:
                f.write("s,l,dl,ddl\n")
                for row in zip(c.path_stations, c.path_l, c.path_dl, c.path_ddl):
                    f.write(",".join(repr(float(v)) for v in row) + "\n")
            with open(f"{base}_speed_dp.csv", "w") as f:
                f.write("t,s\n")
                for row in zip(c.dp_times, c.dp_s):
                    f.write(",".join(repr(float(v)) for v in row) + "\n")
            with open(f"{base}_speed.csv", "w") as f:
                f.write("t,s,v,a\n")
                for row in zip(c.speed.times, c.speed.s, c.speed.s_dot, c.speed.s_ddot):
                    f.write(",".join(repr(float(v)) for v in row) + "\n")
            with open(f"{base}_st.csv", "w") as f:
                f.write("obstacle_id,t,s_lower,s_upper\n")
                for reg in c.regions:
                    for row in zip(reg.times, reg.s_lower, reg.s_upper):
                        f.write(f"{reg.obstacle_id}," +
                                ",".join(repr(float(v)) for v in row) + "\n")
        with open(out / "events.csv", "w") as f:
            f.write("t_start,t_end\n")
            for t0, t1 in self.collision_events:
                f.write(f"{t0!r},{t1!r}\n")


@dataclass(frozen=True)
class Metrics:
    rms_lateral_error: float
    max_lateral_error: float
    min_obstacle_clearance: float
    brake_active_intervals: tuple
    collision_count: int
    extra_mileage_ratio: float

    def to_dict(self) -> dict:
        return {"rms_lateral_error": self.rms_lateral_error,
                "max_lateral_error": self.max_lateral_error,
                "min_obstacle_clearance": self.min_obstacle_clearance,
                "brake_active_intervals": [list(iv) for iv in self.brake_active_intervals],
                "collision_count": self.collision_count,
                "extra_mileage_ratio": self.extra_mileage_ratio}


def brake_intervals(t: np.ndarray, brake: np.ndarray, hysteresis: float = 0.1):
    """Contiguous brake-active spans; gaps and blips under the hysteresis
    window are merged away."""
    active = brake > 0.0
    raw = []
    start = None
    for i in range(len(t)):
        if active[i] and start is None:
            start = t[i]
        elif not active[i] and start is not None:
            raw.append([start, t[i]])
            start = None
    if start is not None:
        raw.append([start, t[-1]])
    merged = []
    for iv in raw:
        if merged and iv[0] - merged[-1][1] < hysteresis:
            merged[-1][1] = iv[1]
        else:
            merged.append(iv)
    return tuple((a, b) for a, b in merged if b - a >= hysteresis)


def compute_metrics(log: SimLog, sc: Scenario) -> Metrics:
    cols = log.as_arrays()
    if len(cols["t"]) == 0:
        raise ValueError("empty log")
    d = cols["d"]
    rms = float(np.sqrt(np.mean(d * d)))
    dmax = float(np.max(np.abs(d)))

    clearance = math.inf
    statics = [np.asarray(p) for p in sc.static_obstacles]
    for i in range(len(cols["t"])):
        state = VehicleState(x=cols["x"][i], y=cols["y"][i], theta=cols["theta"][i],
                             v=max(cols["v"][i], 0.0), t=cols["t"][i])
        ego = ego_polygon(state, sc.vehicle)
        for poly in statics:
            clearance = min(clearance, polygon_distance(ego, poly))
        for dyn in sc.dynamic_obstacles:
            clearance = min(clearance, polygon_distance(ego, dyn.polygon_at(cols["t"][i])))

    ref = build_reference(sc.waypoints)
    driven = float(np.sum(np.hypot(np.diff(cols["x"]), np.diff(cols["y"]))))
    s0 = project(ref, (cols["x"][0], cols["y"][0])).s
    s1 = project(ref, (cols["x"][-1], cols["y"][-1])).s
    ratio = driven / max(s1 - s0, 1e-9)

    return Metrics(rms_lateral_error=rms,
                   max_lateral_error=dmax,
                   min_obstacle_clearance=float(clearance),
                   brake_active_intervals=brake_intervals(cols["t"], cols["brake"]),
                   collision_count=len(log.collision_events),
                   extra_mileage_ratio=ratio)


class _PlannerRuntime:
    """Per-run planning state: cached QP structures and warm starts."""

    def __init__(self, sc: Scenario, ref: ReferenceLine, config):
        self.sc = sc
        self.ref = ref
        self.cfg = config
        self.path_cfg: PathPlannerConfig = config.path
        self.speed_cfg: SpeedPlannerConfig = config.speed
        n_corridor = int(round(self.path_cfg.horizon / self.path_cfg.corridor_ds)) + 1
        self.path_qp = PathQp(n_corridor, self.path_cfg.corridor_ds, self.path_cfg)
        self.speed_qp = SpeedQp(sc.vehicle, self.speed_cfg)
        self.static_sl = None  # projected lazily, static scene

    def plan(self, state: VehicleState, accel: float, t: float):
        sc, ref = self.sc, self.ref
        err = error_state(ref, state)
        pose = project(ref, (state.x, state.y))
        s_ego = pose.s
        kappa = float(ref.curvature_at(s_ego))
        s_dot = abs(state.v) * math.cos(err.e_phi) / (1.0 - kappa * err.d)
        l0 = err.d
        dl0 = err.d_dot / max(s_dot, 0.5)

        if self.static_sl is None:
            self.static_sl = project_obstacles(ref, sc.static_obstacles,
                                               buffer=self.path_cfg.hard_margin
                                               + EGO_WIDTH / 2.0)
        dp_path, lattice = dp_path_search(s_ego, l0, self.static_sl, self.path_cfg,
                                          half_width=sc.road_half_width)
        corridor = extract_corridor(s_ego, l0, lattice.s_samples, dp_path,
                                    self.static_sl, sc.road_half_width,
                                    EGO_WIDTH, self.path_cfg)
        path = self.path_qp.solve(corridor, l0, dl0, 0.0)

        predictions = self._predict(t)
        regions = build_st_regions(ref, path.stations, path.l, predictions,
                                   self.speed_cfg.horizon, s_ego,
                                   EGO_LENGTH, EGO_WIDTH,
                                   self.speed_cfg.buffer, self.speed_cfg)
        speed, dp_t, dp_s = plan_speed(regions, state.v, accel, sc.v_ref,
                                       sc.vehicle, self.speed_qp, self.speed_cfg)
        return path, speed, regions, dp_t, dp_s

    def _predict(self, t: float) -> list[PredictedObstacle]:
        preds = []
        cfg = self.speed_cfg
        taus = np.arange(0.0, cfg.horizon + PREDICTION_DT / 2.0, PREDICTION_DT)
        for i, dyn in enumerate(self.sc.dynamic_obstacles):
            pos = dyn.position_at(t)
            vel = dyn.velocity_at(t)
            polys = [dyn.footprint + (pos + vel * tau) for tau in taus]
            preds.append(PredictedObstacle(obstacle_id=i, times=taus, polygons=polys))
        return preds


def run_scenario(sc: Scenario, config=None) -> SimLog:
    """Run the closed loop; returns the full in-memory log."""
    from .config import RunConfig
    config = config if config is not None else RunConfig()

    ref = build_reference(sc.waypoints)
    params = sc.vehicle
    state = initial_vehicle_state(sc, ref)
    log = SimLog(columns={k: [] for k in SimLog.COLUMN_ORDER})

    planner = _PlannerRuntime(sc, ref, config)
    gains = GainSchedule(params, config.lqr_weights())
    station_pid = lon.PidConfig(**config.station_pid)
    speed_pid = lon.PidConfig(**config.speed_pid)
    st_station = lon.PidState()
    st_speed = lon.PidState()
    lag = lon.ActuatorLag(tau=config.actuator_tau)
    mpc = MpcTracker(params, config.mpc) if config.tracker == "mpc" else None

    n_ticks = int(round(sc.duration / config.dt_control))
    ticks_per_cycle = int(round(config.plan_period / config.dt_control))

    local_line = None
    pad_len = 0.0
    traj = None
    speed_profile = None
    cycle_t = 0.0
    emergency_mode = False
    in_collision = False
    collision_start = 0.0

    for tick in range(n_ticks):
        t = tick * config.dt_control

        if tick % ticks_per_cycle == 0 and not emergency_mode:
            try:
                path, speed_profile, regions, dp_t, dp_s = planner.plan(state, lag.accel, t)
                traj = compose_local_trajectory(path, speed_profile, ref,
                                                config.compose_horizon,
                                                config.compose_dt)
                local_line, pad_len = _local_line(ref, path, traj)
                cycle_t = t
                log.cycles.append(CycleLog(
                    index=len(log.cycles), t=t,
                    path_stations=path.stations, path_l=path.l,
                    path_dl=path.dl, path_ddl=path.ddl,
                    dp_times=dp_t, dp_s=dp_s, speed=speed_profile,
                    regions=regions, trajectory_jerk=traj.jerk,
                    degraded=speed_profile.degraded,
                    emergency=speed_profile.emergency))
            except PlanningFailure as exc:
                log.planning_failed = True
                log.failure_message = str(exc)
                emergency_mode = True
                speed_profile = emergency_profile(state.v, lag.accel, params,
                                                  config.speed)
                cycle_t = t
                if local_line is None:
                    local_line, pad_len = _fallback_line(ref, state)

        # lateral control against the local planned path
        err = error_state(local_line, state)
        line_pose = project(local_line, (state.x, state.y))
        kappa = float(local_line.curvature_at(line_pose.s))
        if mpc is not None and traj is not None and not emergency_mode:
            steer = mpc.step(state, traj, local_line, t - cycle_t).applied
            steer = min(max(steer, -params.steer_limit), params.steer_limit)
        else:
            gain = gains.gain_for_speed(state.v)
            ff = feedforward(gain, params, state.v, kappa)
            steer = steer_command(gain, err, ff, params.steer_limit)

        # longitudinal control along the plan
        t_rel = t - cycle_t
        s_plan, v_plan, _ = speed_profile.state_at(t_rel)
        s_actual = line_pose.s - pad_len
        target_v, st_station = lon.station_to_speed(
            station_pid, st_station, s_plan - s_actual, v_plan,
            config.dt_control, params.v_max)
        accel_cmd, st_speed = lon.speed_to_accel(
            speed_pid, st_speed, target_v - state.v, config.dt_control,
            params.a_min, params.a_max)
        throttle, brake = lon.actuator_split(accel_cmd, config.deadband,
                                             params.a_min, params.a_max)

        log.columns["t"].append(t)
        log.columns["x"].append(state.x)
        log.columns["y"].append(state.y)
        log.columns["theta"].append(state.theta)
        log.columns["v"].append(state.v)
        log.columns["d"].append(err.d)
        log.columns["e_phi"].append(err.e_phi)
        log.columns["steer"].append(steer)
        log.columns["throttle"].append(throttle)
        log.columns["brake"].append(brake)
        log.columns["accel"].append(accel_cmd)

        obstacles_now = list(sc.static_obstacles) + \
            [dyn.polygon_at(t) for dyn in sc.dynamic_obstacles]
        colliding = collision_check(state, params, obstacles_now)
        if colliding and not in_collision:
            in_collision, collision_start = True, t
        elif not colliding and in_collision:
            in_collision = False
            log.collision_events.append((collision_start, t))

        lag = lag.step(accel_cmd, config.dt_control)
        cmd = ControlCommand(steer=steer, accel=lag.accel,
                             throttle=throttle, brake=brake)
        state = kinematic_step(state, cmd, params, config.dt_control)

        if emergency_mode and state.v <= 1e-3:
            break
        if project(ref, (state.x, state.y)).s >= ref.length - 2.0:
            break  # ran off the end of the reference

    if in_collision:
        log.collision_events.append((collision_start, state.t))
    return log


def _local_line(ref: ReferenceLine, path, traj):
    """Reference line through the composed trajectory with a rear pad."""
    from .reference_line import frenet_to_cartesian
    s0 = float(path.stations[0])
    l0 = float(path.l[0])
    dl0 = float(path.dl[0])
    pad_pts = []
    deltas = np.arange(BACK_PAD, 0.0, -0.5)
    for delta in deltas:
        s = s0 - delta
        if s < 0.0:
            continue
        x, y, _ = frenet_to_cartesian(ref, s, l0 - dl0 * delta)
        pad_pts.append((x, y))
    pts = list(pad_pts)
    last = np.array(pts[-1]) if pts else None
    for x, y in zip(traj.x, traj.y):
        p = np.array([x, y])
        if last is None or np.hypot(*(p - last)) >= 0.45:
            pts.append((x, y))
            last = p
    line = build_reference(np.asarray(pts))
    pad_len = project(line, tuple(np.array([traj.x[0], traj.y[0]]))).s
    return line, pad_len


def _fallback_line(ref: ReferenceLine, state: VehicleState):
    """Straight stub line along the heading when no plan ever existed."""
    c, s = math.cos(state.theta), math.sin(state.theta)
    pts = [(state.x + d * c, state.y + d * s) for d in np.arange(-5.0, 40.0, 0.5)]
    return build_reference(np.asarray(pts)), 5.0
