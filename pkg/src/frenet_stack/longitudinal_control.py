"""Dual-loop PID longitudinal control.

Outer loop: station error along the plan -> target speed.
Inner loop: speed error -> acceleration -> throttle/brake split.

The split is deadbanded and mutually exclusive: at most one actuator is
nonzero on every tick.
"""

import math
from dataclasses import dataclass, replace

# Defaults: tuning focuses on the proportional gains; KI/KD stay small.
STATION_KP = 0.3
STATION_KI = 0.0
STATION_KD = 0.0
SPEED_KP = 1.0
SPEED_KI = 0.1
SPEED_KD = 0.0
DEADBAND = 0.05        # m/s^2, prevents throttle/brake chatter at cruise
INTEGRAL_LIMIT = 2.0
ACTUATOR_TAU = 0.2     # s, first-order lag applied by the simulator plant


@dataclass(frozen=True)
class PidConfig:
    kp: float = 0.0
    ki: float = 0.0
    kd: float = 0.0
    integral_limit: float = INTEGRAL_LIMIT  # anti-windup clamp, >= 0
    output_limit: float = math.inf          # symmetric output clamp, >= 0

    def __post_init__(self):
        if self.integral_limit < 0.0 or self.output_limit < 0.0:
            raise ValueError("limits must be non-negative")
        if not all(math.isfinite(g) for g in (self.kp, self.ki, self.kd)):
            raise ValueError("gains must be finite")


@dataclass(frozen=True)
class PidState:
    integral: float = 0.0
    prev_error: float = 0.0
    initialized: bool = False


def pid_step(cfg: PidConfig, st: PidState, error: float, dt: float):
    """One PID update; returns (output, new_state).

    Forward-Euler integral with anti-windup clamp; the derivative term is
    zero on the first call.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    integral = st.integral + error * dt
    integral = min(max(integral, -cfg.integral_limit), cfg.integral_limit)
    derivative = (error - st.prev_error) / dt if st.initialized else 0.0
    out = cfg.kp * error + cfg.ki * integral + cfg.kd * derivative
    out = min(max(out, -cfg.output_limit), cfg.output_limit)
    return out, PidState(integral=integral, prev_error=error, initialized=True)


def station_to_speed(cfg: PidConfig, st: PidState, station_error: float,
                     v_ref: float, dt: float, v_max: float):
    """Outer loop: target speed from the along-path station error.

    station_error = s_plan(t) - s_actual(t); positive (behind plan)
    raises the target above v_ref.
    """
    correction, st = pid_step(cfg, st, station_error, dt)
    return min(max(v_ref + correction, 0.0), v_max), st


def speed_to_accel(cfg: PidConfig, st: PidState, speed_error: float,
                   dt: float, a_min: float, a_max: float):
    """Inner loop: acceleration command from the speed error."""
    accel, st = pid_step(cfg, st, speed_error, dt)
    return min(max(accel, a_min), a_max), st


def actuator_split(accel: float, deadband: float, a_min: float, a_max: float):
    """Split an acceleration command into (throttle, brake) in [0, 1].

    Inside the deadband both are zero; outside exactly one is nonzero.
    """
    if deadband < 0.0:
        raise ValueError("deadband must be non-negative")
    if accel > deadband:
        return min(1.0, (accel - deadband) / a_max), 0.0
    if accel < -deadband:
        return 0.0, min(1.0, (-accel - deadband) / (-a_min))
    return 0.0, 0.0


@dataclass(frozen=True)
class ActuatorLag:
    """First-order acceleration lag the plant applies to commands."""

    tau: float = ACTUATOR_TAU
    accel: float = 0.0  # current realized acceleration, m/s^2

    def step(self, accel_cmd: float, dt: float) -> "ActuatorLag":
        alpha = dt / (self.tau + dt)
        return replace(self, accel=self.accel + alpha * (accel_cmd - self.accel))
