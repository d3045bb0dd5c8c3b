"""Bicycle-model plant kinematics and the lateral-error dynamics matrices.

The continuous plant is the kinematic single-track model

    x_dot     = v * cos(theta + beta)
    y_dot     = v * sin(theta + beta)
    theta_dot = v * (tan(delta_f) + tan(delta_r)) / L

with beta the center-of-mass sideslip implied by the steering geometry,
beta = atan((b * tan(delta_f) + a * tan(delta_r)) / L).

``dynamic_matrices`` returns the 4-state lateral tracking-error model
e = (d, d_dot, e_phi, e_phi_dot) used by the LQR steering controller:

    e_dot = A e + B delta_f + C theta_r_dot

Sign convention note: the damping entries of A carry negative signs
(stable open loop).  A sign-free variant of the same entries, i.e. the
velocity-coupled stiffness terms with all-positive signs

    (Caf+Car)/(m vx),  (a Caf - b Car)/(m vx),
    (a Caf - b Car)/(I vx),  (a^2 Caf + b^2 Car)/(I vx)

is open-loop divergent; this module uses the stable convention, which
flips the sign of exactly those stiffness terms.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

# Matrices blow up at standstill (1/vx terms); lateral control is inactive
# below walking speed, so vx is clamped to this floor.
V_FLOOR = 0.5

# Default plant parameters used by tests and shipped scenarios.
DEFAULT_MASS = 1500.0          # kg
DEFAULT_INERTIA = 2500.0       # kg m^2
DEFAULT_A = 1.2                # m, CoG to front axle
DEFAULT_B = 1.6                # m, CoG to rear axle
DEFAULT_CAF = 80000.0          # N/rad
DEFAULT_CAR = 80000.0          # N/rad
DEFAULT_STEER_LIMIT = 0.6      # rad
DEFAULT_V_MAX = 20.0           # m/s
DEFAULT_A_MIN = -6.0           # m/s^2
DEFAULT_A_MAX = 2.5            # m/s^2
DEFAULT_JERK_MAX = 5.0         # m/s^3


def wrap_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class VehicleParams:
    """Plant and controller-model parameters."""

    m: float = DEFAULT_MASS            # mass, kg
    inertia: float = DEFAULT_INERTIA   # yaw moment of inertia, kg m^2
    a: float = DEFAULT_A               # CoG to front axle, m
    b: float = DEFAULT_B               # CoG to rear axle, m
    c_af: float = DEFAULT_CAF          # front cornering stiffness, N/rad
    c_ar: float = DEFAULT_CAR          # rear cornering stiffness, N/rad
    steer_limit: float = DEFAULT_STEER_LIMIT  # max |delta_f|, rad
    v_max: float = DEFAULT_V_MAX       # m/s
    a_min: float = DEFAULT_A_MIN       # m/s^2 (braking, negative)
    a_max: float = DEFAULT_A_MAX       # m/s^2
    jerk_max: float = DEFAULT_JERK_MAX  # m/s^3

    def __post_init__(self):
        if min(self.m, self.inertia, self.a, self.b, self.c_af, self.c_ar) <= 0.0:
            raise ValueError("masses, lengths and stiffnesses must be strictly positive")
        if not (self.a_min < 0.0 < self.a_max):
            raise ValueError("acceleration limits must satisfy a_min < 0 < a_max")
        if self.steer_limit <= 0.0 or self.v_max <= 0.0 or self.jerk_max <= 0.0:
            raise ValueError("steer_limit, v_max and jerk_max must be positive")

    @property
    def wheelbase(self) -> float:
        """Wheelbase L = a + b, m."""
        return self.a + self.b


@dataclass(frozen=True)
class VehicleState:
    """World-frame plant state."""

    x: float = 0.0         # m
    y: float = 0.0         # m
    theta: float = 0.0     # heading, rad, wrapped to (-pi, pi]
    v: float = 0.0         # speed, m/s, >= 0
    beta: float = 0.0      # sideslip at CoG, rad
    yaw_rate: float = 0.0  # rad/s
    t: float = 0.0         # s

    def __post_init__(self):
        fields = (self.x, self.y, self.theta, self.v, self.beta, self.yaw_rate, self.t)
        if not all(math.isfinite(f) for f in fields):
            raise ValueError("vehicle state must be finite")
        if self.v < 0.0:
            raise ValueError("speed must be non-negative")
        if not (-math.pi < self.theta <= math.pi + 1e-12):
            object.__setattr__(self, "theta", wrap_angle(self.theta))


@dataclass(frozen=True)
class ControlCommand:
    """Actuator command for one control tick."""

    steer: float = 0.0       # front steering delta_f, rad
    steer_rear: float = 0.0  # rear steering delta_r, rad (0 in all scenarios)
    accel: float = 0.0       # commanded longitudinal acceleration, m/s^2
    throttle: float = 0.0    # normalized, [0, 1]
    brake: float = 0.0       # normalized, [0, 1]

    def __post_init__(self):
        if not (0.0 <= self.throttle <= 1.0 and 0.0 <= self.brake <= 1.0):
            raise ValueError("throttle and brake must lie in [0, 1]")
        if self.throttle > 0.0 and self.brake > 0.0:
            raise ValueError("throttle and brake are mutually exclusive")


def sideslip(params: VehicleParams, steer: float, steer_rear: float = 0.0) -> float:
    """CoG sideslip implied by the steering geometry, rad."""
    return math.atan((params.b * math.tan(steer) + params.a * math.tan(steer_rear))
                     / params.wheelbase)


def kinematic_step(state: VehicleState, cmd: ControlCommand,
                   params: VehicleParams, dt: float) -> VehicleState:
    """Advance the plant by dt seconds with fixed-step RK4.

    The commanded acceleration is clamped to [a_min, a_max] and the speed
    is kept non-negative; steering is clamped to the steer limit.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")

    steer = min(max(cmd.steer, -params.steer_limit), params.steer_limit)
    steer_rear = min(max(cmd.steer_rear, -params.steer_limit), params.steer_limit)
    accel = min(max(cmd.accel, params.a_min), params.a_max)

    beta = sideslip(params, steer, steer_rear)
    turn = (math.tan(steer) + math.tan(steer_rear)) / params.wheelbase

    def deriv(x, y, theta, v):
        v_eff = max(v, 0.0)
        return (v_eff * math.cos(theta + beta),
                v_eff * math.sin(theta + beta),
                v_eff * turn,
                accel if (v_eff > 0.0 or accel > 0.0) else 0.0)

    s0 = (state.x, state.y, state.theta, state.v)
    k1 = deriv(*s0)
    k2 = deriv(*(s0[i] + 0.5 * dt * k1[i] for i in range(4)))
    k3 = deriv(*(s0[i] + 0.5 * dt * k2[i] for i in range(4)))
    k4 = deriv(*(s0[i] + dt * k3[i] for i in range(4)))

    x, y, theta, v = (s0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                      for i in range(4))
    v = max(v, 0.0)

    return replace(state,
                   x=x, y=y,
                   theta=wrap_angle(theta),
                   v=v,
                   beta=beta,
                   yaw_rate=v * turn,
                   t=state.t + dt)


def dynamic_matrices(params: VehicleParams, v_x: float):
    """Lateral-error dynamics (A, B, C) for state (d, d_dot, e_phi, e_phi_dot).

    e_dot = A e + B delta_f + C theta_r_dot.  v_x below V_FLOOR is clamped
    to the floor rather than rejected.
    """
    vx = max(v_x, V_FLOOR)
    m, iz, a, b = params.m, params.inertia, params.a, params.b
    caf, car = params.c_af, params.c_ar

    A = np.zeros((4, 4))
    A[0, 1] = 1.0
    A[1, 1] = -(caf + car) / (m * vx)
    A[1, 2] = (caf + car) / m
    A[1, 3] = -(a * caf - b * car) / (m * vx)
    A[2, 3] = 1.0
    A[3, 1] = -(a * caf - b * car) / (iz * vx)
    A[3, 2] = (a * caf - b * car) / iz
    A[3, 3] = -(a * a * caf + b * b * car) / (iz * vx)

    B = np.zeros((4, 1))
    B[1, 0] = caf / m
    B[3, 0] = a * caf / iz

    C = np.zeros((4, 1))
    C[1, 0] = -(a * caf - b * car) / (m * vx) - vx
    C[3, 0] = -(a * a * caf + b * b * car) / (iz * vx)

    return A, B, C
