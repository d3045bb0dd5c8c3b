"""Discrete LQR steering: midpoint-Euler discretization, iterative Riccati
solution with per-speed-bucket gain caching, and curvature feedforward.

The feedforward is the steady-state-zeroing steer for the kinematic plant
this package simulates.  On a constant-curvature arc the equilibrium has
e_phi = -beta (beta = kinematic sideslip b*kappa) and the error model
reports d_dot = -v sin(beta), so zeroing the stationary lateral offset
requires cancelling both the e_phi gain k3 and the d_dot gain k2:

    steer_ff = kappa * (L - b * (k3 + k2 * v_x))

Tire-stiffness corrections cancel exactly for a slip-free plant and are
deliberately absent.
"""

from dataclasses import dataclass, field

import numpy as np

from .vehicle import VehicleParams, dynamic_matrices
from .reference_line import LateralErrorState

DEFAULT_Q_DIAG = (1.0, 0.0, 1.0, 0.0)
DEFAULT_R = 10.0
DEFAULT_DT = 0.01        # s, controller rate
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 1000
SPEED_BUCKET = 1.0       # m/s, gain-schedule granularity


class RiccatiError(RuntimeError):
    """Riccati iteration failed to converge or stabilize."""


@dataclass(frozen=True)
class LqrWeights:
    Q: np.ndarray = field(default_factory=lambda: np.diag(DEFAULT_Q_DIAG))
    R: float = DEFAULT_R
    dt: float = DEFAULT_DT
    max_iter: int = DEFAULT_MAX_ITER
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        object.__setattr__(self, "Q", Q)
        if not np.allclose(Q, Q.T):
            raise ValueError("Q must be symmetric")
        if np.any(np.linalg.eigvalsh(Q) < -1e-12):
            raise ValueError("Q must be positive semidefinite")
        if self.R <= 0.0 or self.tol <= 0.0 or self.dt <= 0.0:
            raise ValueError("R, tol and dt must be positive")


@dataclass(frozen=True)
class LqrGain:
    K: np.ndarray          # 1x4 feedback gain (k1, k2, k3, k4)
    P: np.ndarray          # converged Riccati matrix
    iterations: int
    v_x_bucket: float      # speed this gain was computed for, m/s


def discretize(A: np.ndarray, B: np.ndarray, dt: float):
    """Midpoint-Euler discretization: Ad = (I - A dt/2)^-1 (I + A dt/2), Bd = B dt."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n = A.shape[0]
    eye = np.eye(n)
    M = eye - A * (dt / 2.0)
    if abs(np.linalg.det(M)) < 1e-12:
        raise ValueError(f"(I - A*dt/2) is singular for dt={dt}; A={A!r}")
    Ad = np.linalg.solve(M, eye + A * (dt / 2.0))
    return Ad, B * dt


def solve_dare(Ad: np.ndarray, Bd: np.ndarray, weights: LqrWeights,
               v_x_bucket: float = 0.0) -> LqrGain:
    """Iterate P <- Q + Ad^T P (I + Bd R^-1 Bd^T P)^-1 Ad from P = Q.

    Stops when the infinity norm of the update drops below weights.tol;
    fails if it does not, or if the closed loop is unstable.
    """
    Ad = np.atleast_2d(np.asarray(Ad, dtype=float))
    Bd = np.asarray(Bd, dtype=float).reshape(Ad.shape[0], -1)
    n = Ad.shape[0]
    Q = weights.Q if weights.Q.shape == (n, n) else np.atleast_2d(weights.Q)
    R_inv = 1.0 / weights.R

    P = Q.copy()
    residual = np.inf
    for it in range(1, weights.max_iter + 1):
        inner = np.eye(n) + (Bd * R_inv) @ (Bd.T @ P)
        P_next = Q + Ad.T @ P @ np.linalg.solve(inner, Ad)
        residual = float(np.max(np.abs(P_next - P)))
        P = P_next
        if residual < weights.tol:
            break
    else:
        raise RiccatiError(f"Riccati iteration did not converge in "
                           f"{weights.max_iter} iterations (residual {residual:.3e})")

    K = np.linalg.solve(weights.R + Bd.T @ P @ Bd, Bd.T @ P @ Ad)
    closed = Ad - Bd @ K
    rho = float(np.max(np.abs(np.linalg.eigvals(closed))))
    if rho >= 1.0:
        raise RiccatiError(f"closed loop unstable: spectral radius {rho:.6f}")
    return LqrGain(K=K, P=P, iterations=it, v_x_bucket=v_x_bucket)


class GainSchedule:
    """Per-speed-bucket LQR gain cache (single writer, read-mostly)."""

    def __init__(self, params: VehicleParams, weights: LqrWeights | None = None):
        self.params = params
        self.weights = weights if weights is not None else LqrWeights()
        self._cache: dict[float, LqrGain] = {}

    def bucket(self, v_x: float) -> float:
        return round(v_x / SPEED_BUCKET) * SPEED_BUCKET

    def gain_for_speed(self, v_x: float) -> LqrGain:
        b = self.bucket(v_x)
        gain = self._cache.get(b)
        if gain is None:
            A, B, _ = dynamic_matrices(self.params, b)
            Ad, Bd = discretize(A, B, self.weights.dt)
            gain = solve_dare(Ad, Bd, self.weights, v_x_bucket=b)
            self._cache[b] = gain
        return gain


def feedforward(gain: LqrGain, params: VehicleParams, v_x: float, kappa: float) -> float:
    """Curvature feedforward steer zeroing steady-state d on a constant arc."""
    k2 = float(gain.K[0, 1])
    k3 = float(gain.K[0, 2])
    return kappa * (params.wheelbase - params.b * (k3 + k2 * v_x))


def steer_command(gain: LqrGain, err: LateralErrorState,
                  steer_ff: float, steer_limit: float) -> float:
    """u = -K e + steer_ff, saturated to +-steer_limit."""
    u = float(-(gain.K @ err.as_vector())[0]) + steer_ff
    return min(max(u, -steer_limit), steer_limit)
