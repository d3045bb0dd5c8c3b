"""Quintic-polynomial trajectory pieces, path/speed composition, and the
receding-horizon MPC tracker.

The MPC is an error-state formulation: decision variables are steering
deviations du from the kinematic reference steer along the trajectory,
so a vehicle exactly on the trajectory gets exactly the reference
feedforward input back.  The quadratic objective is

    sum_k  Q_e * |e_k|^2  +  R_u * (du_k - du_{k-1})^2  +  R_u_rate * du_k^2

with e = (lateral, heading) error; R_u weights the control change and
R_u_rate the control magnitude.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .qp_solver import StructuredQp
from .reference_line import ReferenceLine, error_state, frenet_to_cartesian
from .vehicle import VehicleParams, VehicleState

MPC_N = 20
MPC_DT = 0.05        # s
MPC_Q_E = 30.0
MPC_R_U = 5.0
MPC_R_U_RATE = 1.0


@dataclass(frozen=True)
class QuinticPolynomial:
    coeffs: np.ndarray  # a0..a5
    t0: float
    T: float

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (6,):
            raise ValueError("quintic needs exactly six coefficients")
        object.__setattr__(self, "coeffs", c)


def quintic_fit(p0: float, v0: float, a0: float, p1: float, v1: float,
                a1: float, T: float, t0: float = 0.0) -> QuinticPolynomial:
    """Unique quintic matching position/velocity/acceleration at both ends."""
    if T <= 0.0:
        raise ValueError("duration must be positive")
    if T < 1e-3:
        raise ValueError(f"duration {T} too short; fit is ill-conditioned")
    M = np.array([
        [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 2.0, 0.0, 0.0, 0.0],
        [1.0, T, T**2, T**3, T**4, T**5],
        [0.0, 1.0, 2*T, 3*T**2, 4*T**3, 5*T**4],
        [0.0, 0.0, 2.0, 6*T, 12*T**2, 20*T**3],
    ])
    coeffs = np.linalg.solve(M, np.array([p0, v0, a0, p1, v1, a1], dtype=float))
    return QuinticPolynomial(coeffs=coeffs, t0=t0, T=T)


def eval_quintic(q: QuinticPolynomial, t: float):
    """(pos, vel, acc, jerk) at t; t must lie within [t0, t0 + T]."""
    tau = t - q.t0
    if tau < -1e-9 or tau > q.T + 1e-9:
        raise ValueError(f"t={t} outside [{q.t0}, {q.t0 + q.T}]")
    tau = min(max(tau, 0.0), q.T)
    a = q.coeffs
    pos = a[0] + tau * (a[1] + tau * (a[2] + tau * (a[3] + tau * (a[4] + tau * a[5]))))
    vel = a[1] + tau * (2*a[2] + tau * (3*a[3] + tau * (4*a[4] + tau * 5*a[5])))
    acc = 2*a[2] + tau * (6*a[3] + tau * (12*a[4] + tau * 20*a[5]))
    jerk = 6*a[3] + tau * (24*a[4] + tau * 60*a[5])
    return pos, vel, acc, jerk


def interpolate_path(profile, s: float):
    """(l, dl, ddl) at station s by piecewise-quintic interpolation.

    Between stations the segment quintic matches (l, l', l'') at both
    knots; beyond the profile the last offset is held.
    """
    st = profile.stations
    if s <= st[0]:
        return float(profile.l[0]), float(profile.dl[0]), float(profile.ddl[0])
    if s >= st[-1]:
        return float(profile.l[-1]), 0.0, 0.0
    i = int(np.searchsorted(st, s)) - 1
    ds = st[i + 1] - st[i]
    q = quintic_fit(profile.l[i], profile.dl[i], profile.ddl[i],
                    profile.l[i + 1], profile.dl[i + 1], profile.ddl[i + 1], ds)
    pos, vel, acc, _ = eval_quintic(q, s - st[i])
    return pos, vel, acc


@dataclass(frozen=True)
class LocalTrajectory:
    """Time-sampled local trajectory composed from path and speed profiles."""

    times: np.ndarray
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    v: np.ndarray
    a: np.ndarray
    jerk: np.ndarray
    s: np.ndarray         # global station along the reference
    l: np.ndarray         # lateral offset
    arc: np.ndarray       # arc length from the trajectory start
    truncated: bool = False


def compose_local_trajectory(path, speed, ref: ReferenceLine,
                             horizon: float, dt: float) -> LocalTrajectory:
    """Compose (x, y, theta, v, a, jerk) samples over the horizon.

    Station comes from the speed profile (relative to the planning
    origin path.stations[0]), offset from the path profile, both mapped
    through the reference line.  If either profile ends early the
    horizon is truncated and flagged.
    """
    t_cov = float(speed.times[-1])
    truncated = horizon > t_cov + 1e-9
    n = int(round(min(horizon, t_cov) / dt))
    times = dt * np.arange(n + 1)

    s0 = float(path.stations[0])
    s_end = min(float(path.stations[-1]), ref.length)
    jerk_profile = np.gradient(speed.s_ddot, speed.times) if len(speed.times) > 2 \
        else np.zeros_like(speed.s_ddot)

    xs = np.empty(n + 1)
    ys = np.empty(n + 1)
    th = np.empty(n + 1)
    vv = np.empty(n + 1)
    aa = np.empty(n + 1)
    jj = np.empty(n + 1)
    ss = np.empty(n + 1)
    ll = np.empty(n + 1)
    for k, t in enumerate(times):
        s_rel, sd, sdd = speed.state_at(t)
        s_glob = min(s0 + s_rel, s_end)
        if s0 + s_rel > s_end + 1e-9:
            truncated = True
        l, dl, _ = interpolate_path(path, s_glob)
        x, y, theta_r = frenet_to_cartesian(ref, s_glob, l)
        kappa = float(ref.curvature_at(s_glob))
        scale = math.hypot(1.0 - kappa * l, dl)
        xs[k], ys[k] = x, y
        th[k] = theta_r + math.atan2(dl, 1.0 - kappa * l)
        vv[k] = sd * scale
        aa[k] = sdd * scale
        jj[k] = float(np.interp(t, speed.times, jerk_profile))
        ss[k] = s_glob
        ll[k] = l
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(xs), np.diff(ys)))])
    return LocalTrajectory(times=times, x=xs, y=ys, theta=th, v=vv, a=aa,
                           jerk=jj, s=ss, l=ll, arc=arc, truncated=truncated)


@dataclass(frozen=True)
class MpcConfig:
    N: int = MPC_N
    dt_mpc: float = MPC_DT
    Q_e: float = MPC_Q_E
    R_u: float = MPC_R_U
    R_u_rate: float = MPC_R_U_RATE

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon must be at least one step")
        if self.Q_e <= 0.0 or self.R_u < 0.0 or self.R_u_rate < 0.0:
            raise ValueError("Q_e must be positive, R weights non-negative")


@dataclass(frozen=True)
class MpcStep:
    sequence: np.ndarray  # absolute steer over the horizon
    applied: float        # u0
    degraded: bool = False


def build_mpc_qp(e0, A_list, B_list, cfg: MpcConfig, du_prev: float,
                 du_lb, du_ub):
    """Condensed QP over steering deviations du_0..du_{N-1}.

    e_{k+1} = A_k e_k + B_k du_k.  Returns (H, g, lb, ub) with identity
    constraint rows implied.
    """
    N = cfg.N
    ne = np.asarray(e0, dtype=float).size
    F = np.zeros((N * ne, ne))
    G = np.zeros((N * ne, N))
    prod = np.eye(ne)
    for k in range(N):
        prod = np.asarray(A_list[k]) @ prod
        F[k * ne:(k + 1) * ne] = prod
        for j in range(k + 1):
            blk = np.asarray(B_list[j]).reshape(ne, 1)
            for i in range(j + 1, k + 1):
                blk = np.asarray(A_list[i]) @ blk
            G[k * ne:(k + 1) * ne, j] = blk.ravel()

    D = np.eye(N)
    D[np.arange(1, N), np.arange(N - 1)] = -1.0
    c = np.zeros(N)
    c[0] = du_prev

    H = 2.0 * (cfg.Q_e * (G.T @ G) + cfg.R_u * (D.T @ D)
               + cfg.R_u_rate * np.eye(N))
    g = 2.0 * cfg.Q_e * (G.T @ (F @ np.asarray(e0, dtype=float))) \
        - 2.0 * cfg.R_u * (D.T @ c)
    return H, g, np.asarray(du_lb, dtype=float), np.asarray(du_ub, dtype=float)


class MpcTracker:
    """Receding-horizon steering tracker; owns its warm-start buffer."""

    def __init__(self, params: VehicleParams, cfg: MpcConfig = MpcConfig()):
        self.params = params
        self.cfg = cfg
        self._du_warm: np.ndarray | None = None
        self._du_prev = 0.0
        self._last_applied = 0.0

    def step(self, current: VehicleState, traj: LocalTrajectory,
             line: ReferenceLine, t_now: float = 0.0) -> MpcStep:
        """Solve one MPC cycle against the composed trajectory.

        ``line`` is the trajectory's own reference line (stations =
        trajectory arc length); t_now is the time offset into ``traj``.
        """
        cfg, params = self.cfg, self.params
        err = error_state(line, current)
        e0 = np.array([err.d, err.e_phi])

        t_k = t_now + cfg.dt_mpc * np.arange(cfg.N + 1)
        v_k = np.interp(t_k, traj.times, traj.v)
        arc_k = np.interp(t_k, traj.times, traj.arc)
        arc_k = np.clip(arc_k, 0.0, line.length)
        kappa_k = np.asarray(line.curvature_at(arc_k), dtype=float)
        u_ref = np.arctan(params.wheelbase * kappa_k[:-1])

        A_list, B_list = [], []
        for k in range(cfg.N):
            vk = max(float(v_k[k]), 0.1)
            A_list.append(np.array([[1.0, vk * cfg.dt_mpc], [0.0, 1.0]]))
            gain = vk * cfg.dt_mpc / (params.wheelbase * math.cos(float(u_ref[k])) ** 2)
            B_list.append(np.array([0.0, gain]))

        lb = -params.steer_limit - u_ref
        ub = params.steer_limit - u_ref
        H, g, lb, ub = build_mpc_qp(e0, A_list, B_list, cfg, self._du_prev, lb, ub)
        qp = StructuredQp(H, np.eye(cfg.N))
        x0 = self._du_warm if self._du_warm is not None and \
            self._du_warm.size == cfg.N else None
        sol = qp.solve(g, lb, ub, x0=x0)
        if sol.status != "solved":
            return MpcStep(sequence=np.full(cfg.N, self._last_applied),
                           applied=self._last_applied, degraded=True)
        du = sol.x
        self._du_warm = np.concatenate([du[1:], du[-1:]])
        self._du_prev = float(du[0])
        seq = u_ref + du
        self._last_applied = float(seq[0])
        return MpcStep(sequence=seq, applied=float(seq[0]))


def mpc_step(current: VehicleState, traj: LocalTrajectory, cfg: MpcConfig,
             model: VehicleParams, line: ReferenceLine) -> MpcStep:
    """One-shot MPC solve (fresh tracker, zero previous command)."""
    return MpcTracker(model, cfg).step(current, traj, line)
