"""S-T graph speed planning against dynamic obstacles.

Predicted obstacle footprints are swept against the ego corridor along
the planned path; the (t, s) samples where they intersect form STRegion
bands.  A DP over a (time, station) grid decides yield vs overtake (the
decision emerges from cost, not a rule), a per-time station corridor is
extracted around the coarse profile, and a QP over (s, s_dot, s_ddot)
smooths it under speed/accel/jerk limits.

Stage costs are integrated (scaled by dt), so refining the grid never
makes a given profile look cheaper.  The DP state is the pair
(s_k, s_{k-1}), which makes the second-difference acceleration penalty
exact; DP cost therefore equals brute-force enumeration bit for bit on
matching grids.
"""

from dataclasses import dataclass

import numpy as np

from .qp_solver import INF, StructuredQp
from .reference_line import ReferenceLine, project
from .vehicle import VehicleParams

HORIZON_T = 8.0      # s
DT_DP = 0.5          # s, DP time step
DS_DP = 1.0          # m, DP station step
DT_PLAN = 0.1        # s, QP profile step
W_V = 1.0            # reference-speed deviation weight
W_A = 0.5            # DP acceleration weight
W_OBS = 100.0        # DP obstacle proximity weight
SPEED_HARD_MARGIN = 0.5  # m, extra hard margin around a region in s
SPEED_RING = 2.0     # m, penalty decay ring in s
QP_W_REF = 1.0       # deviation from the coarse profile (station)
QP_W_V = 0.5         # deviation from the coarse profile (speed)
QP_W_A = 2.0
QP_W_JERK = 10.0
SAFETY_BUFFER = 0.5  # m, region inflation when sweeping footprints
OVERTAKE_MARGIN = 2.0  # m, reachability slack required to pass above a region


@dataclass(frozen=True)
class STRegion:
    """Blocked (t, s) band of one predicted obstacle on the S-T graph."""

    obstacle_id: int
    times: np.ndarray    # non-decreasing sample times, s
    s_lower: np.ndarray  # m
    s_upper: np.ndarray  # m

    @property
    def vertices(self) -> np.ndarray:
        """Polygon: lower edge left-to-right, then upper edge back."""
        lower = np.stack([self.times, self.s_lower], axis=1)
        upper = np.stack([self.times[::-1], self.s_upper[::-1]], axis=1)
        return np.concatenate([lower, upper])

    def bounds_at(self, t: float):
        """(s_lower, s_upper) interpolated at t, or None outside the span."""
        if t < self.times[0] or t > self.times[-1]:
            return None
        return (float(np.interp(t, self.times, self.s_lower)),
                float(np.interp(t, self.times, self.s_upper)))


@dataclass(frozen=True)
class SpeedProfile:
    times: np.ndarray
    s: np.ndarray
    s_dot: np.ndarray
    s_ddot: np.ndarray
    degraded: bool = False   # QP fell back to the coarse profile
    emergency: bool = False  # max-braking fallback engaged

    def state_at(self, t: float):
        """(s, s_dot, s_ddot) linearly interpolated at t (clamped ends)."""
        return (float(np.interp(t, self.times, self.s)),
                float(np.interp(t, self.times, self.s_dot)),
                float(np.interp(t, self.times, self.s_ddot)))


@dataclass(frozen=True)
class PredictedObstacle:
    """Time-sampled world-frame footprint polygons of one obstacle."""

    obstacle_id: int
    times: np.ndarray
    polygons: list  # one (k, 2) vertex array per time sample


@dataclass(frozen=True)
class SpeedPlannerConfig:
    horizon: float = HORIZON_T
    dt_dp: float = DT_DP
    ds_dp: float = DS_DP
    dt_plan: float = DT_PLAN
    w_v: float = W_V
    w_a: float = W_A
    w_obs: float = W_OBS
    hard_margin: float = SPEED_HARD_MARGIN
    ring: float = SPEED_RING
    qp_w_ref: float = QP_W_REF
    qp_w_v: float = QP_W_V
    qp_w_a: float = QP_W_A
    qp_w_jerk: float = QP_W_JERK
    buffer: float = SAFETY_BUFFER
    overtake_margin: float = OVERTAKE_MARGIN

    def __post_init__(self):
        if min(self.horizon, self.dt_dp, self.ds_dp, self.dt_plan) <= 0.0:
            raise ValueError("grid steps must be positive")


def build_st_regions(ref: ReferenceLine, path_stations, path_l, predictions,
                     horizon: float, s_ego: float, ego_length: float,
                     ego_width: float, buffer: float = SAFETY_BUFFER,
                     cfg: SpeedPlannerConfig = SpeedPlannerConfig()) -> list[STRegion]:
    """Sweep predicted footprints against the ego corridor along the path.

    Occupancy is evaluated on Frenet-frame boxes: the obstacle hull
    (inflated by ``buffer``) against the ego's lateral extent around the
    planned offset l(s), with the ego half-length added in s.  Stations
    are relative to s_ego.  The path offset is held at its last value
    beyond the planned horizon.
    """
    regions: list[STRegion] = []
    half_len = 0.5 * ego_length + buffer
    half_wid = 0.5 * ego_width

    for pred in predictions:
        t_blocked, lo_blocked, hi_blocked = [], [], []
        open_band = False
        for t, poly in zip(pred.times, pred.polygons):
            if t > horizon + 1e-9:
                break
            poses = [project(ref, v) for v in poly]
            band = None
            if not all(p.clamped for p in poses):
                ss = np.array([p.s for p in poses]) - s_ego
                ls = np.array([p.l for p in poses])
                s_lo = ss.min() - half_len
                s_hi = ss.max() + half_len
                if s_hi > 0.0:
                    grid = np.arange(max(s_lo, 0.0), s_hi + 1e-9, cfg.ds_dp / 2.0)
                    if grid.size:
                        l_path = np.interp(grid, path_stations, path_l)
                        overlap = (ls.min() - buffer <= l_path + half_wid) & \
                                  (ls.max() + buffer >= l_path - half_wid)
                        if np.any(overlap):
                            band = (float(grid[overlap].min()) - cfg.ds_dp / 2.0,
                                    float(grid[overlap].max()) + cfg.ds_dp / 2.0)
            if band is not None:
                t_blocked.append(t)
                lo_blocked.append(max(band[0], 0.0))
                hi_blocked.append(band[1])
                open_band = True
            elif open_band:
                regions.append(STRegion(pred.obstacle_id, np.array(t_blocked),
                                        np.array(lo_blocked), np.array(hi_blocked)))
                t_blocked, lo_blocked, hi_blocked = [], [], []
                open_band = False
        if open_band:
            regions.append(STRegion(pred.obstacle_id, np.array(t_blocked),
                                    np.array(lo_blocked), np.array(hi_blocked)))
    return regions


def region_penalty(regions, t: float, s: float,
                   cfg: SpeedPlannerConfig = SpeedPlannerConfig()) -> float:
    """Inf inside a region (plus hard margin); quadratic decay over the ring."""
    total = 0.0
    for reg in regions:
        bounds = reg.bounds_at(t)
        if bounds is None:
            continue
        lo, hi = bounds[0] - cfg.hard_margin, bounds[1] + cfg.hard_margin
        if lo <= s <= hi:
            return float("inf")
        dist = lo - s if s < lo else s - hi
        if dist < cfg.ring:
            total += (1.0 - dist / cfg.ring) ** 2
    return total


def dp_speed_search(regions, v0: float, v_ref: float, limits: VehicleParams,
                    cfg: SpeedPlannerConfig = SpeedPlannerConfig()):
    """Coarse (t, s) profile by DP; returns (times, s, feasible).

    Monotone transitions on the grid; per-step cost (scaled by dt_dp)
    penalizes obstacle proximity, deviation of s_dot from v_ref, and the
    second-difference acceleration.  If the start node is blocked or no
    profile survives, (times, s) of a max-braking profile is returned
    with feasible = False.
    """
    dt, ds = cfg.dt_dp, cfg.ds_dp
    K = int(round(cfg.horizon / dt))
    times = dt * np.arange(K + 1)
    n_s = int(round(limits.v_max * cfg.horizon / ds)) + 1
    d_max = int(round(limits.v_max * dt / ds))
    speeds = ds / dt * np.arange(d_max + 1)

    if not np.isfinite(region_penalty(regions, 0.0, 0.0, cfg)):
        return times, _emergency_s(times, v0, limits), False

    # per-step accel bounds rounded outward to at least one grid step
    dd_up = max(1, int(np.ceil(limits.a_max * dt * dt / ds)))
    dd_dn = max(1, int(np.ceil(-limits.a_min * dt * dt / ds)))

    accel = (speeds[:, None] - speeds[None, :]) / dt  # [d, d_prev]
    Ta = cfg.w_a * accel ** 2 * dt
    dd = np.arange(d_max + 1)
    Ta[np.abs(dd[:, None] - dd[None, :]) > max(dd_up, dd_dn)] = np.inf
    Ta[(dd[:, None] - dd[None, :]) > dd_up] = np.inf
    Ta[(dd[None, :] - dd[:, None]) > dd_dn] = np.inf
    Tv = cfg.w_v * (speeds - v_ref) ** 2 * dt

    s_grid = ds * np.arange(n_s)

    def node_cost(k):
        # vectorized over stations; mirrors region_penalty exactly
        t = times[k]
        pen = np.zeros(n_s)
        for reg in regions:
            bounds = reg.bounds_at(t)
            if bounds is None:
                continue
            lo, hi = bounds[0] - cfg.hard_margin, bounds[1] + cfg.hard_margin
            inside = (s_grid >= lo) & (s_grid <= hi)
            pen[inside] = np.inf
            dist = np.where(s_grid < lo, lo - s_grid, s_grid - hi)
            near = ~inside & (dist < cfg.ring)
            pen[near] += (1.0 - dist[near] / cfg.ring) ** 2
        out = np.where(np.isfinite(pen), cfg.w_obs * pen * dt, np.inf)
        return out

    NEG = np.inf
    # C[j, d]: best cost reaching s_j at step k with s_{j} - s_{j-1} = d*ds
    C = np.full((n_s, d_max + 1), NEG)
    parent = np.full((K + 1, n_s, d_max + 1), -1, dtype=np.int16)
    node1 = node_cost(1)
    for d in range(d_max + 1):
        v1 = speeds[d]
        a1 = (v1 - v0) / dt
        if a1 > limits.a_max + ds / dt / dt + 1e-9 or a1 < limits.a_min - ds / dt / dt - 1e-9:
            continue
        j = d
        if j < n_s and np.isfinite(node1[j]):
            C[j, d] = (cfg.w_a * a1 ** 2 * dt + Tv[d]) + node1[j]

    for k in range(2, K + 1):
        node_k = node_cost(k)
        C_new = np.full_like(C, NEG)
        best_prev = np.full((n_s, d_max + 1), -1, dtype=np.int16)
        for d in range(d_max + 1):
            # predecessors C[j - d, :]; rows shifted down by d
            if d >= n_s:
                continue
            cand = C[: n_s - d, :] + Ta[d, :][None, :]  # [j - d, d_prev]
            idx = np.argmin(cand, axis=1)
            val = cand[np.arange(cand.shape[0]), idx]
            rows = np.arange(d, n_s)
            C_new[rows, d] = (val + Tv[d]) + node_k[rows]
            best_prev[rows, d] = idx
        C = C_new
        parent[k] = best_prev
        if not np.any(np.isfinite(C)):
            return times, _emergency_s(times, v0, limits), False

    flat = int(np.argmin(C))
    j, d = divmod(flat, d_max + 1)
    if not np.isfinite(C[j, d]):
        return times, _emergency_s(times, v0, limits), False

    s_idx = np.zeros(K + 1, dtype=int)
    s_idx[K] = j
    for k in range(K, 1, -1):
        d_prev = int(parent[k][j, d])
        j, d = j - d, d_prev
        s_idx[k - 1] = j
    return times, s_idx * ds, True


def _emergency_s(times, v0: float, limits: VehicleParams):
    """Station trace of a jerk-limited max-braking stop."""
    dt = float(times[1] - times[0]) if len(times) > 1 else 0.1
    s, v, a = 0.0, v0, 0.0
    out = [0.0]
    for _ in times[1:]:
        # ramp toward a_min, then back toward 0 so v and a hit 0 together
        if v + a * dt <= 0.5 * a * a / limits.jerk_max:
            a = min(a + limits.jerk_max * dt, 0.0)
        else:
            a = max(a - limits.jerk_max * dt, limits.a_min)
        v = max(v + a * dt, 0.0)
        if v == 0.0:
            a = 0.0
        s += v * dt
        out.append(s)
    return np.asarray(out)


def emergency_profile(v0: float, a0: float, limits: VehicleParams,
                      cfg: SpeedPlannerConfig = SpeedPlannerConfig()) -> SpeedProfile:
    """Max-braking fallback profile on the fine planning grid."""
    K = int(round(cfg.horizon / cfg.dt_plan))
    times = cfg.dt_plan * np.arange(K + 1)
    dt = cfg.dt_plan
    s = np.zeros(K + 1)
    v = np.zeros(K + 1)
    a = np.zeros(K + 1)
    v[0], a[0] = v0, min(max(a0, limits.a_min), limits.a_max)
    for k in range(K):
        if v[k] + a[k] * dt <= 0.5 * a[k] * a[k] / limits.jerk_max:
            a[k + 1] = min(a[k] + limits.jerk_max * dt, 0.0)
        else:
            a[k + 1] = max(a[k] - limits.jerk_max * dt, limits.a_min)
        v[k + 1] = max(v[k] + 0.5 * (a[k] + a[k + 1]) * dt, 0.0)
        if v[k + 1] == 0.0:
            a[k + 1] = 0.0
        s[k + 1] = s[k] + 0.5 * (v[k] + v[k + 1]) * dt
    return SpeedProfile(times=times, s=s, s_dot=v, s_ddot=a,
                        degraded=True, emergency=True)


def decide_sides(regions, coarse_times, coarse_s, v0: float, a0: float,
                 limits: VehicleParams,
                 cfg: SpeedPlannerConfig = SpeedPlannerConfig()) -> list[bool]:
    """Per-region pass side: True = yield (below), False = overtake.

    The side follows the coarse DP profile at the region's midpoint
    time, but an overtake is demoted to yield when the max-effort
    reachable station does not clear the region's upper edge by
    ``overtake_margin`` at every constrained time.
    """
    sides = []
    reach_t = None
    for reg in regions:
        t_mid = 0.5 * (reg.times[0] + reg.times[-1])
        s_mid = float(np.interp(t_mid, coarse_times, coarse_s))
        lo_mid, hi_mid = (float(np.interp(t_mid, reg.times, reg.s_lower)),
                          float(np.interp(t_mid, reg.times, reg.s_upper)))
        yield_side = s_mid <= 0.5 * (lo_mid + hi_mid)
        if not yield_side:
            if reach_t is None:
                reach_t = np.arange(0.0, cfg.horizon + cfg.dt_plan, cfg.dt_plan)
                reach_s = _max_reach(reach_t, v0, a0, limits)
            hi_t = np.interp(reg.times, reg.times, reg.s_upper)
            reach_at = np.interp(reg.times, reach_t, reach_s)
            if np.any(reach_at - (hi_t + cfg.buffer) < cfg.overtake_margin):
                yield_side = True
        sides.append(yield_side)
    return sides


def yield_constrained_regions(regions, sides) -> list[STRegion]:
    """Regions with the yield-decided ones extended upward so a DP cannot
    pass above them."""
    out = []
    for reg, yield_side in zip(regions, sides):
        if yield_side:
            out.append(STRegion(reg.obstacle_id, reg.times, reg.s_lower,
                                np.full_like(reg.s_upper, 1e6)))
        else:
            out.append(reg)
    return out


def extract_speed_corridor(times_fine, regions, sides,
                           cfg: SpeedPlannerConfig = SpeedPlannerConfig()):
    """Per-time station bounds: below yield regions, above overtaken ones."""
    lower = np.zeros(len(times_fine))
    upper = np.full(len(times_fine), np.inf)
    for reg, yield_side in zip(regions, sides):
        mask = (times_fine >= reg.times[0] - 1e-9) & (times_fine <= reg.times[-1] + 1e-9)
        if not np.any(mask):
            continue
        lo_t = np.interp(times_fine[mask], reg.times, reg.s_lower)
        hi_t = np.interp(times_fine[mask], reg.times, reg.s_upper)
        if yield_side:
            upper[mask] = np.minimum(upper[mask], lo_t - cfg.buffer)
        else:
            lower[mask] = np.maximum(lower[mask], hi_t + cfg.buffer)
    return lower, upper


def _max_reach(times, v0: float, a0: float, limits: VehicleParams):
    """Station reachable with full throttle under accel and jerk limits."""
    dt = float(times[1] - times[0]) if len(times) > 1 else 0.1
    s, v, a = 0.0, v0, min(max(a0, limits.a_min), limits.a_max)
    out = np.empty(len(times))
    out[0] = 0.0
    for k in range(1, len(times)):
        a = min(a + limits.jerk_max * dt, limits.a_max)
        v_new = min(max(v + a * dt, 0.0), limits.v_max)
        s += 0.5 * (v + v_new) * dt
        v = v_new
        out[k] = s
    return out


def plan_speed(regions, v0: float, a0: float, v_ref: float,
               limits: VehicleParams, qp: "SpeedQp",
               cfg: SpeedPlannerConfig = SpeedPlannerConfig()):
    """Full speed-planning cycle: DP decision, side resolution, QP smoothing.

    Returns (profile, coarse_times, coarse_s).  When the DP start is
    blocked or no monotone profile survives, the max-braking emergency
    profile is returned (flagged).  If the reachability guard demotes an
    overtake, the DP re-runs with that region blocked from above so the
    coarse reference and the corridor agree.
    """
    times, coarse, ok = dp_speed_search(regions, v0, v_ref, limits, cfg)
    if not ok:
        return emergency_profile(v0, a0, limits, cfg), times, coarse
    sides = decide_sides(regions, times, coarse, v0, a0, limits, cfg)
    if any(sides):
        constrained = yield_constrained_regions(regions, sides)
        times2, coarse2, ok2 = dp_speed_search(constrained, v0, v_ref, limits, cfg)
        if not ok2:
            return emergency_profile(v0, a0, limits, cfg), times2, coarse2
        times, coarse = times2, coarse2
    lower, upper = extract_speed_corridor(qp.times, regions, sides, cfg)
    profile = qp.solve(times, coarse, v0, a0, lower, upper)
    return profile, times, coarse


class SpeedQp:
    """QP over (s, s_dot, s_ddot) on the fine grid with cached structure."""

    def __init__(self, limits: VehicleParams, cfg: SpeedPlannerConfig = SpeedPlannerConfig()):
        self.cfg = cfg
        self.limits = limits
        K = int(round(cfg.horizon / cfg.dt_plan))
        self.K = K
        self.times = cfg.dt_plan * np.arange(K + 1)
        n = K + 1
        nv = 3 * n
        dt = cfg.dt_plan

        H = np.zeros((nv, nv))
        H[:n, :n] += 2.0 * cfg.qp_w_ref * np.eye(n)
        H[n:2 * n, n:2 * n] += 2.0 * cfg.qp_w_v * np.eye(n)
        H[2 * n:, 2 * n:] += 2.0 * cfg.qp_w_a * np.eye(n)
        D = np.zeros((n - 1, n))
        D[np.arange(n - 1), np.arange(n - 1)] = -1.0
        D[np.arange(n - 1), np.arange(1, n)] = 1.0
        H[2 * n:, 2 * n:] += 2.0 * cfg.qp_w_jerk * (D.T @ D)

        rows = []
        # trapezoidal consistency
        for k in range(n - 1):
            r = np.zeros(nv)
            r[k + 1], r[k] = 1.0, -1.0
            r[n + k] = -0.5 * dt
            r[n + k + 1] = -0.5 * dt
            rows.append(r)
            r = np.zeros(nv)
            r[n + k + 1], r[n + k] = 1.0, -1.0
            r[2 * n + k] = -0.5 * dt
            r[2 * n + k + 1] = -0.5 * dt
            rows.append(r)
        for col in (0, n, 2 * n):  # initial state pins
            r = np.zeros(nv)
            r[col] = 1.0
            rows.append(r)
        eye_rows = np.eye(nv)
        rows.extend(eye_rows)      # boxes on s, v, a
        jerk = np.zeros((n - 1, nv))
        jerk[:, 2 * n:] = D
        rows.extend(jerk)
        A = np.vstack(rows)
        self.n_eq = 2 * (n - 1) + 3
        eq = np.zeros(A.shape[0], dtype=bool)
        eq[:self.n_eq] = True
        self.qp = StructuredQp(H, A, eq_rows=eq)
        self._warm_x = None
        self._warm_y = None

    def solve(self, coarse_times, coarse_s, v0: float, a0: float,
              corridor_lower, corridor_upper) -> SpeedProfile:
        cfg, lim = self.cfg, self.limits
        n = self.K + 1
        dt = cfg.dt_plan
        s_ref = np.interp(self.times, coarse_times, coarse_s)
        v_ref = np.gradient(s_ref, self.times) if n > 2 else np.full(n, v0)
        g = np.zeros(3 * n)
        g[:n] = -2.0 * cfg.qp_w_ref * s_ref
        g[n:2 * n] = -2.0 * cfg.qp_w_v * v_ref

        m = self.qp.m
        lb, ub = np.zeros(m), np.zeros(m)
        i0 = 2 * (n - 1)
        a0c = min(max(a0, lim.a_min), lim.a_max)
        lb[i0:i0 + 3] = ub[i0:i0 + 3] = (0.0, min(v0, lim.v_max), a0c)
        b0 = self.n_eq
        lb[b0:b0 + n] = corridor_lower
        ub[b0:b0 + n] = np.where(np.isfinite(corridor_upper), corridor_upper, INF)
        lb[b0 + n:b0 + 2 * n] = 0.0
        ub[b0 + n:b0 + 2 * n] = lim.v_max
        lb[b0 + 2 * n:b0 + 3 * n] = lim.a_min
        ub[b0 + 2 * n:b0 + 3 * n] = lim.a_max
        # shave the jerk bound slightly so profiles stay strictly inside the
        # limit even at solver feasibility tolerance
        jmax = (lim.jerk_max - 1e-3) * dt
        lb[b0 + 3 * n:] = -jmax
        ub[b0 + 3 * n:] = jmax

        degraded = False
        profile = None
        if np.all(ub[b0:b0 + n] >= lb[b0:b0 + n]):
            x0, y0 = self._warm_x, self._warm_y
            if x0 is None:
                # seed from the coarse profile: near-feasible, fast to refine
                v_seed = np.gradient(s_ref, self.times)
                a_seed = np.gradient(v_seed, self.times)
                x0 = np.concatenate([s_ref, v_seed, a_seed])
            sol = self.qp.solve(g, lb, ub, x0=x0, y0=y0)
            if sol.status == "solved":
                self._warm_x, self._warm_y = sol.x, sol.y
                profile = SpeedProfile(times=self.times.copy(),
                                       s=sol.x[:n].copy(),
                                       s_dot=sol.x[n:2 * n].copy(),
                                       s_ddot=sol.x[2 * n:].copy())
        if profile is None:
            # fall back to the coarse profile, flagged
            degraded = True
            v = np.gradient(s_ref, self.times)
            a = np.gradient(v, self.times)
            profile = SpeedProfile(times=self.times.copy(), s=s_ref,
                                   s_dot=v, s_ddot=a, degraded=True)
        return profile


def qp_smooth_speed(coarse_times, coarse_s, v0: float, a0: float,
                    corridor_lower, corridor_upper, limits: VehicleParams,
                    cfg: SpeedPlannerConfig = SpeedPlannerConfig()) -> SpeedProfile:
    """One-shot speed smoothing (builds the QP structure on entry)."""
    return SpeedQp(limits, cfg).solve(coarse_times, coarse_s, v0, a0,
                                      corridor_lower, corridor_upper)
