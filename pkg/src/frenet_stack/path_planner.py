"""SL-domain path planning.

A forward DP over an evenly sampled (station, offset) lattice picks the
bypass homotopy (obstacles enter the DP through a hard-infeasible zone
plus a decaying penalty ring), a convex corridor of per-station lateral
bounds is extracted around the DP path, and a QP over (l, l', l'')
produces the smooth profile inside the corridor.

The QP objective uses sums of squares for the first/second-derivative
terms (separable, positive definite); the third-derivative term is the
squared difference of consecutive l'' values.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .qp_solver import INF, StructuredQp
from .reference_line import ReferenceLine, project

log = logging.getLogger(__name__)

# Lattice defaults
DS = 5.0             # m, DP station spacing
HORIZON = 60.0       # m
N_OFFSETS = 7
DL = 1.0             # m, offset spacing
CORRIDOR_DS = 1.0    # m, corridor / QP station spacing

# DP cost weights and obstacle shaping
DP_W_REF = 1.0
DP_W_SMOOTH = 20.0
DP_W_OBS = 10.0
HARD_MARGIN = 0.3    # m, hard-infeasible inflation beyond the obstacle buffer
RING = 1.0           # m, quadratic penalty decay ring beyond the hard zone

# QP weights
W_REF = 1.0
W_DL = 25.0
W_DDL = 50.0
W_DDDL = 100.0
W_MID = 5.0

OBSTACLE_BUFFER = 0.5  # m, default SL inflation margin


class PlanningFailure(RuntimeError):
    """No feasible plan under the current constraints."""


@dataclass(frozen=True)
class SlObstacle:
    """Axis-aligned Frenet-frame box (raw hull) plus an inflation margin."""

    s_min: float
    s_max: float
    l_min: float
    l_max: float
    buffer: float = OBSTACLE_BUFFER

    def __post_init__(self):
        if not (self.s_min < self.s_max and self.l_min < self.l_max):
            raise ValueError("degenerate SL box")
        if self.buffer < 0.0:
            raise ValueError("buffer must be non-negative")


@dataclass
class PathLattice:
    s_samples: np.ndarray   # stations, uniform spacing ds
    l_samples: np.ndarray   # offsets, uniform spacing dl, symmetric about 0
    cost: np.ndarray        # accumulated DP cost per node
    parent: np.ndarray      # backpointer per node (-1 = start node)


@dataclass(frozen=True)
class Corridor:
    stations: np.ndarray
    l_min: np.ndarray
    l_max: np.ndarray

    def __post_init__(self):
        if np.any(self.l_min >= self.l_max):
            raise ValueError("corridor bounds must satisfy l_min < l_max")


@dataclass(frozen=True)
class PathProfile:
    stations: np.ndarray
    l: np.ndarray
    dl: np.ndarray    # dl/ds
    ddl: np.ndarray   # d2l/ds2


@dataclass(frozen=True)
class PathPlannerConfig:
    ds: float = DS
    horizon: float = HORIZON
    n_offsets: int = N_OFFSETS
    dl: float = DL
    corridor_ds: float = CORRIDOR_DS
    w_dp_ref: float = DP_W_REF
    w_dp_smooth: float = DP_W_SMOOTH
    w_dp_obs: float = DP_W_OBS
    hard_margin: float = HARD_MARGIN
    ring: float = RING
    w_ref: float = W_REF
    w_dl: float = W_DL
    w_ddl: float = W_DDL
    w_dddl: float = W_DDDL
    w_mid: float = W_MID

    def __post_init__(self):
        if self.n_offsets < 1 or self.n_offsets % 2 == 0:
            raise ValueError("n_offsets must be odd and positive")
        if min(self.ds, self.dl, self.corridor_ds, self.horizon) <= 0.0:
            raise ValueError("lattice spacings must be positive")


def project_obstacles(ref: ReferenceLine, obstacles,
                      buffer: float = OBSTACLE_BUFFER) -> list[SlObstacle]:
    """Project world-frame polygons into SL boxes (vertex hull + margin).

    Obstacles whose vertices all project outside the line's band (or past
    its ends) are omitted with a log notice.
    """
    result = []
    for k, poly in enumerate(obstacles):
        poses = [project(ref, v) for v in poly]
        if all(p.clamped for p in poses):
            log.info("obstacle %d outside projection band, omitted", k)
            continue
        ss = [p.s for p in poses]
        ls = [p.l for p in poses]
        result.append(SlObstacle(s_min=min(ss), s_max=max(ss),
                                 l_min=min(ls), l_max=max(ls), buffer=buffer))
    return result


def _obstacle_penalty(s, l, sl_obstacles, cfg: PathPlannerConfig) -> float:
    """Inf inside box + buffer + hard margin; quadratic decay over the ring."""
    total = 0.0
    for ob in sl_obstacles:
        m = ob.buffer + cfg.hard_margin
        ds_out = max(ob.s_min - m - s, s - ob.s_max - m, 0.0)
        dl_out = max(ob.l_min - m - l, l - ob.l_max - m, 0.0)
        if ds_out == 0.0 and dl_out == 0.0:
            return float("inf")
        dist = float(np.hypot(ds_out, dl_out))
        if dist < cfg.ring:
            total += (1.0 - dist / cfg.ring) ** 2
    return total


def _tie_key(l: float):
    return (abs(l), l)


def dp_path_search(s0: float, l0: float, sl_obstacles,
                   cfg: PathPlannerConfig = PathPlannerConfig(),
                   half_width: float | None = None):
    """Forward DP from (s0, l0) over the lattice; returns (offsets, lattice).

    Stage cost at station i for offset l with predecessor l_prev:
    w_smooth*((l - l_prev)/ds)^2 + w_ref*l^2 + w_obs*penalty.  Collision
    is checked at the lattice nodes.  Ties break toward smaller |l|,
    then smaller l.
    """
    n_st = int(round(cfg.horizon / cfg.ds))
    stations = s0 + cfg.ds * np.arange(1, n_st + 1)
    offsets = (np.arange(cfg.n_offsets) - (cfg.n_offsets - 1) / 2.0) * cfg.dl
    if half_width is not None:
        offsets = offsets[np.abs(offsets) <= half_width + 1e-9]
        if offsets.size == 0:
            raise PlanningFailure("no lattice offsets inside the road")

    n_l = offsets.size
    cost = np.full((n_st, n_l), np.inf)
    parent = np.full((n_st, n_l), -1, dtype=int)

    node = np.empty((n_st, n_l))
    for i in range(n_st):
        for j in range(n_l):
            pen = _obstacle_penalty(stations[i], offsets[j], sl_obstacles, cfg)
            node[i, j] = cfg.w_dp_ref * offsets[j] ** 2 + cfg.w_dp_obs * pen
        if not np.any(np.isfinite(node[i])):
            raise PlanningFailure(f"all lattice nodes blocked at station {stations[i]:.1f}")

    for j in range(n_l):
        edge = cfg.w_dp_smooth * ((offsets[j] - l0) / cfg.ds) ** 2
        cost[0, j] = edge + node[0, j]

    for i in range(1, n_st):
        for j in range(n_l):
            best = np.inf
            best_k = -1
            for k in range(n_l):
                if not np.isfinite(cost[i - 1, k]):
                    continue
                cand = cost[i - 1, k] + cfg.w_dp_smooth * ((offsets[j] - offsets[k]) / cfg.ds) ** 2
                if cand < best or (cand == best and best_k >= 0
                                   and _tie_key(offsets[k]) < _tie_key(offsets[best_k])):
                    best, best_k = cand, k
            cost[i, j] = best + node[i, j]
            parent[i, j] = best_k

    final = min(range(n_l), key=lambda j: (cost[n_st - 1, j], _tie_key(offsets[j])))
    if not np.isfinite(cost[n_st - 1, final]):
        raise PlanningFailure("no feasible lattice path")

    idx = np.empty(n_st, dtype=int)
    idx[-1] = final
    for i in range(n_st - 1, 0, -1):
        idx[i - 1] = parent[i, idx[i]]
    path = offsets[idx]
    lattice = PathLattice(s_samples=stations, l_samples=offsets, cost=cost, parent=parent)
    return path, lattice


def extract_corridor(s0: float, l0: float, dp_stations, dp_path, sl_obstacles,
                     half_width: float, vehicle_width: float,
                     cfg: PathPlannerConfig = PathPlannerConfig()) -> Corridor:
    """Per-station box bounds around the DP path.

    At each corridor station the bounds expand from the (interpolated) DP
    offset to the nearest buffered obstacle edge or the road bound on
    each side.  A corridor narrower than the vehicle is a failure.
    """
    n = int(round((dp_stations[-1] - s0) / cfg.corridor_ds))
    stations = s0 + cfg.corridor_ds * np.arange(n + 1)
    knot_s = np.concatenate([[s0], dp_stations])
    knot_l = np.concatenate([[l0], dp_path])
    l_dp = np.interp(stations, knot_s, knot_l)

    lo = np.full(stations.shape, -half_width)
    hi = np.full(stations.shape, half_width)
    for ob in sl_obstacles:
        mask = (stations >= ob.s_min - ob.buffer) & (stations <= ob.s_max + ob.buffer)
        if not np.any(mask):
            continue
        center = 0.5 * (ob.l_min + ob.l_max)
        above = l_dp[mask] <= center
        hi_cut = np.where(above, ob.l_min - ob.buffer, hi[mask])
        lo_cut = np.where(~above, ob.l_max + ob.buffer, lo[mask])
        hi[mask] = np.minimum(hi[mask], hi_cut)
        lo[mask] = np.maximum(lo[mask], lo_cut)

    narrow = hi - lo < vehicle_width
    if np.any(narrow):
        s_bad = stations[np.argmax(narrow)]
        raise PlanningFailure(f"corridor narrower than vehicle at station {s_bad:.1f}")
    return Corridor(stations=stations, l_min=lo, l_max=hi)


class PathQp:
    """QP over (l, l', l'') per corridor station with cached structure."""

    def __init__(self, n_stations: int, ds: float, cfg: PathPlannerConfig = PathPlannerConfig()):
        self.n = n_stations
        self.ds = ds
        self.cfg = cfg
        n = n_stations
        nv = 3 * n

        H = np.zeros((nv, nv))
        H[:n, :n] += 2.0 * (cfg.w_ref + cfg.w_mid) * np.eye(n)
        H[n:2 * n, n:2 * n] += 2.0 * cfg.w_dl * np.eye(n)
        H[2 * n:, 2 * n:] += 2.0 * cfg.w_ddl * np.eye(n)
        if n > 1:
            D = np.zeros((n - 1, n))
            D[np.arange(n - 1), np.arange(n - 1)] = -1.0
            D[np.arange(n - 1), np.arange(1, n)] = 1.0
            H[2 * n:, 2 * n:] += 2.0 * cfg.w_dddl * (D.T @ D)

        rows = []
        # l_{i+1} = l_i + ds l'_i + ds^2/2 l''_i ; l'_{i+1} = l'_i + ds l''_i
        for i in range(n - 1):
            r = np.zeros(nv)
            r[i + 1], r[i] = 1.0, -1.0
            r[n + i] = -ds
            r[2 * n + i] = -0.5 * ds * ds
            rows.append(r)
            r = np.zeros(nv)
            r[n + i + 1], r[n + i] = 1.0, -1.0
            r[2 * n + i] = -ds
            rows.append(r)
        # initial state pins
        for col in (0, n, 2 * n):
            r = np.zeros(nv)
            r[col] = 1.0
            rows.append(r)
        # corridor boxes on l
        for i in range(n):
            r = np.zeros(nv)
            r[i] = 1.0
            rows.append(r)
        A = np.vstack(rows)
        self.n_eq = 2 * (n - 1)
        eq = np.zeros(A.shape[0], dtype=bool)
        eq[:self.n_eq + 3] = True  # consistency rows + initial-state pins
        self.qp = StructuredQp(H, A, eq_rows=eq)
        self._warm_x = None
        self._warm_y = None

    def solve(self, corridor: Corridor, l0: float, dl0: float, ddl0: float) -> PathProfile:
        n, nv = self.n, 3 * self.n
        mid = 0.5 * (corridor.l_min + corridor.l_max)
        g = np.zeros(nv)
        g[:n] = -2.0 * self.cfg.w_mid * mid

        lb = np.zeros(self.qp.m)
        ub = np.zeros(self.qp.m)
        i0 = self.n_eq
        lb[i0:i0 + 3] = ub[i0:i0 + 3] = (l0, dl0, ddl0)
        # widen the first box if the vehicle sits slightly outside it
        box_lo = corridor.l_min.copy()
        box_hi = corridor.l_max.copy()
        box_lo[0] = min(box_lo[0], l0 - 0.1)
        box_hi[0] = max(box_hi[0], l0 + 0.1)
        lb[i0 + 3:] = box_lo
        ub[i0 + 3:] = box_hi

        sol = self.qp.solve(g, lb, ub, x0=self._warm_x, y0=self._warm_y)
        if sol.status != "solved":
            raise PlanningFailure(f"path QP {sol.status} "
                                  f"(primal {sol.primal_residual:.2e})")
        self._warm_x, self._warm_y = sol.x, sol.y
        return PathProfile(stations=corridor.stations.copy(),
                           l=sol.x[:n].copy(), dl=sol.x[n:2 * n].copy(),
                           ddl=sol.x[2 * n:].copy())


def qp_smooth_path(corridor: Corridor, l0: float = 0.0, dl0: float = 0.0,
                   ddl0: float = 0.0,
                   cfg: PathPlannerConfig = PathPlannerConfig()) -> PathProfile:
    """One-shot corridor smoothing (builds the QP structure on entry)."""
    ds = float(corridor.stations[1] - corridor.stations[0])
    return PathQp(len(corridor.stations), ds, cfg).solve(corridor, l0, dl0, ddl0)
