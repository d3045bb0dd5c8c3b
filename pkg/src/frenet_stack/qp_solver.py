"""Small dense convex QP solver:

    minimize 1/2 x^T H x + g^T x   subject to  lb <= A x <= ub

Operator splitting (ADMM) with Ruiz diagonal equilibration, a fixed
penalty rho, warm starting, and an active-set polish step that refines a
converged iterate to near machine precision.  Problems here are a few
hundred variables at most; everything is dense.

``StructuredQp`` pre-factors the iteration matrix for a fixed (H, A)
pair so planners can re-solve with fresh (g, lb, ub) every cycle at the
cost of triangular solves only.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize

INF = 1e20          # sentinel magnitude treated as an infinite bound
RHO = 1.0
SIGMA = 1e-6
ALPHA = 1.6         # over-relaxation
RUIZ_SWEEPS = 10
DEFAULT_TOL_PRIM = 1e-6
DEFAULT_TOL_DUAL = 1e-6
DEFAULT_MAX_ITER = 20000
_CHECK_EVERY = 25
_ADAPT_EVERY = 250  # penalty re-tuning (and refactorization) cadence


@dataclass(frozen=True)
class QpProblem:
    H: np.ndarray    # n x n symmetric PSD
    g: np.ndarray    # n
    A: np.ndarray    # m x n (rows may encode simple bounds)
    lb: np.ndarray   # m, -INF allowed
    ub: np.ndarray   # m, +INF allowed

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        g = np.asarray(self.g, dtype=float).ravel()
        A = np.asarray(self.A, dtype=float).reshape(-1, H.shape[0])
        lb = np.asarray(self.lb, dtype=float).ravel()
        ub = np.asarray(self.ub, dtype=float).ravel()
        if H.shape[0] != H.shape[1] or H.shape[0] != g.size:
            raise ValueError("inconsistent H/g dimensions")
        if not np.allclose(H, H.T, atol=1e-10):
            raise ValueError("H must be symmetric")
        if lb.size != A.shape[0] or ub.size != A.shape[0]:
            raise ValueError("inconsistent constraint dimensions")
        if np.any(lb > ub):
            raise ValueError("lb > ub")
        for name, val in (("H", H), ("g", g), ("A", A), ("lb", lb), ("ub", ub)):
            object.__setattr__(self, name, val)


@dataclass(frozen=True)
class QpSolution:
    x: np.ndarray
    y: np.ndarray           # constraint duals (for external KKT checks)
    status: str             # "solved" | "max_iter" | "infeasible"
    primal_residual: float  # max box violation of A x
    dual_residual: float    # stationarity ||Hx + g + A^T y||_inf
    iterations: int


def kkt_residuals(p: QpProblem, x: np.ndarray, y: np.ndarray):
    """(stationarity, primal violation, complementarity) for external checks."""
    ax = p.A @ x if p.A.size else np.zeros(0)
    stat = float(np.max(np.abs(p.H @ x + p.g + (p.A.T @ y if p.A.size else 0.0))))
    if ax.size == 0:
        return stat, 0.0, 0.0
    viol = float(np.max(np.maximum(np.maximum(p.lb - ax, ax - p.ub), 0.0)))
    dist_up = np.where(p.ub >= INF, np.inf, np.abs(p.ub - ax))
    dist_lo = np.where(p.lb <= -INF, np.inf, np.abs(ax - p.lb))
    dist = np.where(y > 0.0, dist_up, np.where(y < 0.0, dist_lo, 0.0))
    comp = float(np.max(np.minimum(np.abs(y), dist), initial=0.0))
    return stat, viol, comp


def _ruiz(H, A):
    """Symmetric diagonal equilibration of the stacked [H; A] columns and A rows."""
    n, m = H.shape[0], A.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    Hs, As = H.copy(), A.copy()
    for _ in range(RUIZ_SWEEPS):
        col = np.sqrt(np.maximum(
            np.max(np.abs(Hs), axis=0, initial=0.0),
            np.max(np.abs(As), axis=0, initial=0.0) if m else 0.0))
        col[col < 1e-12] = 1.0
        dx = 1.0 / np.sqrt(col)
        Hs = Hs * dx[:, None] * dx[None, :]
        d *= dx
        if m:
            row = np.sqrt(np.max(np.abs(As), axis=1, initial=0.0))
            row[row < 1e-12] = 1.0
            de = 1.0 / np.sqrt(row)
            As = As * de[:, None] * dx[None, :]
            e *= de
    return Hs, As, d, e


class StructuredQp:
    """ADMM solver with scaling and factorization fixed for one (H, A).

    Rows flagged in ``eq_rows`` (equalities, lb == ub) get a 1e3-boosted
    penalty, which is what makes consistency-constrained planning QPs
    converge in tens of iterations instead of thousands.
    """

    def __init__(self, H, A, tol_prim=DEFAULT_TOL_PRIM, tol_dual=DEFAULT_TOL_DUAL,
                 max_iter=DEFAULT_MAX_ITER, rho=RHO, sigma=SIGMA, eq_rows=None):
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        self.A = np.asarray(A, dtype=float).reshape(-1, self.H.shape[0])
        self.n, self.m = self.H.shape[0], self.A.shape[0]
        self.tol_prim, self.tol_dual = tol_prim, tol_dual
        self.max_iter = max_iter
        self.sigma = sigma
        self.rho0 = rho
        self._eq = np.zeros(self.m, dtype=bool)
        if eq_rows is not None and self.m:
            self._eq = np.asarray(eq_rows, dtype=bool).copy()

        self.Hs, self.As, self.d, self.e = _ruiz(self.H, self.A)
        self._set_rho(1.0)

    def _set_rho(self, mult: float):
        """(Re)build the penalty vector and factor the iteration matrix."""
        self._rho_mult = mult
        self.rho_vec = np.full(self.m, self.rho0 * mult)
        self.rho_vec[self._eq] = 1e3 * self.rho0 * mult
        M = self.Hs + self.sigma * np.eye(self.n)
        if self.m:
            M = M + (self.As.T * self.rho_vec) @ self.As
        try:
            self._factor = scipy.linalg.cho_factor(M)
            self._solve_m = lambda rhs: scipy.linalg.cho_solve(self._factor, rhs)
        except scipy.linalg.LinAlgError:
            lu = scipy.linalg.lu_factor(M)
            self._solve_m = lambda rhs: scipy.linalg.lu_solve(lu, rhs)

    def problem(self, g, lb, ub) -> QpProblem:
        return QpProblem(H=self.H, g=g, A=self.A, lb=lb, ub=ub)

    def solve(self, g, lb, ub, x0=None, y0=None) -> QpSolution:
        g = np.asarray(g, dtype=float).ravel()
        p = self.problem(g, lb, ub)
        if self.m == 0:
            x = np.linalg.solve(self.H, -g) if abs(np.linalg.det(self.H)) > 1e-300 \
                else np.linalg.lstsq(self.H, -g, rcond=None)[0]
            stat = float(np.max(np.abs(self.H @ x + g), initial=0.0))
            return QpSolution(x=x, y=np.zeros(0), status="solved",
                              primal_residual=0.0, dual_residual=stat, iterations=0)

        lb_i = np.where(p.lb <= -INF, -np.inf, p.lb)
        ub_i = np.where(p.ub >= INF, np.inf, p.ub)
        # scaled quantities
        gs = self.d * g
        lbs, ubs = self.e * lb_i, self.e * ub_i
        xs = (np.asarray(x0, dtype=float) / self.d) if x0 is not None else np.zeros(self.n)
        ys = (np.asarray(y0, dtype=float) / self.e) if y0 is not None else np.zeros(self.m)
        zs = np.clip(self.As @ xs, lbs, ubs)

        rho = self.rho_vec
        status = "max_iter"
        iters = self.max_iter
        y_prev_unscaled = self.e * ys
        for it in range(1, self.max_iter + 1):
            rhs = self.sigma * xs - gs + self.As.T @ (rho * zs - ys)
            xs = self._solve_m(rhs)
            ax = ALPHA * (self.As @ xs) + (1.0 - ALPHA) * zs
            zs = np.clip(ax + ys / rho, lbs, ubs)
            ys = ys + rho * (ax - zs)

            if it == 1 or it % _CHECK_EVERY == 0 or it == self.max_iter:
                x = self.d * xs
                y = self.e * ys
                stat, viol, _ = kkt_residuals(p, x, y)
                if viol <= self.tol_prim and stat <= self.tol_dual:
                    status, iters = "solved", it
                    break
                dy = y - y_prev_unscaled
                if self._primal_infeasible(dy, lb_i, ub_i):
                    x, y = self.d * xs, self.e * ys
                    stat, viol, _ = kkt_residuals(p, x, y)
                    return QpSolution(x=x, y=y, status="infeasible",
                                      primal_residual=viol, dual_residual=stat,
                                      iterations=it)
                y_prev_unscaled = y
                if it % _ADAPT_EVERY == 0:
                    # near-converged iterates usually expose the right active
                    # set; a verified polish then finishes the job outright
                    if viol < 1e-3 and stat < 1e-3:
                        xp, yp = self._polish(g, lb_i, ub_i, x, y)
                        if xp is not None:
                            statp, violp, _ = kkt_residuals(p, xp, yp)
                            return QpSolution(x=xp, y=yp, status="solved",
                                              primal_residual=violp,
                                              dual_residual=statp, iterations=it)
                    # re-balance the penalty against the residuals (refactors M)
                    axu = self.A @ x
                    rp = viol / max(float(np.max(np.abs(axu), initial=0.0)), 1.0)
                    rd = stat / max(float(np.max(np.abs(self.H @ x))),
                                    float(np.max(np.abs(self.A.T @ y), initial=0.0)),
                                    float(np.max(np.abs(g), initial=0.0)), 1.0)
                    est = self._rho_mult * np.sqrt((rp + 1e-12) / (rd + 1e-12))
                    if est > 5.0 * self._rho_mult or est < self._rho_mult / 5.0:
                        self._set_rho(float(np.clip(est, 1e-3, 1e3)))
                        rho = self.rho_vec

        x = self.d * xs
        y = self.e * ys
        if not (status == "solved" and iters <= 1):
            # a warm start that is optimal on entry is already polished
            xp, yp = self._polish(g, lb_i, ub_i, x, y)
            if xp is not None:
                x, y = xp, yp
                status = "solved"  # verified KKT point, even from a max_iter exit
        stat, viol, _ = kkt_residuals(p, x, y)
        return QpSolution(x=x, y=y, status=status,
                          primal_residual=viol, dual_residual=stat, iterations=iters)

    def _primal_infeasible(self, dy, lb, ub) -> bool:
        """OSQP-style certificate: A^T dy ~ 0 with negative support value."""
        norm = float(np.max(np.abs(dy), initial=0.0))
        if norm < 1e-12:
            return False
        dyn = dy / norm
        if float(np.max(np.abs(self.A.T @ dyn))) > 1e-8:
            return False
        up, lo = np.maximum(dyn, 0.0), np.minimum(dyn, 0.0)
        if np.any(up[np.isinf(ub)] > 1e-10) or np.any(lo[np.isinf(lb)] < -1e-10):
            return False
        support = float(np.sum(ub[np.isfinite(ub)] * up[np.isfinite(ub)])
                        + np.sum(lb[np.isfinite(lb)] * lo[np.isfinite(lb)]))
        return support < -1e-8

    def _polish(self, g, lb, ub, x, y):
        """Refine via the equality KKT system on the apparent active set."""
        ax = self.A @ x
        eps_a = 10.0 * self.tol_prim
        eq = np.isfinite(lb) & np.isfinite(ub) & (ub - lb < 1e-12)
        with np.errstate(invalid="ignore"):
            ub_near = np.where(np.isfinite(ub), ub - eps_a * (1.0 + np.abs(ub)), np.inf)
            lb_near = np.where(np.isfinite(lb), lb + eps_a * (1.0 + np.abs(lb)), -np.inf)
        up = ~eq & np.isfinite(ub) & ((y > 1e-7) | (ax > ub_near))
        lo = ~eq & np.isfinite(lb) & ((y < -1e-7) | (ax < lb_near))
        lo &= ~up
        active = np.where(eq | up | lo)[0]
        b_act = np.where(up[active], ub[active],
                         np.where(lo[active], lb[active], ub[active]))
        na = active.size
        kkt = np.zeros((self.n + na, self.n + na))
        kkt[:self.n, :self.n] = self.H
        if na:
            Aact = self.A[active]
            kkt[:self.n, self.n:] = Aact.T
            kkt[self.n:, :self.n] = Aact
        rhs = np.concatenate([-g, b_act])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        xp = sol[:self.n]
        yp = np.zeros(self.m)
        if na:
            yp[active] = sol[self.n:]
        # verify before accepting
        axp = self.A @ xp
        viol = float(np.max(np.maximum(np.maximum(lb - axp, axp - ub), 0.0), initial=0.0))
        stat = float(np.max(np.abs(self.H @ xp + g + self.A.T @ yp), initial=0.0))
        if viol > max(self.tol_prim, 1e-9) or stat > max(self.tol_dual, 1e-9):
            return None, None
        signs_ok = (np.all(yp[up & ~eq] > -1e-7) if np.any(up) else True) and \
                   (np.all(yp[lo & ~eq] < 1e-7) if np.any(lo) else True)
        if not signs_ok:
            # redundant active rows make multipliers non-unique; recover a
            # sign-valid set by nonnegative least squares
            yp = self._recover_duals(g, xp, eq, up, lo)
            if yp is None:
                return None, None
        return xp, yp

    def _recover_duals(self, g, xp, eq, up, lo):
        cols, keys = [], []
        for i in np.where(eq | up | lo)[0]:
            if eq[i] or up[i]:
                cols.append(self.A[i])
                keys.append((i, 1.0))
            if eq[i] or lo[i]:
                cols.append(-self.A[i])
                keys.append((i, -1.0))
        if not cols:
            return None
        C = np.stack(cols, axis=1)
        target = -(self.H @ xp + g)
        try:
            w, res = scipy.optimize.nnls(C, target)
        except RuntimeError:
            return None
        if res > max(self.tol_dual, 1e-8) * (1.0 + float(np.max(np.abs(target)))):
            return None
        yp = np.zeros(self.m)
        for (i, sgn), wi in zip(keys, w):
            yp[i] += sgn * wi
        return yp


def solve(p: QpProblem, tol_prim: float = DEFAULT_TOL_PRIM,
          tol_dual: float = DEFAULT_TOL_DUAL, max_iter: int = DEFAULT_MAX_ITER,
          x0=None, y0=None) -> QpSolution:
    """Solve a one-off problem (factors the iteration matrix on entry)."""
    eq = (p.ub - p.lb < 1e-12) if p.A.size else None
    qp = StructuredQp(p.H, p.A, tol_prim=tol_prim, tol_dual=tol_dual,
                      max_iter=max_iter, eq_rows=eq)
    return qp.solve(p.g, p.lb, p.ub, x0=x0, y0=y0)
