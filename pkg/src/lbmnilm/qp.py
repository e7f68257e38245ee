"""Operator-splitting (ADMM) solver for convex quadratic programs.

Solves::

    minimize    1/2 x'Qx + c'x
    subject to  A_eq x = b_eq,  A_in x <= b_in,  lb <= x <= ub

The problem is rewritten as ``l <= A x <= u`` (bounded variables become
identity rows) and solved with the OSQP iteration: a cached LDL'
factorisation of the quasi-definite KKT matrix, Ruiz equilibration,
per-row penalties, adaptive rho, infeasibility certificates and an
active-set polishing step.

Dual vector convention: ``y = [y_eq, y_in, y_box]`` with ``y_box`` of
length n. Stationarity reads ``Qx + c + A_eq'y_eq + A_in'y_in + y_box = 0``
with ``y_in >= 0``; ``y_box[j]`` is negative at an active lower bound and
positive at an active upper bound.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import qdldl
import scipy.sparse as sp

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"

RHO_MIN, RHO_MAX = 1e-6, 1e6
RHO_EQ_SCALE = 1e3


class NotConvexError(ValueError):
    """Raised when Q is found to be indefinite."""


def _csc(M, shape):
    if M is None:
        return sp.csc_matrix(shape)
    return sp.csc_matrix(M, dtype=float)


@dataclass
class QpProblem:
    Q: sp.spmatrix
    c: np.ndarray
    A_eq: sp.spmatrix | None = None
    b_eq: np.ndarray | None = None
    A_in: sp.spmatrix | None = None
    b_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        n = self.c.shape[0]
        self.Q = _csc(self.Q, (n, n))
        self.A_eq = _csc(self.A_eq, (0, n))
        self.A_in = _csc(self.A_in, (0, n))
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, float)
        self.b_in = np.zeros(0) if self.b_in is None else np.asarray(self.b_in, float)
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, float)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, float)
        if self.Q.shape != (n, n):
            raise ValueError(f"Q has shape {self.Q.shape}, expected {(n, n)}")
        for name, A, b in (("eq", self.A_eq, self.b_eq), ("in", self.A_in, self.b_in)):
            if A.shape[1] != n or A.shape[0] != b.shape[0]:
                raise ValueError(f"A_{name} {A.shape} inconsistent with b_{name} "
                                 f"{b.shape} and n={n}")
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise ValueError("bounds must have length n")
        if np.any(self.lb > self.ub):
            raise ValueError("lower bound exceeds upper bound")
        asym = abs(self.Q - self.Q.T)
        if asym.nnz and asym.max() > 1e-12 * max(1.0, abs(self.Q).max()):
            raise ValueError("Q must be symmetric")

    @property
    def n(self) -> int:
        return self.c.shape[0]

    @property
    def m_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def m_in(self) -> int:
        return self.A_in.shape[0]

    def objective(self, x) -> float:
        return float(0.5 * x @ (self.Q @ x) + self.c @ x)

    def stacked(self):
        """(A, l, u, box_idx) for the form l <= Ax <= u."""
        box = np.flatnonzero(np.isfinite(self.lb) | np.isfinite(self.ub))
        E = sp.csc_matrix((np.ones(box.size), (np.arange(box.size), box)),
                          shape=(box.size, self.n))
        A = sp.vstack([self.A_eq, self.A_in, E], format="csc")
        l = np.concatenate([self.b_eq, np.full(self.m_in, -np.inf), self.lb[box]])
        u = np.concatenate([self.b_eq, self.b_in, self.ub[box]])
        return A, l, u, box

    def expand_dual(self, y_stacked, box) -> np.ndarray:
        m = self.m_eq + self.m_in
        y = np.zeros(m + self.n)
        y[:m] = y_stacked[:m]
        y[m + box] = y_stacked[m:]
        return y

    def compress_dual(self, y, box) -> np.ndarray:
        m = self.m_eq + self.m_in
        return np.concatenate([y[:m], y[m + box]])


@dataclass
class SolverSettings:
    rho: float = 0.1
    sigma_reg: float = 1e-6
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 20000
    adaptive_rho: bool = True
    polish: bool = True
    alpha: float = 1.6
    scaling_iter: int = 10
    check_every: int = 25
    eps_infeas: float = 1e-7
    polish_refine: int = 10
    polish_every: int = 0
    polish_delta: float = 1e-7
    method: str = "admm"
    ipm_max_iter: int = 100
    ipm_refine: int = 3
    record_history: bool = False

    def __post_init__(self):
        if not self.rho > 0 or self.sigma_reg < 0:
            raise ValueError("rho must be > 0 and sigma_reg >= 0")
        if not (self.eps_abs > 0 and self.eps_rel > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.method not in ("admm", "ipm"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if not 0 < self.alpha < 2:
            raise ValueError("relaxation alpha must lie in (0, 2)")


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: str
    r_prim: float
    r_dual: float
    r_comp: float
    iterations: int
    wall_time: float
    objective: float
    polished: bool = False
    rho: float = 0.0
    history: list = field(default_factory=list)

    @property
    def residuals(self) -> dict:
        return {"primal": self.r_prim, "dual": self.r_dual,
                "complementarity": self.r_comp}


def kkt_residuals(problem: QpProblem, x, y) -> tuple[float, float]:
    """Primal violation and dual residual (stationarity + multiplier signs)."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    r_p = _primal_violation(problem, x)
    m_eq, m_in = problem.m_eq, problem.m_in
    y_eq, y_in, y_box = y[:m_eq], y[m_eq:m_eq + m_in], y[m_eq + m_in:]
    g = problem.Q @ x + problem.c + problem.A_eq.T @ y_eq \
        + problem.A_in.T @ y_in + y_box
    sign = [np.max(-y_in, initial=0.0)]
    # a multiplier on a missing bound must vanish
    sign.append(np.max(np.where(np.isinf(problem.lb), np.maximum(-y_box, 0), 0),
                       initial=0.0))
    sign.append(np.max(np.where(np.isinf(problem.ub), np.maximum(y_box, 0), 0),
                       initial=0.0))
    return r_p, float(max(np.max(np.abs(g), initial=0.0), *sign))


def _primal_violation(problem: QpProblem, x) -> float:
    v = [0.0]
    if problem.m_eq:
        v.append(np.max(np.abs(problem.A_eq @ x - problem.b_eq)))
    if problem.m_in:
        v.append(np.max(problem.A_in @ x - problem.b_in))
    v.append(np.max(problem.lb - x, initial=0.0))
    v.append(np.max(x - problem.ub, initial=0.0))
    return float(max(v))


def complementarity(problem: QpProblem, x, y) -> float:
    m_eq, m_in = problem.m_eq, problem.m_in
    y_in, y_box = y[m_eq:m_eq + m_in], y[m_eq + m_in:]
    v = [0.0]
    if m_in:
        v.append(np.max(np.abs(y_in * (problem.A_in @ x - problem.b_in))))
    with np.errstate(invalid="ignore"):
        lo = np.where(y_box < 0, np.abs(y_box * (x - problem.lb)), 0.0)
        hi = np.where(y_box > 0, np.abs(y_box * (problem.ub - x)), 0.0)
    v.append(np.nanmax(lo, initial=0.0))
    v.append(np.nanmax(hi, initial=0.0))
    return float(max(v))


def _inf_norm_rows(M: sp.csc_matrix) -> np.ndarray:
    M = abs(sp.csr_matrix(M))
    return M.max(axis=1).toarray().ravel() if M.shape[1] else np.zeros(M.shape[0])


def _inf_norm_cols(M: sp.csc_matrix) -> np.ndarray:
    M = abs(sp.csc_matrix(M))
    return M.max(axis=0).toarray().ravel() if M.shape[0] else np.zeros(M.shape[1])


def check_convex(Q: sp.spmatrix, sigma: float = 1e-6) -> None:
    """Raise NotConvexError if Q is found indefinite.

    Q is first scaled to unit diagonal (a congruence, so the inertia is
    unchanged) to make the pivot test insensitive to the magnitude of Q;
    then ``Q + sigma*I`` must factor with positive pivots.
    """
    n = Q.shape[0]
    if n == 0:
        return
    Q = sp.csc_matrix(Q)
    d = np.abs(Q.diagonal())
    d = 1.0 / np.sqrt(np.where(d > 0, d, 1.0))
    Dm = sp.diags(d)
    M = (Dm @ Q @ Dm).tocsc() + sigma * sp.identity(n, format="csc")
    try:
        fac = qdldl.Solver(M)
    except ValueError as exc:  # zero pivot
        raise NotConvexError(str(exc)) from None
    D = _ldl_diag(fac)
    if D is not None and np.any(D <= 0):
        raise NotConvexError(
            f"Q is indefinite ({int((D <= 0).sum())} non-positive pivots)")


def _ldl_diag(fac):
    try:
        factors = fac.factors()
    except Exception:  # pragma: no cover - older wrappers
        return None
    D = factors[1]
    return np.asarray(D.diagonal() if sp.issparse(D) else D).ravel()


def ruiz_scale(Q, c, A, iters: int = 10):
    """Ruiz equilibration of (Q, A) plus a scalar cost scaling.

    Returns ``(P, q, A_s, D, E, cost)`` with ``P = cost*D Q D``,
    ``q = cost*D c`` and ``A_s = E A D``.
    """
    P, q, A = sp.csc_matrix(Q, copy=True), np.array(c, dtype=float), sp.csc_matrix(A, copy=True)
    n, m = P.shape[0], A.shape[0]
    D, E = np.ones(n), np.ones(m)
    cost = 1.0
    for _ in range(iters):
        nx = np.maximum(_inf_norm_cols(P), _inf_norm_cols(A))
        nz = _inf_norm_rows(A)
        dx = 1.0 / np.sqrt(np.clip(np.where(nx < 1e-4, 1.0, nx), 1e-4, 1e4))
        dz = 1.0 / np.sqrt(np.clip(np.where(nz < 1e-4, 1.0, nz), 1e-4, 1e4))
        Dm, Em = sp.diags(dx), sp.diags(dz)
        P = (Dm @ P @ Dm).tocsc()
        A = (Em @ A @ Dm).tocsc()
        q = dx * q
        D *= dx
        E *= dz
        pn = _inf_norm_cols(P)
        gamma = max(pn.mean() if n else 0.0, np.max(np.abs(q), initial=0.0))
        gamma = 1.0 / np.clip(gamma if gamma >= 1e-4 else 1.0, 1e-4, 1e4)
        P = gamma * P
        q = gamma * q
        cost *= gamma
    return P, q, A, D, E, cost


class QpSolver:
    """One-shot solver; owns the scaled data and the KKT factorisation."""

    def __init__(self, problem: QpProblem, settings: SolverSettings | None = None):
        self.problem = problem
        self.settings = settings or SolverSettings()
        self.A0, self.l0, self.u0, self.box = problem.stacked()
        self._scale()

    # -- setup -----------------------------------------------------------
    def _scale(self):
        s = self.settings
        P, q, A, D, E, cost = ruiz_scale(self.problem.Q, self.problem.c, self.A0,
                                         s.scaling_iter)
        self.P, self.q, self.A = P, q, A
        self.l, self.u = E * self.l0, E * self.u0
        self.D, self.E, self.cost = D, E, cost
        eq = (self.l == self.u)
        free = np.isinf(self.l) & np.isinf(self.u)
        self._eq, self._free = eq, free
        self.rho = s.rho
        self._rho_vec()
        self._factor(first=True)

    def _rho_vec(self):
        r = np.full(self.A.shape[0], self.rho)
        r[self._eq] = RHO_EQ_SCALE * self.rho
        r[self._free] = RHO_MIN
        self.rho_vec = np.clip(r, RHO_MIN, RHO_MAX * RHO_EQ_SCALE)

    def _kkt(self):
        n = self.P.shape[0]
        Psig = self.P + self.settings.sigma_reg * sp.identity(n, format="csc")
        return sp.bmat([[sp.triu(Psig, format="csc"), self.A.T],
                        [None, sp.diags(-1.0 / self.rho_vec)]], format="csc")

    def _factor(self, first=False):
        K = self._kkt()
        if first:
            self.fac = qdldl.Solver(K, upper=True)
        else:
            self.fac.update(K, upper=True)

    # -- helpers ---------------------------------------------------------
    def _unscale(self, x, y, z):
        return self.D * x, self.E * y / self.cost, z / self.E

    def _residuals(self, x, y, z):
        """Unscaled primal/dual residuals and their tolerance scales."""
        Dinv_x = x
        Ax = self.A @ Dinv_x
        Px = self.P @ x
        Aty = self.A.T @ y
        Einv = 1.0 / self.E
        Dinv = 1.0 / self.D
        r_p = np.max(np.abs(Einv * (Ax - z)), initial=0.0)
        r_d = np.max(np.abs(Dinv * (Px + self.q + Aty)), initial=0.0) / self.cost
        sp_ = max(np.max(np.abs(Einv * Ax), initial=0.0),
                  np.max(np.abs(Einv * z), initial=0.0))
        sd_ = max(np.max(np.abs(Dinv * Px), initial=0.0),
                  np.max(np.abs(Dinv * Aty), initial=0.0),
                  np.max(np.abs(Dinv * self.q), initial=0.0)) / self.cost
        return r_p, r_d, sp_, sd_, (Ax, Px, Aty)

    def _primal_infeasible(self, dy) -> bool:
        eps = self.settings.eps_infeas
        dyu = self.E * dy
        nrm = np.max(np.abs(dyu), initial=0.0)
        if nrm < 1e-14:
            return False
        Atdy = self.A0.T @ dyu
        if np.max(np.abs(Atdy), initial=0.0) > eps * nrm:
            return False
        pos, neg = dyu > eps * nrm, dyu < -eps * nrm
        if np.any(pos & np.isinf(self.u0)) or np.any(neg & np.isinf(self.l0)):
            return False
        val = np.sum(self.u0[pos] * dyu[pos]) + np.sum(self.l0[neg] * dyu[neg])
        return val < -eps * nrm

    def _dual_infeasible(self, dx) -> bool:
        eps = self.settings.eps_infeas
        dxu = self.D * dx
        nrm = np.max(np.abs(dxu), initial=0.0)
        if nrm < 1e-14:
            return False
        if np.max(np.abs(self.problem.Q @ dxu), initial=0.0) > eps * nrm:
            return False
        if self.problem.c @ dxu >= -eps * nrm:
            return False
        Adx = self.A0 @ dxu
        ok_hi = np.isinf(self.u0) | (Adx <= eps * nrm)
        ok_lo = np.isinf(self.l0) | (Adx >= -eps * nrm)
        return bool(np.all(ok_hi & ok_lo))

    # -- main loop -------------------------------------------------------
    def solve(self, x0=None, y0=None) -> QpSolution:
        s = self.settings
        t0 = time.perf_counter()
        n, m = self.P.shape[0], self.A.shape[0]
        if x0 is not None:
            x = np.asarray(x0, float) / self.D
        else:
            x = np.zeros(n)
        if y0 is not None:
            y = self.cost * self.problem.compress_dual(np.asarray(y0, float),
                                                       self.box) / self.E
        else:
            y = np.zeros(m)
        z = np.clip(self.A @ x, self.l, self.u)
        status = MAX_ITER
        history = []
        it = 0
        r_p = r_d = np.inf
        for it in range(1, s.max_iter + 1):
            x_prev, y_prev = x, y
            rhs = np.concatenate([s.sigma_reg * x - self.q, z - y / self.rho_vec])
            sol = self.fac.solve(rhs)
            xt, nu = sol[:n], sol[n:]
            zt = z + (nu - y) / self.rho_vec
            x = s.alpha * xt + (1 - s.alpha) * x_prev
            zr = s.alpha * zt + (1 - s.alpha) * z
            z_new = np.clip(zr + y / self.rho_vec, self.l, self.u)
            y = y + self.rho_vec * (zr - z_new)
            z = z_new

            check = (it % s.check_every == 0) or it == s.max_iter
            if s.record_history or check:
                r_p, r_d, sp_, sd_, _ = self._residuals(x, y, z)
                if s.record_history:
                    history.append((it, float(r_p), float(r_d)))
            if not check:
                continue
            eps_p = s.eps_abs + s.eps_rel * sp_
            eps_d = s.eps_abs + s.eps_rel * sd_
            if r_p <= eps_p and r_d <= eps_d:
                status = OPTIMAL
                break
            if self._primal_infeasible(y - y_prev):
                status = INFEASIBLE
                break
            if self._dual_infeasible(x - x_prev):
                status = UNBOUNDED
                break
            if (s.polish and s.polish_every and it % s.polish_every == 0):
                early = self._early_polish(x, y, z, it, t0, history)
                if early is not None:
                    return early
            if s.adaptive_rho:
                self._adapt_rho(x, y, z)

        self._scaled_state = (x, y, z)
        xu, yu, zu = self._unscale(x, y, z)
        y_full = self.problem.expand_dual(yu, self.box)
        sol = self._finish(xu, y_full, status, it, t0, history)
        if status == OPTIMAL and s.polish:
            sol = self._polish(sol, zu, t0)
        return sol

    def _adapt_rho(self, x, y, z):
        Ax = self.A @ x
        Px = self.P @ x
        Aty = self.A.T @ y
        rp = np.max(np.abs(Ax - z), initial=0.0)
        rd = np.max(np.abs(Px + self.q + Aty), initial=0.0)
        sp_ = max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(z), initial=0.0))
        sd_ = max(np.max(np.abs(Px), initial=0.0), np.max(np.abs(Aty), initial=0.0),
                  np.max(np.abs(self.q), initial=0.0))
        num = rp / (sp_ + 1e-10)
        den = rd / (sd_ + 1e-10)
        if den <= 0 or num <= 0:
            return
        new = float(np.clip(self.rho * np.sqrt(num / den), RHO_MIN, RHO_MAX))
        if new > 5 * self.rho or new < self.rho / 5:
            self.rho = new
            self._rho_vec()
            self._factor()

    def _finish(self, x, y, status, it, t0, history) -> QpSolution:
        pb = self.problem
        r_p, r_d = kkt_residuals(pb, x, y)
        return QpSolution(x=x, y=y, status=status, r_prim=r_p, r_dual=r_d,
                          r_comp=complementarity(pb, x, y), iterations=it,
                          wall_time=time.perf_counter() - t0,
                          objective=pb.objective(x), rho=self.rho,
                          history=history)

    def _polish_candidate(self, x, y, z):
        """Active-set refinement of a scaled iterate.

        The rows guessed active from (z, y) are imposed as equalities and
        the reduced KKT system is solved by iterative refinement started at
        the current iterate, i.e. proximal-point steps with weight
        ``polish_delta``; this stays well posed on degenerate active sets.
        Returns unscaled (x, y_full, sign violation) or None.
        """
        s = self.settings
        P, q, A, l, u = self.P, self.q, self.A, self.l, self.u
        eq = l == u
        lo = ((z - l < -y) | eq) & np.isfinite(l)
        hi = (u - z < y) & ~lo & np.isfinite(u)
        act = np.flatnonzero(lo | hi)
        b = np.where(lo, l, u)[act]
        Aa = A[act]
        n, k = P.shape[0], act.size
        delta = s.polish_delta
        K0 = sp.bmat([[P, Aa.T], [Aa, None]], format="csc")
        Kd = sp.bmat([[sp.triu(P + delta * sp.identity(n), format="csc"), Aa.T],
                      [None, -delta * sp.identity(k, format="csc")]], format="csc")
        try:
            fac = qdldl.Solver(Kd, upper=True)
        except ValueError:
            return None
        rhs = np.concatenate([-q, b])
        v = np.concatenate([x, y[act]])
        for _ in range(s.polish_refine):
            v = v + fac.solve(rhs - K0 @ v)
        if not np.all(np.isfinite(v)):
            return None
        ys = np.zeros_like(y)
        ys[act] = v[n:]
        xu, yu, _ = self._unscale(v[:n], ys, z)
        # lower-active rows need y <= 0, upper-active rows y >= 0
        viol = max(np.max(yu[lo & ~eq], initial=0.0),
                   np.max(-yu[hi & ~eq], initial=0.0))
        return xu, self.problem.expand_dual(yu, self.box), float(viol)

    def _polish(self, sol: QpSolution, z, t0) -> QpSolution:
        """Polish an optimal iterate; keep it only if it is no worse."""
        s = self.settings
        got = self._polish_candidate(*self._scaled_state)
        if got is None:
            return sol
        x, y, viol = got
        cand = self._finish(x, y, OPTIMAL, sol.iterations, t0, sol.history)
        slack = 1e-12 * max(1.0, abs(sol.objective))
        tol = max(sol.r_dual, s.eps_abs)
        if (cand.objective <= sol.objective + slack
                and cand.r_prim <= max(sol.r_prim, s.eps_abs)
                and cand.r_dual <= tol and viol <= tol):
            cand.polished = True
            return cand
        return sol

    def _early_polish(self, x, y, z, it, t0, history):
        """Try the active-set solve mid-run; return a solution if it meets
        the termination tolerances."""
        s = self.settings
        got = self._polish_candidate(x, y, z)
        if got is None:
            return None
        xp, yp, viol = got
        pb = self.problem
        r_p, r_d = kkt_residuals(pb, xp, yp)
        Ax = self.A0 @ xp
        ys = pb.compress_dual(yp, self.box)
        sc_p = np.max(np.abs(Ax), initial=0.0)
        sc_d = max(np.max(np.abs(pb.Q @ xp), initial=0.0),
                   np.max(np.abs(self.A0.T @ ys), initial=0.0),
                   np.max(np.abs(pb.c), initial=0.0))
        eps_p = s.eps_abs + s.eps_rel * sc_p
        eps_d = s.eps_abs + s.eps_rel * sc_d
        if r_p <= eps_p and r_d <= eps_d and viol <= eps_d:
            sol = self._finish(xp, yp, OPTIMAL, it, t0, history)
            sol.polished = True
            return sol
        return None


def solve_qp(problem: QpProblem, settings: SolverSettings | None = None,
             x0=None, y0=None, check_psd: bool = True) -> QpSolution:
    """Solve a convex QP; ``x0``/``y0`` warm-start the iteration."""
    settings = settings or SolverSettings()
    if check_psd:
        check_convex(problem.Q, max(settings.sigma_reg, 1e-10))
    if settings.method == "ipm":
        from .ipm import solve_qp_ipm
        return solve_qp_ipm(problem, settings)
    return QpSolver(problem, settings).solve(x0, y0)


def dump_problem(problem: QpProblem, path) -> None:
    """Write a problem in a plain sparse text format.

    Layout: a header line ``n m_eq m_in``, then sections ``Q``, ``A_eq``,
    ``A_in`` each starting with ``<name> <nnz>`` followed by ``i j v``
    triplets, then vector sections ``c``, ``b_eq``, ``b_in``, ``lb``, ``ub``
    each as ``<name> <len>`` followed by one value per line (``inf``/``-inf``
    allowed).
    """
    with open(path, "w") as f:
        f.write(f"{problem.n} {problem.m_eq} {problem.m_in}\n")
        for name, M in (("Q", problem.Q), ("A_eq", problem.A_eq),
                        ("A_in", problem.A_in)):
            C = sp.coo_matrix(M)
            f.write(f"{name} {C.nnz}\n")
            for i, j, v in zip(C.row, C.col, C.data):
                f.write(f"{int(i)} {int(j)} {float(v)!r}\n")
        for name in ("c", "b_eq", "b_in", "lb", "ub"):
            vec = getattr(problem, name)
            f.write(f"{name} {vec.size}\n")
            f.writelines(f"{float(v)!r}\n" for v in vec)


def load_problem(path) -> QpProblem:
    with open(path) as f:
        lines = iter(f.read().split("\n"))
    n, m_eq, m_in = map(int, next(lines).split())
    shapes = {"Q": (n, n), "A_eq": (m_eq, n), "A_in": (m_in, n)}
    data = {}
    for name in ("Q", "A_eq", "A_in"):
        tag, nnz = next(lines).split()
        if tag != name:
            raise ValueError(f"expected section {name}, found {tag}")
        trip = [next(lines).split() for _ in range(int(nnz))]
        r = [int(t[0]) for t in trip]
        c = [int(t[1]) for t in trip]
        v = [float(t[2]) for t in trip]
        data[name] = sp.csc_matrix((v, (r, c)), shape=shapes[name])
    for name in ("c", "b_eq", "b_in", "lb", "ub"):
        tag, size = next(lines).split()
        if tag != name:
            raise ValueError(f"expected section {name}, found {tag}")
        data[name] = np.array([float(next(lines)) for _ in range(int(size))])
    return QpProblem(**data)
