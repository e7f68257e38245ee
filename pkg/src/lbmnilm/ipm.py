"""Primal-dual interior-point backend for :class:`~lbmnilm.qp.QpProblem`.

Mehrotra predictor-corrector on the problem with inequality rows
``A_in x + s = b_in`` and bound slacks, ``s, z >= 0``. Each iteration
factors the quasi-definite augmented system::

    [ Q + Db + reg   A_eq'    A_in'          ]
    [ A_eq          -reg      0              ]
    [ A_in           0       -S/Z - reg      ]

with one symbolic analysis reused throughout, and refines against the
unregularised matrix. Bound rows are eliminated into the diagonal ``Db``.

The disaggregation relaxations are highly degenerate (near-LP with many
ties), where operator splitting has a long tail; an interior-point method
needs a few dozen factorisations regardless.
"""

from __future__ import annotations

import time

import numpy as np
import qdldl
import scipy.sparse as sp

from .qp import (MAX_ITER, OPTIMAL, QpProblem, QpSolution, SolverSettings,
                 complementarity, kkt_residuals, ruiz_scale)

STEP_FRACTION = 0.99
REG = 1e-9


class _Ipm:
    def __init__(self, problem: QpProblem, settings: SolverSettings):
        self.pb, self.s = problem, settings
        me, mi = problem.m_eq, problem.m_in
        A = sp.vstack([problem.A_eq, problem.A_in], format="csc")
        P, q, As, D, E, cost = ruiz_scale(problem.Q, problem.c, A, settings.scaling_iter)
        self.Q, self.c, self.D, self.cost = P, q, D, cost
        self.Ae, self.Ai = As[:me].tocsc(), As[me:].tocsc()
        self.Ee, self.Ei = E[:me], E[me:]
        self.b = self.Ee * problem.b_eq
        self.h = self.Ei * problem.b_in
        lb, ub = problem.lb / D, problem.ub / D
        self.L = np.flatnonzero(np.isfinite(lb))
        self.U = np.flatnonzero(np.isfinite(ub))
        self.lbL, self.ubU = lb[self.L], ub[self.U]
        self.n, self.me, self.mi = problem.n, me, mi
        self.m = mi + self.L.size + self.U.size
        self._pattern()

    # -- linear algebra ---------------------------------------------------
    def _pattern(self):
        n, me, mi = self.n, self.me, self.mi
        self.K0 = sp.bmat([[self.Q, self.Ae.T, self.Ai.T],
                           [self.Ae, sp.csc_matrix((me, me)), None],
                           [self.Ai, None, sp.csc_matrix((mi, mi))]], format="csc")
        # upper triangle with a structurally full diagonal (Q_ii >= 0, so
        # Q_ii + 1 never cancels); the 1s are removed from the static values
        upper = sp.bmat([[sp.triu(self.Q) + sp.identity(n), self.Ae.T, self.Ai.T],
                         [None, sp.identity(me), None],
                         [None, None, sp.identity(mi)]], format="csc")
        upper.sort_indices()
        cols = np.repeat(np.arange(upper.shape[1]), np.diff(upper.indptr))
        self.diag_pos = np.flatnonzero(upper.indices == cols)
        self.static = upper.data.copy()
        self.static[self.diag_pos] -= 1.0
        self.Ku = upper
        self.fac = None

    def _factor(self, d1, d3):
        me = self.me
        K = sp.csc_matrix(self.Ku, copy=True)
        K.data = self.static.copy()
        diag = np.concatenate([d1 + REG, np.full(me, -REG), -d3 - REG])
        K.data[self.diag_pos] += diag
        if self.fac is None:
            self.fac = qdldl.Solver(K, upper=True)
        else:
            self.fac.update(K, upper=True)
        d0 = np.concatenate([d1, np.zeros(me), -d3])
        self._Kfull = self.K0 + sp.diags(d0)

    def _solve(self, rhs):
        v = self.fac.solve(rhs)
        for _ in range(self.s.ipm_refine):
            v = v + self.fac.solve(rhs - self._Kfull @ v)
        return v

    # -- main loop --------------------------------------------------------
    def _G(self, x):
        """Inequality rows stacked as [A_in; -I_L; I_U]."""
        return np.concatenate([self.Ai @ x, -x[self.L], x[self.U]])

    def _Gt(self, z):
        mi, nl = self.mi, self.L.size
        out = self.Ai.T @ z[:mi]
        np.add.at(out, self.L, -z[mi:mi + nl])
        np.add.at(out, self.U, z[mi + nl:])
        return out

    def _bound_diag(self, w):
        mi, nl = self.mi, self.L.size
        d = np.zeros(self.n)
        np.add.at(d, self.L, w[mi:mi + nl])
        np.add.at(d, self.U, w[mi + nl:])
        return d

    def _newton(self, s, z, r_d, r_p, r_g, r_c):
        """Solve for (dx, dy, dz, ds) given the complementarity target r_c.

        Non-finite directions (slacks underflowing near convergence) are
        returned as is; the caller stops on them.
        """
        mi, n, me = self.mi, self.n, self.me
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            w = z / s
            t = (r_c + z * r_g) / s
            rhs1 = -r_d - self._Gt(np.concatenate([np.zeros(mi), t[mi:]]))
            rhs3 = -r_c[:mi] / z[:mi] - r_g[:mi]
            v = self._solve(np.concatenate([rhs1, -r_p, rhs3]))
            dx, dy, dzi = v[:n], v[n:n + me], v[n + me:]
            Gdx = self._G(dx)
            dz = w * Gdx + t
            dz[:mi] = dzi
            ds = -r_g - Gdx
        return dx, dy, dz, ds

    @staticmethod
    def _step(v, dv):
        neg = dv < 0
        return float(np.min(-v[neg] / dv[neg], initial=np.inf))

    def solve(self) -> QpSolution:
        s = self.s
        t0 = time.perf_counter()
        n, me, mi, m = self.n, self.me, self.mi, self.m
        h = np.concatenate([self.h, -self.lbL, self.ubU])
        # initial point from the W = I system (shifted into the interior)
        self._factor(self._bound_diag(np.ones(m)), np.ones(mi))
        rhs1 = -self.c + self._Gt(np.concatenate([np.zeros(mi), h[mi:]]))
        v = self._solve(np.concatenate([rhs1, self.b, self.h]))
        x, y = v[:n], v[n:n + me]
        zt = self._G(x) - h
        sl, z = -zt.copy(), zt.copy()
        if m:
            a = -sl.min()
            if a >= -1e-8:
                sl += 1.0 + a
            a = -z.min()
            if a >= -1e-8:
                z += 1.0 + a
        status, it = MAX_ITER, 0
        best, best_merit = None, np.inf
        for it in range(1, s.ipm_max_iter + 1):
            r_d = self.Q @ x + self.c + self.Ae.T @ y + self._Gt(z)
            r_p = self.Ae @ x - self.b
            r_g = self._G(x) + sl - h
            mu = float(sl @ z) / m if m else 0.0
            merit = self._merit(x, y, z, sl)
            if merit <= 1.0:
                status = OPTIMAL
                break
            if merit < best_merit:
                best, best_merit = (x, y, z, it), merit
            self._factor(self._bound_diag(z / sl), sl[:mi] / z[:mi])
            dxa, dya, dza, dsa = self._newton(sl, z, r_d, r_p, r_g, -sl * z)
            alpha = min(1.0, self._step(sl, dsa), self._step(z, dza))
            mu_aff = float((sl + alpha * dsa) @ (z + alpha * dza)) / m if m else 0.0
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            r_c = -sl * z + sigma * mu - dsa * dza
            dx, dy, dz, ds = self._newton(sl, z, r_d, r_p, r_g, r_c)
            if not all(np.all(np.isfinite(v)) for v in (dx, dy, dz, ds)):
                break  # numerical breakdown: keep the last finite iterate
            alpha = min(1.0, STEP_FRACTION * min(self._step(sl, ds), self._step(z, dz)))
            x, y, z, sl = x + alpha * dx, y + alpha * dy, z + alpha * dz, sl + alpha * ds
        if status != OPTIMAL and best is not None \
                and not self._merit(x, y, z, sl) < best_merit:
            # stalled below the tolerance reachable in floating point: keep
            # the best iterate rather than the last one
            x, y, z, _ = best
        return self._finish(x, y, z, status, it, t0)

    def _unscaled_duals(self, y, z):
        mi, nl = self.mi, self.L.size
        y_eq = self.Ee * y / self.cost
        y_in = self.Ei * z[:mi] / self.cost
        y_box = np.zeros(self.n)
        np.add.at(y_box, self.L, -z[mi:mi + nl])
        np.add.at(y_box, self.U, z[mi + nl:])
        y_box = y_box / (self.D * self.cost)
        return np.concatenate([y_eq, y_in, y_box])

    def _merit(self, x, y, z, sl) -> float:
        """Largest ratio of a KKT residual or the duality gap to its
        tolerance; at most 1 means converged."""
        s = self.s
        xu = self.D * x
        yy = self._unscaled_duals(y, z)
        r_prim, r_dual = kkt_residuals(self.pb, xu, yy)
        pb = self.pb
        sc_p = max(np.max(np.abs(pb.A_eq @ xu), initial=0.0),
                   np.max(np.abs(pb.b_eq), initial=0.0),
                   np.max(np.abs(pb.A_in @ xu), initial=0.0), 1.0)
        sc_d = max(np.max(np.abs(pb.Q @ xu), initial=0.0),
                   np.max(np.abs(pb.c), initial=0.0), 1.0)
        gap = float(sl @ z) / self.cost
        obj = pb.objective(xu)
        tol_p = s.eps_abs + s.eps_rel * sc_p
        tol_d = s.eps_abs + s.eps_rel * sc_d
        tol_g = s.eps_abs + s.eps_rel * max(1.0, abs(obj))
        return max(r_prim / tol_p, r_dual / tol_d, gap / tol_g)

    def _finish(self, x, y, z, status, it, t0) -> QpSolution:
        pb = self.pb
        xu = self.D * x
        yy = self._unscaled_duals(y, z)
        r_p, r_d = kkt_residuals(pb, xu, yy)
        return QpSolution(x=xu, y=yy, status=status, r_prim=r_p, r_dual=r_d,
                          r_comp=complementarity(pb, xu, yy), iterations=it,
                          wall_time=time.perf_counter() - t0,
                          objective=pb.objective(xu))


def solve_qp_ipm(problem: QpProblem, settings: SolverSettings) -> QpSolution:
    """Solve with the interior-point method.

    Variables with ``lb == ub`` leave no interior for their bound slacks, so
    they are passed to the iteration as equality rows; their multipliers are
    reported back as box duals.
    """
    fixed = np.flatnonzero(problem.lb == problem.ub)
    if fixed.size == 0:
        return _Ipm(problem, settings).solve()
    n, me, mi = problem.n, problem.m_eq, problem.m_in
    E = sp.csc_matrix((np.ones(fixed.size), (np.arange(fixed.size), fixed)),
                      shape=(fixed.size, n))
    lb, ub = problem.lb.copy(), problem.ub.copy()
    lb[fixed], ub[fixed] = -np.inf, np.inf
    aug = QpProblem(problem.Q, problem.c, sp.vstack([problem.A_eq, E], format="csc"),
                    np.concatenate([problem.b_eq, problem.lb[fixed]]),
                    problem.A_in, problem.b_in, lb, ub)
    sol = _Ipm(aug, settings).solve()
    x = sol.x.copy()
    x[fixed] = problem.lb[fixed]
    y_box = sol.y[me + fixed.size + mi:].copy()
    y_box[fixed] = sol.y[me:me + fixed.size]
    y = np.concatenate([sol.y[:me], sol.y[me + fixed.size:me + fixed.size + mi], y_box])
    r_p, r_d = kkt_residuals(problem, x, y)
    return QpSolution(x=x, y=y, status=sol.status, r_prim=r_p, r_dual=r_d,
                      r_comp=complementarity(problem, x, y), iterations=sol.iterations,
                      wall_time=sol.wall_time, objective=problem.objective(x))
