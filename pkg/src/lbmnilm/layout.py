"""Flat variable layout for the relaxed problem and its linear constraints."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .hmm import RelaxedAssignment
from .stats import StatisticLinearForm, StatKind, eval_statistic


@dataclass(frozen=True)
class VariableLayout:
    """Index ranges of the blocks S, H, U, slack, xi and tau in x.

    ``tau`` holds one auxiliary variable per (appliance, active statistic),
    tied to (S, H) by an equality row; it keeps the statistic penalties
    sparse.
    """

    K: tuple
    T: int
    C: tuple
    stats: tuple = ()
    offsets: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "K", tuple(int(k) for k in self.K))
        object.__setattr__(self, "C", tuple(int(c) for c in self.C))
        object.__setattr__(self, "stats", tuple(StatKind(s) for s in self.stats))
        if len(self.K) != len(self.C):
            raise ValueError("K and C must list the same appliances")
        if self.T < 2:
            raise ValueError("need T >= 2")
        off = {}
        pos = 0
        for i, k in enumerate(self.K):
            off[("S", i)] = (pos, pos + self.T * k)
            pos += self.T * k
        for i, k in enumerate(self.K):
            off[("H", i)] = (pos, pos + (self.T - 1) * k * k)
            pos += (self.T - 1) * k * k
        off["U"] = (pos, pos + self.T)
        pos += self.T
        off["slack"] = (pos, pos + self.T - 1)
        pos += self.T - 1
        for i, c in enumerate(self.C):
            off[("xi", i)] = (pos, pos + c)
            pos += c
        off["tau"] = (pos, pos + self.I * len(self.stats))
        pos += self.I * len(self.stats)
        off["n"] = pos
        object.__setattr__(self, "offsets", off)

    @property
    def I(self) -> int:
        return len(self.K)

    @property
    def n(self) -> int:
        return self.offsets["n"]

    def block(self, name, i=None) -> slice:
        a, b = self.offsets[name if i is None else (name, i)]
        return slice(a, b)

    def tau_index(self, i: int, kind) -> int:
        return self.offsets["tau"][0] + i * len(self.stats) \
            + self.stats.index(StatKind(kind))

    def S(self, x, i) -> np.ndarray:
        return x[self.block("S", i)].reshape(self.T, self.K[i])

    def H(self, x, i) -> np.ndarray:
        k = self.K[i]
        return x[self.block("H", i)].reshape(self.T - 1, k, k)

    def xi(self, x, i) -> np.ndarray:
        return x[self.block("xi", i)]

    def pack(self, a: RelaxedAssignment,
             forms: Mapping | None = None) -> np.ndarray:
        """Flatten an assignment; slack = |dU| and tau from ``forms``."""
        x = np.zeros(self.n)
        for i in range(self.I):
            x[self.block("S", i)] = a.S[i].ravel()
            x[self.block("H", i)] = a.H[i].ravel()
            x[self.block("xi", i)] = a.xi[i]
        x[self.block("U")] = a.U
        x[self.block("slack")] = np.abs(np.diff(a.U))
        for i in range(self.I):
            for kind in self.stats:
                x[self.tau_index(i, kind)] = eval_statistic(
                    forms[(i, kind)], a.S[i], a.H[i])
        return x

    def unpack(self, x) -> RelaxedAssignment:
        return RelaxedAssignment(
            S=[self.S(x, i).copy() for i in range(self.I)],
            H=[self.H(x, i).copy() for i in range(self.I)],
            U=x[self.block("U")].copy(),
            xi=[self.xi(x, i).copy() for i in range(self.I)])


@dataclass
class ConstraintSpec:
    A_eq: sp.csc_matrix
    b_eq: np.ndarray
    A_in: sp.csc_matrix
    b_in: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    groups: dict  # name -> (kind, row slice) for reporting/tests


class _Rows:
    def __init__(self):
        self.r, self.c, self.v, self.b = [], [], [], []
        self.m = 0

    def add(self, nrows, rows, cols, vals, rhs):
        self.r.append(np.asarray(rows) + self.m)
        self.c.append(np.asarray(cols))
        self.v.append(np.broadcast_to(np.asarray(vals, float), np.shape(rows)))
        self.b.append(np.broadcast_to(np.asarray(rhs, float), (nrows,)))
        start = self.m
        self.m += nrows
        return slice(start, self.m)

    def build(self, n):
        if not self.r:
            return sp.csc_matrix((0, n)), np.zeros(0)
        A = sp.csc_matrix((np.concatenate(self.v),
                           (np.concatenate(self.r), np.concatenate(self.c))),
                          shape=(self.m, n))
        return A, np.concatenate(self.b).astype(float)


def build_constraints(layout: VariableLayout,
                      forms: Mapping | None = None) -> ConstraintSpec:
    """Simplex, H-S linking, tau linking and slack epigraph rows + boxes."""
    L, T = layout, layout.T
    eq, ineq = _Rows(), _Rows()
    groups = {}

    for i, K in enumerate(L.K):
        s0 = L.block("S", i).start
        idx = s0 + np.arange(T * K).reshape(T, K)
        groups[("S_simplex", i)] = ("eq", eq.add(
            T, np.repeat(np.arange(T), K), idx.ravel(), 1.0, 1.0))
    for i, C in enumerate(L.C):
        x0 = L.block("xi", i).start
        groups[("xi_simplex", i)] = ("eq", eq.add(
            1, np.zeros(C, int), x0 + np.arange(C), 1.0, 1.0))
    for i, K in enumerate(L.K):
        sidx = L.block("S", i).start + np.arange(T * K).reshape(T, K)
        hidx = L.block("H", i).start + np.arange((T - 1) * K * K).reshape(T - 1, K, K)
        nr = (T - 1) * K
        row = np.arange(nr).reshape(T - 1, K)
        # row sums: sum_k H[t, j, k] = S[t+1, j]
        r = np.concatenate([np.repeat(row.ravel(), K), row.ravel()])
        c = np.concatenate([hidx.ravel(), sidx[1:].ravel()])
        v = np.concatenate([np.ones(nr * K), -np.ones(nr)])
        groups[("H_rows", i)] = ("eq", eq.add(nr, r, c, v, 0.0))
        # column sums: sum_j H[t, j, k] = S[t, k]
        r = np.concatenate([np.repeat(row.ravel(), K), row.ravel()])
        c = np.concatenate([hidx.transpose(0, 2, 1).ravel(), sidx[:-1].ravel()])
        groups[("H_cols", i)] = ("eq", eq.add(nr, r, c, v, 0.0))
    if L.stats:
        if forms is None:
            raise ValueError("statistic forms are required for tau rows")
        for i in range(L.I):
            for kind in L.stats:
                f: StatisticLinearForm = forms[(i, kind)]
                sc = f.s_coef.ravel()
                hc = f.h_coef.ravel()
                cols = np.concatenate([
                    [L.tau_index(i, kind)],
                    L.block("S", i).start + np.flatnonzero(sc),
                    L.block("H", i).start + np.flatnonzero(hc)])
                vals = np.concatenate([[1.0], -sc[sc != 0], -hc[hc != 0]])
                groups[("tau", i, kind)] = ("eq", eq.add(
                    1, np.zeros(cols.size, int), cols, vals, f.offset))
    u0, s0 = L.block("U").start, L.block("slack").start
    t = np.arange(T - 1)
    r = np.concatenate([t, t, t])
    c = np.concatenate([u0 + t + 1, u0 + t, s0 + t])
    groups["slack_up"] = ("in", ineq.add(
        T - 1, r, c, np.concatenate([np.ones(T - 1), -np.ones(T - 1),
                                     -np.ones(T - 1)]), 0.0))
    groups["slack_down"] = ("in", ineq.add(
        T - 1, r, c, np.concatenate([-np.ones(T - 1), np.ones(T - 1),
                                     -np.ones(T - 1)]), 0.0))

    A_eq, b_eq = eq.build(L.n)
    A_in, b_in = ineq.build(L.n)
    lb = np.full(L.n, -np.inf)
    ub = np.full(L.n, np.inf)
    for i in range(L.I):
        for name in ("S", "H", "xi"):
            lb[L.block(name, i)] = 0.0
            ub[L.block(name, i)] = 1.0
    lb[L.block("U")] = 0.0
    return ConstraintSpec(A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in,
                          lb=lb, ub=ub, groups=groups)


def forms_for(layout: VariableLayout, hmms: Sequence, dt: float) -> dict:
    from .stats import statistic_form
    return {(i, kind): statistic_form(kind, hmms[i], layout.T, dt)
            for i in range(layout.I) for kind in layout.stats}
