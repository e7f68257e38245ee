"""Alternating MAP inference: closed-form noise updates and relaxed QP solves."""

from __future__ import annotations

import itertools
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .hmm import (ApplianceHmm, NoiseState, RelaxedAssignment, consistent_h,
                  round_states)
from .layout import VariableLayout, build_constraints, forms_for
from .melding import MethodConfig, assemble_objective
from .qp import (INFEASIBLE, OPTIMAL, QpProblem, SolverSettings, dump_problem,
                 solve_qp)
from .stats import STAT_ORDER, path_statistics, stat_index
from .tv import tv_denoise_nonneg

log = logging.getLogger(__name__)

__all__ = ["VariableLayout", "build_constraints", "update_sigma", "run_map",
           "InferenceResult", "InferenceError", "exhaustive_map"]

CAP_FRACTION = 0.99
MAD_TO_SD = 1.4826
MAX_ENUMERATION = 10 ** 6


def inference_settings(**overrides) -> SolverSettings:
    """Solver settings used by :func:`run_map` unless given explicitly.

    The relaxations are degenerate near-LPs on which the ADMM backend
    converges slowly, so the interior-point backend is the default here.
    """
    kw = {"method": "ipm", "eps_abs": 1e-8, "eps_rel": 1e-8}
    kw.update(overrides)
    return SolverSettings(**kw)


class InferenceError(RuntimeError):
    """The QP solver failed in a way the alternating loop cannot recover from."""


def update_sigma(R: float, T: int, r_stat, a: float, b: float, caps,
                 prev: np.ndarray | None = None, weight: float = 1.0,
                 floor: NoiseState | None = None) -> NoiseState:
    """Closed-form conditional minimisers of the noise variances.

    Parameters
    ----------
    R : sum of squared mains residuals.
    T : number of samples.
    r_stat : (I, 3) squared statistic residuals; NaN marks statistics not in
        the model, which keep ``prev`` (or ``0.5 * cap``).
    a, b : Gamma shape and rate of the inverse-variance priors.
    caps : (I, 3) induced-prior variances; results are clamped below
        ``0.99 * cap``.
    weight : exponent on the statistic likelihood (``1 - alpha`` under
        melding; 1 gives the unweighted update).
    floor : optional lower bounds on every variance. The conditional
        objective is unimodal in each variance, so clipping the closed form
        into ``[floor, 0.99 * cap]`` stays the exact constrained minimiser.
    """
    if R < 0 or T < 1 or not a > 1 or not b > 0:
        raise ValueError("need R >= 0, T >= 1, a > 1, b > 0")
    r_stat = np.asarray(r_stat, dtype=float)
    caps = np.asarray(caps, dtype=float)
    sigma2 = (R / 2 + b) / (T / 2 + a - 1)
    s2 = (weight * r_stat / 2 + b) / (weight / 2 + a - 1)
    keep = np.isnan(r_stat)
    if np.any(keep):
        fallback = 0.5 * caps if prev is None else np.asarray(prev, float)
        s2 = np.where(keep, fallback, s2)
    if floor is not None:
        sigma2 = max(sigma2, floor.sigma2)
        s2 = np.maximum(s2, floor.sigma2_stat)
    s2 = np.minimum(s2, CAP_FRACTION * caps)
    return NoiseState(sigma2=float(sigma2), sigma2_stat=s2, caps=caps)


def _caps(population, I):
    if population is None:
        return np.full((I, 3), np.inf)
    caps = np.full((I, 3), np.inf)
    for i, ap in enumerate(population):
        if ap.has_induced():
            caps[i] = ap.sigma2_hat
    return caps


def initial_noise(Y, population, I: int) -> NoiseState:
    """Data-scale start: sigma2 from a robust spread of the first differences
    of Y (half the variance of a difference of two noise draws), statistic
    variances at the population regression variance (below the caps)."""
    Y = np.asarray(Y, float)
    d = np.diff(Y)
    mad = float(np.median(np.abs(d - np.median(d))))
    sigma2 = max((MAD_TO_SD * mad) ** 2 / 2, 1e-2)
    caps = _caps(population, I)
    s2 = np.ones((I, 3))
    if population is not None:
        for i, ap in enumerate(population):
            for m, kind in enumerate(STAT_ORDER):
                s2[i, m] = ap.stats[kind].sigma2
    s2 = np.minimum(s2, 0.5 * caps)
    return NoiseState(sigma2=sigma2, sigma2_stat=s2, caps=caps)


@dataclass
class InferenceResult:
    """Rounded disaggregation plus the relaxed solution's diagnostics."""

    signals: list  # per appliance (T,)
    U: np.ndarray
    states: list  # per appliance (T,) int
    xi: list  # argmax cycle count per appliance
    statistics: np.ndarray  # (I, 3) from the rounded paths
    noise: NoiseState
    objective_trace: list
    exact_trace: list
    diagnostics: list
    config: dict
    relaxed: RelaxedAssignment | None = None
    names: list = field(default_factory=list)

    def to_dict(self, timing: bool = False) -> dict:
        diag = [{k: v for k, v in d.items() if timing or k != "wall_time"}
                for d in self.diagnostics]
        return {
            "appliances": list(self.names),
            "signals": [np.asarray(s).tolist() for s in self.signals],
            "U": np.asarray(self.U).tolist(),
            "states": [np.asarray(z).tolist() for z in self.states],
            "xi": [int(c) for c in self.xi],
            "statistics": {
                name: {k.value: float(self.statistics[i, m])
                       for m, k in enumerate(STAT_ORDER)}
                for i, name in enumerate(self.names)},
            "noise": {"sigma2": self.noise.sigma2,
                      "sigma2_stat": self.noise.sigma2_stat.tolist(),
                      "caps": [[None if not np.isfinite(v) else float(v) for v in row]
                               for row in self.noise.caps]},
            "objective_trace": [float(v) for v in self.objective_trace],
            "exact_trace": [float(v) for v in self.exact_trace],
            "diagnostics": diag,
            "config": self.config,
        }


def _as_list(population, hmms) -> list | None:
    if population is None:
        return None
    if hasattr(population, "appliances"):
        try:
            return [population.appliances[h.name] for h in hmms]
        except KeyError as e:
            raise ValueError(f"population model missing appliance {e}") from None
    return list(population)


def make_layout(method: MethodConfig, hmms, population, T: int) -> VariableLayout:
    if method.variant == "lbm":
        C = [ap.C for ap in population]
    else:
        C = [1] * len(hmms)
    return VariableLayout(K=[h.K for h in hmms], T=T, C=C, stats=method.active_stats)


def _initial_point(Y, hmms, layout, forms, population, method) -> tuple:
    T = layout.T
    S = [np.full((T, h.K), 1.0 / h.K) for h in hmms]
    H = [consistent_h(s) for s in S]
    expected = sum(float(h.mu.mean()) for h in hmms)
    U = np.maximum(0.0, Y - expected)
    if method.variant == "lbm":
        xi = [ap.cycle_prior.copy() for ap in population]
        if method.xi_mode == "block":
            xi = [np.eye(ap.C)[int(np.argmax(ap.cycle_prior))] for ap in population]
    else:
        xi = [np.ones(1) for _ in hmms]
    a = RelaxedAssignment(S=S, H=H, U=U, xi=xi)
    return layout.pack(a, forms), a


def _residuals(Y, x, layout, hmms, population, method) -> tuple[float, np.ndarray]:
    pred = x[layout.block("U")].copy()
    for i, h in enumerate(hmms):
        pred += layout.S(x, i) @ h.mu
    R = float(np.sum((Y - pred) ** 2))
    r = np.full((layout.I, 3), np.nan)
    if method.variant == "lbm":
        for i, ap in enumerate(population):
            xi = layout.xi(x, i)
            for kind in method.active_stats:
                m = stat_index(kind)
                tau = x[layout.tau_index(i, kind)]
                r[i, m] = (tau - ap.stats[kind].mu_bar @ xi) ** 2
    return R, r


def _best_cycles(x, layout, population, method, noise) -> list:
    """Exact xi minimiser per appliance with (S, H, tau) fixed."""
    w = method.melding_weight
    out = []
    for i, ap in enumerate(population):
        cost = -w * np.log(np.maximum(ap.cycle_prior, 1e-12))
        for kind in method.active_stats:
            m = stat_index(kind)
            tau = x[layout.tau_index(i, kind)]
            cost = cost + w * (tau - ap.stats[kind].mu_bar) ** 2 \
                / (2 * noise.sigma2_stat[i, m])
        out.append(np.eye(ap.C)[int(np.argmin(cost))])
    return out


def _dump(problem: QpProblem) -> str:
    fd, path = tempfile.mkstemp(prefix="lbmnilm-qp-", suffix=".txt")
    os.close(fd)
    dump_problem(problem, path)
    return path


def run_map(Y, hmms: Sequence[ApplianceHmm], population, method: MethodConfig,
            settings: SolverSettings | None = None, dt: float = 2.0,
            max_outer: int = 50, rel_tol: float = 1e-5,
            variance_floor: float = 1.0) -> InferenceResult:
    """Alternate noise updates and relaxed QP solves, then round.

    ``population`` is a :class:`~lbmnilm.stats.PopulationModel` keyed by
    appliance name or a list aligned with ``hmms``; it may be ``None`` for
    ``afhmm``.

    The relaxed states can reproduce Y exactly, so unconstrained joint MAP
    drives every variance towards ``b / (n/2 + a - 1)``. ``variance_floor``
    keeps each variance at or above that multiple of its data-scale start;
    0 disables the floor.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 1 or Y.size < 2:
        raise ValueError("Y must be a 1-D series with at least 2 samples")
    if not np.all(np.isfinite(Y)):
        raise ValueError("Y contains NaN or inf")
    if np.any(Y < 0):
        raise ValueError("Y must be non-negative")
    settings = settings or inference_settings()
    hmms = list(hmms)
    pops = _as_list(population, hmms)
    if method.active_stats and pops is None:
        raise ValueError(f"method {method.name} needs a population model")
    T, I = Y.size, len(hmms)
    layout = make_layout(method, hmms, pops, T)
    forms = forms_for(layout, hmms, dt)
    cons = build_constraints(layout, forms)
    x, _ = _initial_point(Y, hmms, layout, forms, pops, method)
    y = None
    noise = initial_noise(Y, pops, I)
    if variance_floor < 0:
        raise ValueError("variance_floor must be >= 0")
    floor = NoiseState(sigma2=variance_floor * noise.sigma2,
                       sigma2_stat=variance_floor * noise.sigma2_stat,
                       caps=noise.caps) if variance_floor > 0 else None
    block = method.variant == "lbm" and method.xi_mode == "block"
    xi_fixed = [layout.xi(x, i).copy() for i in range(I)] if block else None
    weight = method.melding_weight if method.variant == "lbm" else 1.0

    trace, exact_trace, diags = [], [], []
    kappa_floor = np.zeros((I, len(STAT_ORDER)))
    prev = None
    for outer in range(max_outer):
        obj = assemble_objective(method, Y, hmms, pops, noise, layout,
                                 xi_fixed=xi_fixed, kappa_floor=kappa_floor)
        if obj.kappa is not None:
            kappa_floor = np.maximum(kappa_floor, obj.kappa)
        lb, ub = cons.lb, cons.ub
        if block:
            lb, ub = lb.copy(), ub.copy()
            for i in range(I):
                lb[layout.block("xi", i)] = xi_fixed[i]
                ub[layout.block("xi", i)] = xi_fixed[i]
        problem = QpProblem(obj.Q, obj.c, cons.A_eq, cons.b_eq, cons.A_in,
                            cons.b_in, lb, ub)
        sol = solve_qp(problem, settings, x0=x, y0=y)
        if sol.status == INFEASIBLE:
            path = _dump(problem)
            raise InferenceError(f"QP reported infeasible; problem dumped to {path}")
        if sol.status != OPTIMAL:
            log.warning("outer %d: QP stopped with status %s (r_p=%.2e r_d=%.2e)",
                        outer, sol.status, sol.r_prim, sol.r_dual)
        # from the second pass the warm start is feasible; keep it when the
        # solver's stopping tolerance leaves a worse point, so every pass
        # descends
        if outer == 0 or obj.value(sol.x) <= obj.value(x):
            x, y = sol.x, sol.y
        if block:
            xi_fixed = _best_cycles(x, layout, pops, method, noise)
            for i in range(I):
                x[layout.block("xi", i)] = xi_fixed[i]
        R, r = _residuals(Y, x, layout, hmms, pops, method)
        noise = update_sigma(R, T, r, method.gamma_shape, method.gamma_rate,
                             noise.caps, prev=noise.sigma2_stat, weight=weight,
                             floor=floor)
        post = assemble_objective(method, Y, hmms, pops, noise, layout,
                                  xi_fixed=xi_fixed, kappa_floor=kappa_floor)
        value = post.value(x)
        trace.append(value)
        exact_trace.append(post.exact_value(x))
        diags.append({"outer": outer, "status": sol.status,
                      "iterations": sol.iterations, "polished": sol.polished,
                      "r_prim": sol.r_prim, "r_dual": sol.r_dual,
                      "psd_status": obj.psd_status,
                      "sigma2": noise.sigma2,
                      "shift": [float(s) for s in obj.shift],
                      "wall_time": sol.wall_time})
        if prev is not None and abs(prev - value) <= rel_tol * max(1.0, abs(prev)):
            break
        prev = value

    relaxed = layout.unpack(x)
    states, signals = [], []
    stats = np.zeros((I, 3))
    for i, h in enumerate(hmms):
        z = round_states(relaxed.S[i]).argmax(axis=1)
        states.append(z)
        signals.append(h.mu[z])
        stats[i] = path_statistics(z, h.mu, dt)
    xi_hat = [int(np.argmax(v)) for v in relaxed.xi]
    # U is re-solved for the rounded paths; the relaxed U fits fractional states
    U = optimal_u(Y - np.sum(signals, axis=0), noise.sigma2, method.u_prior_scale)
    return InferenceResult(
        signals=signals, U=U, states=states, xi=xi_hat, statistics=stats,
        noise=noise, objective_trace=trace, exact_trace=exact_trace,
        diagnostics=diags,
        config={"method": method.to_dict(), "dt": dt, "max_outer": max_outer,
                "rel_tol": rel_tol, "variance_floor": variance_floor,
                "solver": _settings_dict(settings)},
        relaxed=relaxed, names=[h.name for h in hmms])


def _settings_dict(s: SolverSettings) -> dict:
    from dataclasses import asdict
    return asdict(s)


def optimal_u(residual, sigma2: float, u_prior_scale: float) -> np.ndarray:
    """argmin_U>=0 of |r - U|^2/(2 sigma2) + sum|dU|/(2 v2)."""
    return tv_denoise_nonneg(residual, sigma2 / (2 * u_prior_scale))


def exhaustive_map(Y, hmms: Sequence[ApplianceHmm], population,
                   method: MethodConfig, noise: NoiseState,
                   dt: float = 2.0) -> tuple[RelaxedAssignment, float]:
    """Best discrete (paths, xi) by enumeration; U solved exactly per path.

    Returns the assignment and its (unrepaired) negative log-posterior.
    """
    Y = np.asarray(Y, dtype=float)
    hmms = list(hmms)
    pops = _as_list(population, hmms)
    T = Y.size
    layout = make_layout(method, hmms, pops, T)
    n_paths = math.prod(h.K for h in hmms) ** T
    if n_paths * max(1, sum(layout.C)) > MAX_ENUMERATION:
        raise ValueError(f"instance too large to enumerate ({n_paths} path tuples)")
    forms = forms_for(layout, hmms, dt)
    obj = assemble_objective(method, Y, hmms, pops, noise, layout, repair=False)
    base_xi = [np.eye(c)[0] for c in layout.C]
    best, best_val = None, np.inf
    per_app = [list(itertools.product(range(h.K), repeat=T)) for h in hmms]
    for combo in itertools.product(*per_app):
        paths = [np.array(z) for z in combo]
        resid = Y - sum(h.mu[z] for h, z in zip(hmms, paths))
        U = optimal_u(resid, noise.sigma2, method.u_prior_scale)
        a = RelaxedAssignment.from_paths(paths, hmms, U=U, xi=base_xi)
        x = layout.pack(a, forms)
        v0 = obj.exact_value(x)
        total, xi = v0, []
        # the objective is separable over appliances in xi
        for i, C in enumerate(layout.C):
            sl = layout.block("xi", i)
            gains = np.zeros(C)
            for c in range(1, C):
                x[sl] = np.eye(C)[c]
                gains[c] = obj.exact_value(x) - v0
            x[sl] = base_xi[i]
            c_best = int(np.argmin(gains))
            total += gains[c_best]
            xi.append(np.eye(C)[c_best])
        if total < best_val:
            best_val = total
            best = RelaxedAssignment.from_paths(paths, hmms, U=U, xi=xi)
    return best, float(best_val)
