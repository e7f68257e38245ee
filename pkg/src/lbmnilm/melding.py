"""Logarithmic pooling and the quadratic MAP objectives.

Three objectives are assembled over the flat layout of
:class:`~lbmnilm.layout.VariableLayout` (with Sigma fixed):

``afhmm``
    Gaussian likelihood of the mains, relaxed HMM log-prior and the
    piecewise (total variation) prior on the unknown component U.
``pr``
    ``afhmm`` plus moment-matching penalties ``lambda * (tau - mean)^2`` on
    the daily statistics.
``lbm``
    ``afhmm`` plus ``(1 - alpha)`` times the log ratio of the
    cycle-conditioned population model to the HMM-induced Gaussian, with
    the cycle-count indicator xi as a joint variable.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import integrate

from .hmm import PROB_FLOOR, ApplianceHmm, NoiseState, RelaxedAssignment, consistent_h
from .layout import VariableLayout, forms_for
from .stats import STAT_ORDER, AppliancePopulation, StatKind, StatPopulation, stat_index

log = logging.getLogger(__name__)

VARIANTS = ("afhmm", "pr", "lbm")
XI_MODES = ("joint", "block")
PSD_TOL = 1e-10
SHIFT_PAD = 1e-8


def log_pool(p_star, p, alpha: float) -> np.ndarray:
    """Normalised geometric pool ``p_star**alpha * p**(1 - alpha)``."""
    p_star = np.asarray(p_star, dtype=float)
    p = np.asarray(p, dtype=float)
    if p_star.shape != p.shape:
        raise ValueError("distributions must share the same support")
    if np.any(p_star <= 0) or np.any(p <= 0):
        raise ValueError("distributions must be strictly positive")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 1.0:
        return p_star / p_star.sum()
    if alpha == 0.0:
        return p / p.sum()
    logw = alpha * np.log(p_star) + (1.0 - alpha) * np.log(p)
    w = np.exp(logw - logw.max())
    return w / w.sum()


@dataclass(frozen=True)
class MethodConfig:
    """Which objective to build and its hyperparameters.

    ``lambdas`` maps statistic name to a PR weight; missing entries default
    to ``1 / (2 * population variance)`` per appliance.
    """

    variant: str = "afhmm"
    stats: tuple = tuple(k.value for k in STAT_ORDER)
    alpha: float = 0.5
    lambdas: dict | None = None
    u_prior_scale: float = 1e4
    gamma_shape: float = 1.0 + 1e-6
    gamma_rate: float = 1e-6
    xi_mode: str = "joint"
    label: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown method variant {self.variant!r}")
        if self.xi_mode not in XI_MODES:
            raise ValueError(f"unknown xi mode {self.xi_mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.u_prior_scale > 0:
            raise ValueError("u_prior_scale must be positive")
        if not (self.gamma_shape > 1 and self.gamma_rate > 0):
            raise ValueError("need gamma shape > 1 and rate > 0")
        for k, v in (self.lambdas or {}).items():
            StatKind(k)
            if v < 0:
                raise ValueError("PR weights must be non-negative")
        object.__setattr__(self, "stats", tuple(StatKind(s).value for s in self.stats))

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.variant == "lbm" and self.xi_mode == "block":
            return "lbm-block"
        return self.variant

    @property
    def active_stats(self) -> tuple:
        return () if self.variant == "afhmm" else tuple(StatKind(s) for s in self.stats)

    @property
    def melding_weight(self) -> float:
        return 1.0 - self.alpha if self.variant == "lbm" else 0.0

    def to_dict(self) -> dict:
        return {"variant": self.variant, "stats": list(self.stats),
                "alpha": self.alpha,
                "lambdas": None if self.lambdas is None else dict(self.lambdas),
                "u_prior_scale": self.u_prior_scale,
                "gamma_shape": self.gamma_shape, "gamma_rate": self.gamma_rate,
                "xi_mode": self.xi_mode, "label": self.label}

    @classmethod
    def from_dict(cls, d: dict) -> "MethodConfig":
        d = dict(d)
        if "stats" in d:
            d["stats"] = tuple(d["stats"])
        return cls(**d)


@dataclass
class QuadraticObjective:
    """``1/2 x'Qx + c'x + constant`` over a :class:`VariableLayout`.

    ``shift`` holds, per appliance, the magnitude of the most negative
    eigenvalue of the xi Schur complement before repair (zero when none
    was needed); ``kappa`` the envelope coefficients used per (appliance,
    statistic); ``base`` keeps the unrepaired objective.
    """

    Q: sp.csc_matrix
    c: np.ndarray
    constant: float
    layout: VariableLayout
    psd_status: str = "verified_psd"
    shift: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kappa: np.ndarray | None = None
    base: "QuadraticObjective | None" = None

    def value(self, x) -> float:
        return float(0.5 * x @ (self.Q @ x) + self.c @ x + self.constant)

    def exact_value(self, x) -> float:
        return (self.base or self).value(x)


def psd_repair(Q) -> tuple[np.ndarray, str, float]:
    """Shift a symmetric matrix by a multiple of I until it is PSD.

    Returns ``(Q', status, shift)`` with status ``"verified_psd"`` or
    ``"repaired"``.
    """
    Qd = Q.toarray() if sp.issparse(Q) else np.asarray(Q, dtype=float)
    if Qd.size == 0:
        return Qd, "verified_psd", 0.0
    lam = float(np.linalg.eigvalsh(0.5 * (Qd + Qd.T))[0])
    if lam >= -PSD_TOL:
        return Qd, "verified_psd", 0.0
    shift = abs(lam) + SHIFT_PAD
    log.debug("psd_repair: min eigenvalue %.3e, shift %.3e", lam, shift)
    return Qd + shift * np.eye(Qd.shape[0]), "repaired", shift


def _pr_lambda(method: MethodConfig, sp_: StatPopulation, kind: StatKind) -> float:
    lam = (method.lambdas or {}).get(kind.value)
    return 1.0 / (2.0 * sp_.pop_var) if lam is None else float(lam)


def assemble_objective(method: MethodConfig, Y, hmms: Sequence[ApplianceHmm],
                       population: Sequence[AppliancePopulation] | None,
                       noise: NoiseState, layout: VariableLayout,
                       xi_fixed: Sequence[np.ndarray] | None = None,
                       repair: bool = True,
                       kappa_floor: np.ndarray | None = None) -> QuadraticObjective:
    """Negative log-posterior (Sigma fixed) as a quadratic in the layout.

    Parameters
    ----------
    population : per-appliance population models aligned with ``hmms``;
        required for ``pr`` and ``lbm``.
    xi_fixed : for ``lbm``, fold the given cycle indicators into the linear
        and constant terms instead of leaving xi free.
    repair : for joint ``lbm``, replace the concave part of each (tau, xi)
        block by its convex envelope on the simplex, which leaves the value
        unchanged at one-hot xi (see :func:`_repair_melding`).
    kappa_floor : (I, 3) lower bounds on the envelope coefficients.
    """
    Y = np.asarray(Y, dtype=float)
    L = layout
    T, I = L.T, L.I
    if Y.shape != (T,):
        raise ValueError(f"Y has shape {Y.shape}, layout expects ({T},)")
    if len(hmms) != I:
        raise ValueError("hmms do not match the layout")
    stats = method.active_stats
    if stats and population is None:
        raise ValueError(f"method {method.name} needs population models")
    missing = [k for k in stats if k not in L.stats]
    if missing:
        raise ValueError(f"layout lacks tau variables for {missing}")
    a_, b_ = method.gamma_shape, method.gamma_rate
    n = L.n
    rows, cols, vals = [], [], []
    c = np.zeros(n)

    # likelihood: (1/2 s2) sum_t (Y_t - sum_i mu_i'S_it - U_t)^2
    s2 = noise.sigma2
    g_cols = [L.block("S", i).start + np.arange(T * hmms[i].K).reshape(T, hmms[i].K)
              for i in range(I)]
    g_cols.append(L.block("U").start + np.arange(T)[:, None])
    G_idx = np.concatenate(g_cols, axis=1)
    G_val = np.concatenate([np.broadcast_to(h.mu, (T, h.K)) for h in hmms]
                           + [np.ones((T, 1))], axis=1)
    m = G_idx.shape[1]
    rows.append(np.repeat(G_idx, m, axis=1).ravel())
    cols.append(np.tile(G_idx, (1, m)).ravel())
    vals.append((np.repeat(G_val, m, axis=1) * np.tile(G_val, (1, m))).ravel() / s2)
    np.add.at(c, G_idx.ravel(), -(G_val * Y[:, None]).ravel() / s2)
    const = float(Y @ Y) / (2 * s2)
    const += 0.5 * T * math.log(2 * math.pi * s2) \
        + (a_ - 1) * math.log(s2) + b_ / s2

    # HMM prior (linear) and the U prior
    for i, h in enumerate(hmms):
        c[L.block("S", i).start + np.arange(h.K)] -= h.log_pi
        c[L.block("H", i)] -= np.broadcast_to(h.log_trans, (T - 1, h.K, h.K)).ravel()
    v2 = method.u_prior_scale
    c[L.block("slack")] += 1.0 / (2 * v2)
    const += (T - 1) * math.log(v2)

    if method.variant == "pr":
        for i in range(I):
            for kind in stats:
                sp_ = population[i].stats[kind]
                lam = _pr_lambda(method, sp_, kind)
                j = L.tau_index(i, kind)
                rows.append([j]); cols.append([j]); vals.append([2 * lam])
                c[j] -= 2 * lam * sp_.pop_mean
                const += lam * sp_.pop_mean ** 2

    meld_blocks = []
    if method.variant == "lbm" and stats:
        w = method.melding_weight
        for i in range(I):
            ap = population[i]
            if not ap.has_induced():
                raise ValueError(f"appliance {i}: induced prior missing")
            xs = L.block("xi", i)
            xi_idx = np.arange(xs.start, xs.stop)
            if xs.stop - xs.start != ap.C:
                raise ValueError(f"appliance {i}: layout C != population C")
            logp = np.log(np.maximum(ap.cycle_prior, PROB_FLOOR))
            blk = {"tau": [], "xi": xi_idx, "i": i, "kappa": {}, "d": {}}
            for kind in stats:
                mstat = stat_index(kind)
                s2m = noise.sigma2_stat[i, mstat]
                mu_h, s2h = ap.mu_hat[mstat], ap.sigma2_hat[mstat]
                mbar = ap.stats[kind].mu_bar
                j = L.tau_index(i, kind)
                blk["tau"].append(j)
                blk["kappa"][mstat] = w / (2 * (s2h - s2m))
                blk["d"][mstat] = mbar
                const += (a_ - 1) * math.log(s2m) + b_ / s2m
                if w == 0.0:
                    continue
                const += 0.5 * w * (math.log(s2m) - math.log(s2h))
                # -(tau - mu_hat)^2 / (2 s2h)
                rows.append([j]); cols.append([j]); vals.append([-w / s2h])
                c[j] += w * mu_h / s2h
                const -= w * mu_h ** 2 / (2 * s2h)
                # (tau - mbar'xi)^2 / (2 s2m)
                rows.append([j]); cols.append([j]); vals.append([w / s2m])
                if xi_fixed is None:
                    rows.append(np.full(ap.C, j)); cols.append(xi_idx)
                    vals.append(-w * mbar / s2m)
                    rows.append(xi_idx); cols.append(np.full(ap.C, j))
                    vals.append(-w * mbar / s2m)
                    rows.append(np.repeat(xi_idx, ap.C))
                    cols.append(np.tile(xi_idx, ap.C))
                    vals.append(w * np.outer(mbar, mbar).ravel() / s2m)
                else:
                    target = float(mbar @ xi_fixed[i])
                    c[j] -= w * target / s2m
                    const += w * target ** 2 / (2 * s2m)
            if xi_fixed is None:
                c[xi_idx] -= w * logp
                if w > 0.0:
                    meld_blocks.append(blk)
            else:
                const -= w * float(xi_fixed[i] @ logp)

    Q = sp.csc_matrix((np.concatenate([np.asarray(v, float).ravel() for v in vals]),
                       (np.concatenate([np.asarray(r).ravel() for r in rows]),
                        np.concatenate([np.asarray(k).ravel() for k in cols]))),
                      shape=(n, n))
    Q.sum_duplicates()
    obj = QuadraticObjective(Q=Q, c=c, constant=const, layout=L,
                             shift=np.zeros(I))
    if meld_blocks:
        obj = _repair_melding(obj, meld_blocks, repair, kappa_floor)
    return obj


def _repair_melding(obj: QuadraticObjective, blocks, repair: bool,
                    kappa_floor) -> QuadraticObjective:
    """Convexify the joint (tau, xi) blocks with the tightest vertex-exact
    lower bound.

    Minimising one statistic's melding term over tau leaves
    ``-kappa * (mu_bar'xi - mu_hat)^2`` with ``kappa = w / (2 (s2_hat - s2))``,
    whose concave part is ``-kappa * (mu_bar'xi)^2``. On the simplex its
    convex envelope is the linear ``-kappa * sum_c xi_c mu_bar_c^2``, so the
    repair adds ``kappa * ((mu_bar'xi)^2 - sum_c xi_c mu_bar_c^2)``: zero at
    one-hot xi, non-positive on the simplex, and cancels the negative
    curvature exactly. Any larger
    kappa is also valid, which ``kappa_floor`` uses to keep the repaired
    surrogate monotone across noise updates.
    """
    Q = obj.Q.tocsr()
    I = obj.layout.I
    kappas = np.zeros((I, len(STAT_ORDER)))
    shifts = np.zeros(I)
    for blk in blocks:
        i = blk["i"]
        t = np.array(blk["tau"])
        xi = blk["xi"]
        Qtt = Q[t][:, t].toarray()
        if np.any(np.linalg.eigvalsh(Qtt) <= 0):
            raise ValueError("tau curvature must be positive; check sigma2 < caps")
        schur = Q[xi][:, xi].toarray() - Q[t][:, xi].toarray().T @ np.linalg.solve(
            Qtt, Q[t][:, xi].toarray())
        _, status, shift = psd_repair(schur)
        if status == "verified_psd":
            continue
        shifts[i] = shift
        for m, kappa in blk["kappa"].items():
            floor = 0.0 if kappa_floor is None else float(kappa_floor[i, m])
            kappas[i, m] = max(kappa, floor)
    if not np.any(shifts > 0):
        return replace(obj, psd_status="verified_psd")
    if not repair:
        return replace(obj, psd_status="indefinite_rejected", shift=shifts)
    rows, cols, vals = [], [], []
    c = obj.c.copy()
    for blk in blocks:
        i, xi = blk["i"], blk["xi"]
        for m, d in blk["d"].items():
            k = kappas[i, m]
            if k == 0.0:
                continue
            rows.append(np.repeat(xi, xi.size))
            cols.append(np.tile(xi, xi.size))
            vals.append(2 * k * np.outer(d, d).ravel())
            c[xi] -= k * d ** 2
    n = obj.layout.n
    add = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows),
                                                np.concatenate(cols))), shape=(n, n))
    return QuadraticObjective(Q=(obj.Q + add).tocsc(), c=c, constant=obj.constant,
                              layout=obj.layout, psd_status="repaired",
                              shift=shifts, kappa=kappas, base=obj)


# -- consistency checks -------------------------------------------------------

def _random_relaxed_point(layout: VariableLayout, forms, rng, u_scale=50.0):
    S, H = [], []
    for K in layout.K:
        s = rng.dirichlet(np.ones(K), size=layout.T)
        S.append(s)
        H.append(consistent_h(s))
    xi = [rng.dirichlet(np.ones(C)) for C in layout.C]
    a = RelaxedAssignment(S=S, H=H, U=rng.uniform(0, u_scale, layout.T), xi=xi)
    return layout.pack(a, forms)


def pr_bm_equivalence_check(Y, hmms: Sequence[ApplianceHmm], mu0, sigma2,
                            sigma2_hat, alpha: float, dt: float = 2.0,
                            stats=("total_energy",), n_points: int = 100,
                            rng: np.random.Generator | None = None,
                            sigma2_obs: float = 10.0,
                            lam=None) -> float:
    """Max deviation of (PR - BM) from a constant over random feasible points.

    BM uses Gaussian population and induced densities with the common mean
    ``mu0[i, m]`` (one cycle component, so xi is fixed); PR uses
    ``m(f) = (f - mu0)^2`` with weight ``(1 - alpha)(1/(2 s2) - 1/(2 s2_hat))``
    unless ``lam`` is given.
    """
    rng = rng or np.random.default_rng(0)
    I = len(hmms)
    stats = tuple(StatKind(s) for s in stats)
    mu0 = np.broadcast_to(np.asarray(mu0, float), (I, len(stats)))
    s2 = np.broadcast_to(np.asarray(sigma2, float), (I, len(stats)))
    s2h = np.broadcast_to(np.asarray(sigma2_hat, float), (I, len(stats)))
    layout = VariableLayout(K=[h.K for h in hmms], T=len(Y), C=[1] * I, stats=stats)
    pops, noise_s2, caps = [], np.ones((I, 3)), np.full((I, 3), np.inf)
    lam_pr = np.zeros((I, len(stats)))
    for i in range(I):
        st, mu_hat, s2_hat = {}, np.full(3, np.nan), np.full(3, np.nan)
        for m, kind in enumerate(STAT_ORDER):
            if kind in stats:
                q = stats.index(kind)
                st[kind] = StatPopulation(mu_bar=np.array([mu0[i, q]]),
                                          sigma2=s2[i, q], sigma2_c=np.array([s2[i, q]]),
                                          pop_mean=mu0[i, q], pop_var=1.0)
                mu_hat[m], s2_hat[m] = mu0[i, q], s2h[i, q]
                noise_s2[i, m], caps[i, m] = s2[i, q], s2h[i, q]
                lam_pr[i, q] = (1 - alpha) * (0.5 / s2[i, q] - 0.5 / s2h[i, q]) \
                    if lam is None else lam
            else:
                st[kind] = StatPopulation(np.zeros(1), 1.0, np.ones(1), 0.0, 1.0)
                mu_hat[m], s2_hat[m] = 0.0, 2.0
                noise_s2[i, m], caps[i, m] = 1.0, 2.0
        pops.append(AppliancePopulation(C=1, cycle_prior=np.ones(1), stats=st,
                                        mu_hat=mu_hat, sigma2_hat=s2_hat))
    noise = NoiseState(sigma2=sigma2_obs, sigma2_stat=noise_s2, caps=caps)
    bm = assemble_objective(MethodConfig("lbm", stats=stats, alpha=alpha), Y, hmms,
                            pops, noise, layout)
    # PR weights may differ per appliance, so add them by hand on the tau diagonal
    pr = assemble_objective(MethodConfig("afhmm"), Y, hmms, None, noise, layout)
    Qd = np.zeros(layout.n)
    cpr = pr.c.copy()
    const = pr.constant
    for i in range(I):
        for q, kind in enumerate(stats):
            j = layout.tau_index(i, kind)
            Qd[j] += 2 * lam_pr[i, q]
            cpr[j] -= 2 * lam_pr[i, q] * mu0[i, q]
            const += lam_pr[i, q] * mu0[i, q] ** 2
    pr = QuadraticObjective(Q=(pr.Q + sp.diags(Qd)).tocsc(), c=cpr, constant=const,
                            layout=layout)
    forms = forms_for(layout, hmms, dt)
    diffs = []
    for _ in range(n_points):
        x = _random_relaxed_point(layout, forms, rng)
        diffs.append(pr.value(x) - bm.exact_value(x))
    diffs = np.array(diffs)
    return float(np.max(np.abs(diffs - diffs[0])))


def melding_normalization_check(p_S, f_index, p_tau_given_xi, p_xi, p_star,
                                alpha: float) -> tuple[float, float, float]:
    """Exhaustive normaliser of the joint melded prior on a discrete toy.

    Parameters
    ----------
    p_S : (nS,) prior over the input states.
    f_index : (nS,) int, index of f(S) in the output support.
    p_tau_given_xi : (nXi, nTau) conditional output distributions.
    p_xi : (nXi,) latent distribution.
    p_star : (nTau,) induced output distribution (any positive vector).

    The latent is integrated against the uniform probability measure on
    its support, with ``p_xi`` entering as a density relative to it (i.e.
    ``nXi * p_xi``); this is the discrete counterpart of a unit-volume
    latent space.

    Returns
    -------
    (Z, c_alpha, bound) with ``bound = E_pS[p_tau(f)/p_star(f)]**(1-alpha)``.
    """
    p_S = np.asarray(p_S, float)
    f_index = np.asarray(f_index, int)
    ptx = np.asarray(p_tau_given_xi, float)
    p_xi = np.asarray(p_xi, float)
    p_star = np.asarray(p_star, float)
    if min(p_S.min(), ptx.min(), p_xi.min(), p_star.min()) <= 0:
        raise ValueError("all distributions must be strictly positive")
    nxi = p_xi.size
    dens_xi = nxi * p_xi
    Z = 0.0
    for s, ps in enumerate(p_S):
        k = f_index[s]
        ratio = ptx[:, k] * dens_xi / p_star[k]
        Z += ps * float(np.mean(ratio ** (1.0 - alpha)))
    p_tau = p_xi @ ptx
    bound = float(p_S @ (p_tau[f_index] / p_star[f_index])) ** (1.0 - alpha)
    return Z, 1.0 / Z, bound


def melding_limit_check(f_value: float, p_tau: Callable, p_star: Callable,
                        deltas: Sequence[float],
                        p_star_cdf: Callable | None = None) -> np.ndarray:
    """Average of g_delta over the window [f - delta, f + delta].

    ``g_delta = p_tau / p_delta`` where ``p_delta`` is the induced density
    smoothed by the same uniform window (needs ``p_star_cdf``). Without a
    CDF the unsmoothed ratio ``p_tau / p_star`` is averaged.
    """
    out = []
    for d in deltas:
        if p_star_cdf is not None:
            def g(t, d=d):
                pd = (p_star_cdf(t + d) - p_star_cdf(t - d)) / (2 * d)
                return p_tau(t) / pd
        else:
            def g(t):
                return p_tau(t) / p_star(t)
        val, _ = integrate.quad(g, f_value - d, f_value + d,
                                epsabs=1e-14, epsrel=1e-13, limit=200)
        out.append(val / (2 * d))
    return np.array(out)
