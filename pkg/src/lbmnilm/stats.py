"""Daily summary statistics as affine functions of (S, H), and their
population models."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .hmm import ApplianceHmm, assign_states, sample_paths

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
DEFAULT_MAX_CYCLES = 20


class StatKind(str, enum.Enum):
    TOTAL_ENERGY = "total_energy"
    DURATION = "duration"
    CYCLE_COUNT = "cycle_count"


STAT_ORDER = (StatKind.TOTAL_ENERGY, StatKind.DURATION, StatKind.CYCLE_COUNT)


def stat_index(kind) -> int:
    return STAT_ORDER.index(StatKind(kind))


def floor_var(v: float, mean: float) -> float:
    return float(max(v, VAR_FLOOR, VAR_FLOOR * mean * mean))


@dataclass(frozen=True)
class StatisticLinearForm:
    """tau = <s_coef, S> + <h_coef, H> + offset for one appliance."""

    kind: StatKind
    s_coef: np.ndarray  # (T, K)
    h_coef: np.ndarray  # (T-1, K, K)
    offset: float = 0.0

    @property
    def T(self) -> int:
        return self.s_coef.shape[0]


def statistic_form(kind, hmm: ApplianceHmm, T: int,
                   dt: float = 2.0) -> StatisticLinearForm:
    """Linear form of a daily statistic over one appliance's (S, H).

    Duration is measured in the units of ``dt`` (minutes per sample). The
    cycle count is the number of OFF -> ON transitions, read from H.
    """
    try:
        kind = StatKind(kind)
    except ValueError:
        raise ValueError(f"unknown statistic {kind!r}") from None
    K = hmm.K
    s = np.zeros((T, K))
    h = np.zeros((max(T - 1, 0), K, K))
    if kind is StatKind.TOTAL_ENERGY:
        s[:] = hmm.mu
    elif kind is StatKind.DURATION:
        if not dt > 0:
            raise ValueError("dt must be positive")
        s[:, 1:] = dt
    else:
        if T < 2:
            raise ValueError("cycle count needs T >= 2")
        h[:, 1:, 0] = 1.0
    return StatisticLinearForm(kind=kind, s_coef=s, h_coef=h)


def eval_statistic(form: StatisticLinearForm, S: np.ndarray,
                   H: np.ndarray) -> float:
    if S.shape != form.s_coef.shape or H.shape != form.h_coef.shape:
        raise ValueError(
            f"assignment shapes S{S.shape}, H{H.shape} do not match form "
            f"S{form.s_coef.shape}, H{form.h_coef.shape}")
    return float(np.vdot(form.s_coef, S) + np.vdot(form.h_coef, H)
                 + form.offset)


def path_statistics(z: np.ndarray, mu: np.ndarray, dt: float) -> np.ndarray:
    """(total energy, duration, cycle count) of discrete paths.

    ``z`` may be a single path (T,) or a batch (n, T).
    """
    z = np.atleast_2d(z)
    on = z > 0
    energy = np.asarray(mu)[z].sum(axis=1)
    duration = dt * on.sum(axis=1)
    cycles = (on[:, 1:] & ~on[:, :-1]).sum(axis=1)
    out = np.stack([energy, duration, cycles.astype(float)], axis=1)
    return out[0] if out.shape[0] == 1 else out


def trace_statistics(x: np.ndarray, z: np.ndarray, dt: float) -> np.ndarray:
    """Statistics of a metered day given its states; energy is summed from
    the readings themselves."""
    x = np.asarray(x, dtype=float)
    on = np.asarray(z) > 0
    cycles = float((on[1:] & ~on[:-1]).sum())
    return np.array([x.sum(), dt * on.sum(), cycles])


@dataclass
class StatPopulation:
    """Cycle-conditioned regression model for one statistic."""

    mu_bar: np.ndarray  # (C,) mean of the statistic given c cycles
    sigma2: float  # pooled within-group variance
    sigma2_c: np.ndarray  # (C,) per-group variance, for the mixture density
    pop_mean: float
    pop_var: float

    def to_dict(self) -> dict:
        return {"mu_bar": self.mu_bar.tolist(), "sigma2": self.sigma2,
                "sigma2_c": self.sigma2_c.tolist(), "pop_mean": self.pop_mean,
                "pop_var": self.pop_var}

    @classmethod
    def from_dict(cls, d: dict) -> "StatPopulation":
        return cls(mu_bar=np.asarray(d["mu_bar"], float), sigma2=float(d["sigma2"]),
                   sigma2_c=np.asarray(d["sigma2_c"], float),
                   pop_mean=float(d["pop_mean"]), pop_var=float(d["pop_var"]))


@dataclass
class AppliancePopulation:
    C: int
    cycle_prior: np.ndarray
    stats: dict  # StatKind -> StatPopulation
    mu_hat: np.ndarray = field(default_factory=lambda: np.full(3, np.nan))
    sigma2_hat: np.ndarray = field(default_factory=lambda: np.full(3, np.nan))

    @property
    def cycle_levels(self) -> np.ndarray:
        return np.arange(self.C, dtype=float)

    def has_induced(self) -> bool:
        return bool(np.all(np.isfinite(self.mu_hat))
                    and np.all(np.isfinite(self.sigma2_hat)))

    def to_dict(self) -> dict:
        return {
            "C": self.C,
            "cycle_prior": self.cycle_prior.tolist(),
            "stats": {k.value: self.stats[k].to_dict() for k in STAT_ORDER},
            "induced": {"mu_hat": [None if not np.isfinite(v) else float(v)
                                   for v in self.mu_hat],
                        "sigma2_hat": [None if not np.isfinite(v) else float(v)
                                       for v in self.sigma2_hat]},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AppliancePopulation":
        ind = d.get("induced") or {}
        def arr(key):
            vals = ind.get(key) or [None] * 3
            return np.array([np.nan if v is None else v for v in vals], float)
        return cls(C=int(d["C"]), cycle_prior=np.asarray(d["cycle_prior"], float),
                   stats={StatKind(k): StatPopulation.from_dict(v)
                          for k, v in d["stats"].items()},
                   mu_hat=arr("mu_hat"), sigma2_hat=arr("sigma2_hat"))


@dataclass
class PopulationModel:
    """Population models keyed by appliance name."""

    appliances: dict
    dt: float = 2.0

    def __getitem__(self, name) -> AppliancePopulation:
        return self.appliances[name]

    def to_dict(self) -> dict:
        return {"dt": self.dt,
                "appliances": {k: v.to_dict() for k, v in self.appliances.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "PopulationModel":
        return cls(appliances={k: AppliancePopulation.from_dict(v)
                               for k, v in d["appliances"].items()},
                   dt=float(d.get("dt", 2.0)))


def fit_population(traces: Mapping[str, Sequence[np.ndarray]],
                   hmms: Mapping[str, ApplianceHmm], dt: float = 2.0,
                   max_cycles: int = DEFAULT_MAX_CYCLES) -> PopulationModel:
    """Fit cycle priors and cycle-conditioned statistic means.

    Parameters
    ----------
    traces : mapping of appliance name -> list of day-long traces (Wh).
    hmms : fitted HMM per appliance; a sample counts as ON when its
        nearest-mean state is not OFF.
    dt : minutes per sample.
    max_cycles : days with more cycles are clamped to this count.
    """
    if not traces:
        raise ValueError("no traces given")
    out = {}
    for name, days in traces.items():
        if len(days) == 0:
            raise ValueError(f"{name}: no day traces")
        hmm = hmms[name]
        rows = []
        for x in days:
            x = np.asarray(x, dtype=float)
            if np.any(x < 0):
                raise ValueError(f"{name}: negative readings")
            rows.append(trace_statistics(x, assign_states(x, hmm), dt))
        v = np.array(rows)
        cyc = v[:, 2].astype(int)
        if cyc.max() > max_cycles:
            log.warning("%s: %d day(s) exceed %d cycles; clamped", name,
                        int((cyc > max_cycles).sum()), max_cycles)
            cyc = np.minimum(cyc, max_cycles)
            v[:, 2] = cyc
        C = int(cyc.max()) + 1
        counts = np.bincount(cyc, minlength=C).astype(float)
        prior = (counts + 1.0) / (counts.sum() + C)
        stats = {}
        for m, kind in enumerate(STAT_ORDER):
            vals = v[:, m]
            gmean = float(vals.mean())
            mu_bar = np.full(C, gmean)
            s2c = np.empty(C)
            resid = np.empty_like(vals)
            for c in range(C):
                sel = cyc == c
                if kind is StatKind.CYCLE_COUNT:
                    mu_bar[c] = float(c)
                elif sel.any():
                    mu_bar[c] = vals[sel].mean()
                resid[sel] = vals[sel] - mu_bar[c]
            pooled = floor_var(float(np.mean(resid ** 2)), gmean)
            for c in range(C):
                sel = cyc == c
                s2c[c] = floor_var(float(np.mean(resid[sel] ** 2)), mu_bar[c]) \
                    if sel.sum() > 1 else pooled
            pop_var = floor_var(float(vals.var(ddof=1)) if vals.size > 1 else 0.0,
                                gmean)
            stats[kind] = StatPopulation(mu_bar=mu_bar, sigma2=pooled,
                                         sigma2_c=s2c, pop_mean=gmean,
                                         pop_var=pop_var)
        out[name] = AppliancePopulation(C=C, cycle_prior=prior, stats=stats)
    return PopulationModel(appliances=out, dt=dt)


def estimate_induced_prior(hmm: ApplianceHmm, kind, T: int, N: int,
                           rng: np.random.Generator,
                           dt: float = 2.0) -> tuple[float, float]:
    """Gaussian fit (mean, variance) of a statistic under the HMM prior."""
    if N < 2:
        raise ValueError("need N >= 2 samples")
    z = sample_paths(hmm, T, N, rng)
    vals = np.atleast_2d(path_statistics(z, hmm.mu, dt))[:, stat_index(kind)]
    mean = float(vals.mean())
    return mean, floor_var(float(vals.var(ddof=1)), mean)


def attach_induced_priors(pop: PopulationModel, hmms: Mapping[str, ApplianceHmm],
                          T: int, N: int, seed: int) -> PopulationModel:
    """Fill in the induced priors of every appliance and statistic.

    Each appliance draws from its own child stream (appliances taken in
    sorted name order), so the result does not depend on dict order.
    """
    names = sorted(pop.appliances)
    children = np.random.SeedSequence(seed).spawn(len(names))
    for name, ss in zip(names, children):
        ap = pop.appliances[name]
        z = sample_paths(hmms[name], T, N, np.random.default_rng(ss))
        vals = np.atleast_2d(path_statistics(z, hmms[name].mu, pop.dt))
        ap.mu_hat = vals.mean(axis=0)
        ap.sigma2_hat = np.array([floor_var(float(vals[:, m].var(ddof=1)),
                                            float(ap.mu_hat[m]))
                                  for m in range(3)])
    return pop


def mixture_density(tau, ap: AppliancePopulation, kind) -> np.ndarray:
    """Cycle-mixture density of a statistic (diagnostic only)."""
    sp = ap.stats[StatKind(kind)]
    tau = np.asarray(tau, dtype=float)[..., None]
    comp = np.exp(-0.5 * (tau - sp.mu_bar) ** 2 / sp.sigma2_c) \
        / np.sqrt(2 * np.pi * sp.sigma2_c)
    return (comp * ap.cycle_prior).sum(axis=-1)
