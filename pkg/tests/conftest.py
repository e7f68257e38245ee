"""Shared builders for small models and instances."""

from __future__ import annotations

import numpy as np
import pytest

from lbmnilm.hmm import ApplianceHmm
from lbmnilm.stats import (STAT_ORDER, AppliancePopulation, StatKind, StatPopulation,
                           floor_var)


def two_state(p_on=0.3, p_off=0.4, mu=10.0, name="a", pi=(0.5, 0.5)) -> ApplianceHmm:
    """Two-state chain; ``p_on`` = P(ON | OFF), ``p_off`` = P(OFF | ON)."""
    trans = np.array([[1 - p_on, p_off], [p_on, 1 - p_off]])
    return ApplianceHmm(pi=pi, trans=trans, mu=[0.0, mu], name=name)


def random_hmm(rng, K=2, name="a", mu_scale=20.0) -> ApplianceHmm:
    trans = rng.dirichlet(np.ones(K), size=K).T
    mu = np.concatenate([[0.0], np.sort(rng.uniform(1, mu_scale, K - 1))])
    mu[1:] += np.arange(1, K) * 1e-3  # strictly increasing
    return ApplianceHmm(pi=rng.dirichlet(np.ones(K)), trans=trans, mu=mu, name=name)


def random_population(rng, hmm: ApplianceHmm, T: int, C: int = 3,
                      dt: float = 2.0, var_scale: float = 1.0) -> AppliancePopulation:
    """A population model with plausible magnitudes and induced priors set."""
    scale = np.array([hmm.mu.max() * T / 2, dt * T / 2, 1.0])
    stats = {}
    for m, kind in enumerate(STAT_ORDER):
        if kind is StatKind.CYCLE_COUNT:
            mu_bar = np.arange(C, dtype=float)
        else:
            mu_bar = np.sort(rng.uniform(0, 1, C)) * scale[m]
        s2 = floor_var(var_scale * rng.uniform(0.5, 2.0) * (0.1 * scale[m]) ** 2,
                       float(mu_bar.mean()))
        stats[kind] = StatPopulation(mu_bar=mu_bar, sigma2=s2, sigma2_c=np.full(C, s2),
                                     pop_mean=float(mu_bar.mean()),
                                     pop_var=float(mu_bar.var() + s2))
    mu_hat = np.array([stats[k].pop_mean for k in STAT_ORDER]) * rng.uniform(0.8, 1.2, 3)
    sigma2_hat = np.array([4 * stats[k].sigma2 + 1.0 for k in STAT_ORDER])
    return AppliancePopulation(C=C, cycle_prior=rng.dirichlet(np.ones(C)), stats=stats,
                               mu_hat=mu_hat, sigma2_hat=sigma2_hat)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line ``criterion N: PASS|FAIL detail`` and
    assert it; the lines are repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_CRITERIA, {})

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
