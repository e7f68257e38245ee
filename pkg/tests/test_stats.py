import math

import numpy as np
import pytest
from scipy.integrate import trapezoid
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_hmm, two_state
from lbmnilm.hmm import ApplianceHmm, onehot, sample_paths
from lbmnilm.stats import (STAT_ORDER, AppliancePopulation, PopulationModel, StatKind,
                           StatPopulation, attach_induced_priors, estimate_induced_prior,
                           eval_statistic, fit_population, mixture_density,
                           path_statistics, statistic_form)


def walk_statistics(z, mu, dt):
    """Path-walking oracle: one pass, counting as a person would."""
    energy = duration = cycles = 0.0
    prev_on = None
    for state in z:
        energy += mu[state]
        on = bool(state != 0)
        duration += dt if on else 0.0
        if prev_on is False and on:
            cycles += 1
        prev_on = on
    return energy, duration, cycles


def hmm_with_mu(mu):
    K = len(mu)
    return ApplianceHmm(pi=np.full(K, 1 / K), trans=np.full((K, K), 1 / K), mu=mu)


def eval_path(kind, hmm, z, dt=2.0):
    S, H = onehot(np.asarray(z), hmm.K)
    return eval_statistic(statistic_form(kind, hmm, len(z), dt), S, H)


class TestStatisticForms:
    def test_total_energy_example(self):
        h = hmm_with_mu([0, 100, 200])
        assert eval_path("total_energy", h, [0, 1, 2, 1]) == pytest.approx(400.0)

    def test_duration_example(self):
        h = hmm_with_mu([0, 5])
        assert eval_path("duration", h, [0, 1, 1, 0], dt=2.0) == pytest.approx(4.0)

    def test_cycle_count_example(self):
        h = hmm_with_mu([0, 5])
        assert eval_path("cycle_count", h, [0, 1, 0, 1]) == pytest.approx(2.0)

    def test_zero_assignment(self):
        h = hmm_with_mu([0, 5, 9])
        f = statistic_form("total_energy", h, 4)
        assert eval_statistic(f, np.zeros((4, 3)), np.zeros((3, 3, 3))) == 0.0

    def test_structural_errors(self):
        h = hmm_with_mu([0, 5])
        with pytest.raises(ValueError):
            statistic_form("volume", h, 4)
        with pytest.raises(ValueError):
            statistic_form("cycle_count", h, 1)
        f = statistic_form("duration", h, 4)
        with pytest.raises(ValueError):
            eval_statistic(f, np.zeros((3, 2)), np.zeros((2, 2, 2)))

    def test_forms_touch_only_their_block(self):
        h = hmm_with_mu([0, 5, 9])
        for kind in STAT_ORDER:
            f = statistic_form(kind, h, 6)
            if kind is StatKind.CYCLE_COUNT:
                assert not f.s_coef.any() and f.h_coef.any()
            else:
                assert f.s_coef.any() and not f.h_coef.any()

    def test_matches_path_walking_oracle_on_random_paths(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            K = int(rng.integers(2, 5))
            T = int(rng.integers(2, 51))
            h = random_hmm(rng, K)
            z = rng.integers(0, K, T)
            oracle = walk_statistics(z, h.mu, 2.0)
            for m, kind in enumerate(STAT_ORDER):
                assert eval_path(kind, h, z) == pytest.approx(oracle[m], abs=1e-9)
            assert np.allclose(path_statistics(z, h.mu, 2.0), oracle)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), a=st.floats(0, 1), T=st.integers(2, 20))
    def test_affine_on_convex_mixtures(self, seed, a, T):
        rng = np.random.default_rng(seed)
        h = random_hmm(rng, 3)
        z1, z2 = rng.integers(0, 3, T), rng.integers(0, 3, T)
        (S1, H1), (S2, H2) = onehot(z1, 3), onehot(z2, 3)
        for kind in STAT_ORDER:
            f = statistic_form(kind, h, T)
            mix = eval_statistic(f, a * S1 + (1 - a) * S2, a * H1 + (1 - a) * H2)
            sep = a * eval_statistic(f, S1, H1) + (1 - a) * eval_statistic(f, S2, H2)
            assert mix == pytest.approx(sep, abs=1e-9)


class TestFitPopulation:
    def test_identical_days(self):
        h = hmm_with_mu([0, 50])
        day = np.zeros(30)
        day[5:15] = 50.0  # one cycle, 500 Wh
        pop = fit_population({"a": [day] * 10}, {"a": h})
        ap = pop["a"]
        assert ap.C == 2 and ap.cycle_prior.argmax() == 1
        assert ap.cycle_prior.tolist() == pytest.approx([1 / 12, 11 / 12])
        assert ap.stats[StatKind.TOTAL_ENERGY].mu_bar[1] == pytest.approx(500.0)

    def test_alternating_days(self):
        h = hmm_with_mu([0, 40])
        d1 = np.zeros(40)
        d1[2:12] = 40.0
        d2 = np.zeros(40)
        d2[2:12] = 40.0
        d2[20:30] = 40.0
        pop = fit_population({"a": [d1, d2] * 50}, {"a": h})
        ap = pop["a"]
        assert ap.cycle_prior[1] == pytest.approx(ap.cycle_prior[2])
        assert ap.cycle_prior[1] == pytest.approx(0.5, abs=0.01)
        mb = ap.stats[StatKind.TOTAL_ENERGY].mu_bar
        assert mb[1] == pytest.approx(400.0) and mb[2] == pytest.approx(800.0)
        assert mb[0] == pytest.approx(600.0)  # unseen count falls back to the global mean

    def test_cycle_prior_matches_simulation(self):
        gen = two_state(p_on=0.05, p_off=0.2, mu=10.0, pi=(0.8, 0.2))
        T, D, N = 60, 4000, 100_000
        z = sample_paths(gen, T, D, np.random.default_rng(5))
        pop = fit_population({"a": list(gen.mu[z])}, {"a": gen})
        ap = pop["a"]
        sim = path_statistics(sample_paths(gen, T, N, np.random.default_rng(6)),
                              gen.mu, 2.0)[:, 2].astype(int)
        freq = np.bincount(sim, minlength=ap.C)[:ap.C] / N
        for c in range(ap.C):
            p = max(freq[c], 1.0 / N)
            se = math.sqrt(p * (1 - p) * (1 / D + 1 / N))
            smoothing = (1 + ap.C * ap.cycle_prior[c]) / (D + ap.C)
            assert abs(ap.cycle_prior[c] - freq[c]) <= 3 * se + smoothing

    def test_clamps_cycle_count(self):
        h = hmm_with_mu([0, 1])
        day = np.tile([0.0, 1.0], 30)  # 29 or 30 cycles
        pop = fit_population({"a": [day]}, {"a": h}, max_cycles=20)
        assert pop["a"].C == 21

    def test_empty_input(self):
        with pytest.raises(ValueError):
            fit_population({}, {})

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), days=st.integers(1, 6))
    def test_always_valid(self, seed, days):
        rng = np.random.default_rng(seed)
        h = random_hmm(rng, 3)
        traces = [h.mu[rng.integers(0, 3, 30)] for _ in range(days)]
        ap = fit_population({"a": traces}, {"a": h})["a"]
        assert np.all(ap.cycle_prior >= 0) and ap.cycle_prior.sum() == pytest.approx(1.0)
        for kind in STAT_ORDER:
            sp = ap.stats[kind]
            assert sp.sigma2 > 0 and sp.pop_var > 0 and np.all(np.isfinite(sp.mu_bar))

    def test_json_round_trip(self, rng):
        h = random_hmm(rng, 3)
        pop = fit_population({"a": [h.mu[rng.integers(0, 3, 30)] for _ in range(5)]}, {"a": h})
        attach_induced_priors(pop, {"a": h}, 30, 50, seed=1)
        d = pop.to_dict()
        assert set(d["appliances"]["a"]) == {"C", "cycle_prior", "stats", "induced"}
        again = PopulationModel.from_dict(d).to_dict()
        assert again == d


class TestInducedPrior:
    def iid_chain(self):
        return ApplianceHmm(pi=[0.5, 0.5], trans=np.full((2, 2), 0.5), mu=[0, 10])

    def test_degenerate_off_chain(self, rng):
        h = ApplianceHmm(pi=[1, 0], trans=np.eye(2), mu=[0, 5])
        mean, var = estimate_induced_prior(h, "total_energy", 20, 100, rng)
        assert mean == 0.0 and var == 1e-6

    def test_iid_total_energy(self):
        N, T = 10_000, 100
        mean, var = estimate_induced_prior(self.iid_chain(), "total_energy", T, N,
                                           np.random.default_rng(11))
        # binomial(100, 1/2) scaled by 10: mean 500, variance 2500
        assert abs(mean - 500.0) <= 3 * math.sqrt(2500 / N)
        assert abs(var - 2500.0) <= 3 * 2500 * math.sqrt(2 / (N - 1))

    def test_iid_cycle_count(self):
        N, T = 10_000, 100
        h = self.iid_chain()
        mean, var = estimate_induced_prior(h, "cycle_count", T, N, np.random.default_rng(12))
        expected = (T - 1) * 0.5 * 0.5
        assert abs(mean - expected) <= 3 * math.sqrt(var / N)

    def test_bit_exact_under_seed(self):
        h = self.iid_chain()
        a = estimate_induced_prior(h, "duration", 50, 500, np.random.default_rng(3))
        b = estimate_induced_prior(h, "duration", 50, 500, np.random.default_rng(3))
        assert a == b

    def test_attach_is_order_independent(self, rng):
        hs = {"a": random_hmm(rng, 2, "a"), "b": random_hmm(rng, 3, "b")}
        traces = {k: [h.mu[rng.integers(0, h.K, 20)] for _ in range(4)] for k, h in hs.items()}
        p1 = attach_induced_priors(fit_population(traces, hs), hs, 20, 100, seed=4)
        rev = {k: traces[k] for k in reversed(list(traces))}
        p2 = attach_induced_priors(fit_population(rev, hs), hs, 20, 100, seed=4)
        for k in hs:
            assert np.array_equal(p1[k].mu_hat, p2[k].mu_hat)


class TestMixtureDensity:
    def population(self, mu_bar, s2, prior):
        sp = StatPopulation(mu_bar=np.array(mu_bar, float), sigma2=1.0,
                            sigma2_c=np.array(s2, float), pop_mean=0.0, pop_var=1.0)
        return AppliancePopulation(C=len(mu_bar), cycle_prior=np.array(prior, float),
                                   stats={k: sp for k in STAT_ORDER})

    def test_single_component(self):
        ap = self.population([3.0], [4.0], [1.0])
        x = 4.0
        expected = math.exp(-0.5 * (x - 3) ** 2 / 4) / math.sqrt(2 * math.pi * 4)
        assert mixture_density(x, ap, "total_energy") == pytest.approx(expected, rel=1e-12)

    def test_peak_of_narrow_component(self):
        ap = self.population([0.0, 100.0], [1e-4, 1.0], [0.3, 0.7])
        got = mixture_density(0.0, ap, "duration")
        assert got == pytest.approx(0.3 / math.sqrt(2 * math.pi * 1e-4), rel=1e-9)

    def test_integrates_to_one(self):
        ap = self.population([0.0, 5.0, 12.0], [1.0, 2.0, 0.5], [0.2, 0.5, 0.3])
        grid = np.linspace(-30, 50, 200_001)
        total = trapezoid(mixture_density(grid, ap, "total_energy"), grid)
        assert total == pytest.approx(1.0, abs=1e-3)
