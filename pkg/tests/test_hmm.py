import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_hmm, two_state
from lbmnilm.hmm import (ApplianceHmm, RelaxedAssignment, consistent_h, fit_hmm,
                         log_prior_states, onehot, path_log_prob, round_states,
                         sample_path, sample_paths)


def brute_force_log_prior(S, H, hmms):
    """Independent loop over every index tuple."""
    total = 0.0
    for s, h, hmm in zip(S, H, hmms):
        for k in range(hmm.K):
            total += s[0, k] * math.log(max(hmm.pi[k], 1e-12))
        for t in range(h.shape[0]):
            for j in range(hmm.K):
                for k in range(hmm.K):
                    total += h[t, j, k] * math.log(max(hmm.trans[j, k], 1e-12))
    return total


def random_relaxed(rng, K, T):
    S = rng.dirichlet(np.ones(K), size=T)
    return S, consistent_h(S)


class TestApplianceHmm:
    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            ApplianceHmm(pi=[0.5, 0.6], trans=np.eye(2), mu=[0, 1])
        with pytest.raises(ValueError):
            ApplianceHmm(pi=[0.5, 0.5], trans=[[0.5, 0.5], [0.4, 0.5]], mu=[0, 1])
        with pytest.raises(ValueError):
            ApplianceHmm(pi=[0.5, 0.5], trans=np.eye(2), mu=[1, 2])
        with pytest.raises(ValueError):
            ApplianceHmm(pi=[0.5, 0.5], trans=np.eye(2), mu=[0, 0])
        with pytest.raises(ValueError):
            ApplianceHmm(pi=[1.0], trans=[[1.0]], mu=[0])

    def test_immutable(self):
        h = two_state()
        with pytest.raises(ValueError):
            h.mu[1] = 3.0

    def test_dict_round_trip_stores_columns_as_rows(self):
        h = ApplianceHmm(pi=[0.7, 0.3], trans=[[0.9, 0.2], [0.1, 0.8]], mu=[0, 5], name="x")
        d = h.to_dict()
        assert d["trans"] == [[0.9, 0.1], [0.2, 0.8]]
        assert set(d) >= {"appliance_name", "K", "pi", "mu", "trans"}
        h2 = ApplianceHmm.from_dict(d)
        assert np.array_equal(h2.trans, h.trans) and h2.name == "x"


class TestLogPrior:
    def test_two_step_example(self):
        h = ApplianceHmm(pi=[0.5, 0.5], trans=[[0.7, 0.0], [0.3, 1.0]], mu=[0, 1])
        S, H = onehot(np.array([0, 1]), 2)
        assert log_prior_states([S], [H], [h]) == pytest.approx(math.log(0.5) + math.log(0.3),
                                                                abs=1e-12)

    def test_certain_transitions_contribute_nothing(self):
        h = ApplianceHmm(pi=[0.5, 0.5], trans=np.eye(2), mu=[0, 1])
        S, H = onehot(np.zeros(5, int), 2)
        assert log_prior_states([S], [H], [h]) == pytest.approx(math.log(0.5), abs=1e-12)

    def test_matches_brute_force_index_sum(self, rng):
        hmms = [random_hmm(rng, 2, "a"), random_hmm(rng, 3, "b")]
        S, H = zip(*(random_relaxed(rng, h.K, 4) for h in hmms))
        assert log_prior_states(S, H, hmms) == pytest.approx(
            brute_force_log_prior(S, H, hmms), abs=1e-10)

    def test_dimension_mismatch(self, rng):
        h = random_hmm(rng, 3)
        S, H = random_relaxed(rng, 2, 4)
        with pytest.raises(ValueError):
            log_prior_states([S], [H], [h])

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), a=st.floats(0, 1), K=st.integers(2, 4),
           T=st.integers(2, 8))
    def test_linear_in_relaxation(self, seed, a, K, T):
        rng = np.random.default_rng(seed)
        h = random_hmm(rng, K)
        S1, H1 = random_relaxed(rng, K, T)
        S2, H2 = random_relaxed(rng, K, T)
        mix = log_prior_states([a * S1 + (1 - a) * S2], [a * H1 + (1 - a) * H2], [h])
        sep = a * log_prior_states([S1], [H1], [h]) + (1 - a) * log_prior_states([S2], [H2], [h])
        assert mix == pytest.approx(sep, abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), K=st.integers(2, 4), T=st.integers(1, 12))
    def test_discrete_path_equals_hmm_log_probability(self, seed, K, T):
        rng = np.random.default_rng(seed)
        h = random_hmm(rng, K)
        z = rng.integers(0, K, T)
        S, H = onehot(z, K)
        direct = math.log(max(h.pi[z[0]], 1e-12)) + sum(
            math.log(max(h.trans[z[t], z[t - 1]], 1e-12)) for t in range(1, T))
        assert log_prior_states([S], [H], [h]) == pytest.approx(direct, abs=1e-12)
        assert path_log_prob(z, h) == pytest.approx(direct, abs=1e-12)


class TestRelaxation:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), K=st.integers(2, 4), T=st.integers(2, 10))
    def test_consistent_h_satisfies_linking(self, seed, K, T):
        rng = np.random.default_rng(seed)
        S = rng.dirichlet(np.ones(K), size=T)
        H = consistent_h(S)
        assert np.allclose(H.sum(axis=1), S[:-1]) and np.allclose(H.sum(axis=2), S[1:])
        ra = RelaxedAssignment(S=[S], H=[H], U=np.zeros(T), xi=[np.ones(1)])
        assert ra.violation() < 1e-12

    def test_from_paths_is_feasible(self, rng):
        hmms = [random_hmm(rng, 2), random_hmm(rng, 3)]
        ra = RelaxedAssignment.from_paths([np.array([0, 1, 1]), np.array([2, 0, 1])], hmms)
        assert ra.violation() == 0.0


class TestSampling:
    def test_degenerate_chains(self, rng):
        h = ApplianceHmm(pi=[1, 0], trans=np.eye(2), mu=[0, 1])
        assert sample_path(h, 5, rng).tolist() == [0] * 5
        h = ApplianceHmm(pi=[0, 1], trans=[[0.5, 0.0], [0.5, 1.0]], mu=[0, 1])
        assert sample_path(h, 5, rng).tolist() == [1] * 5

    def test_seed_determinism(self):
        h = two_state()
        a = sample_paths(h, 50, 20, np.random.default_rng(3))
        b = sample_paths(h, 50, 20, np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_occupancy_matches_stationary_distribution(self):
        # 2-state chain started at stationarity: P(ON) = p_on / (p_on + p_off)
        p_on, p_off = 0.2, 0.3
        stat = p_on / (p_on + p_off)
        h = two_state(p_on, p_off, pi=(1 - stat, stat))
        n = 100_000
        z = sample_paths(h, 8, n, np.random.default_rng(7))
        freq = z[:, -1].mean()
        se = math.sqrt(stat * (1 - stat) / n)
        assert abs(freq - stat) <= 3 * se


class TestFitHmm:
    def test_constant_zero_trace(self):
        h = fit_hmm(np.zeros(500), K=2)
        assert h.mu[0] == 0 and 0 < h.mu[1] < 0.01
        assert h.meta.get("padded")
        assert h.pi[0] > 0.99 and h.trans[0, 0] > 0.99

    def test_alternating_trace(self):
        h = fit_hmm(np.tile([0.0, 100.0], 500), K=2)
        assert h.mu[1] == pytest.approx(100.0)
        assert h.trans[1, 0] > 0.99 and h.trans[0, 1] > 0.99

    def test_recovers_generator(self):
        gen = ApplianceHmm(pi=[0.6, 0.3, 0.1],
                           trans=[[0.95, 0.05, 0.10], [0.04, 0.90, 0.10], [0.01, 0.05, 0.80]],
                           mu=[0, 10, 40])
        z = sample_path(gen, 100_000, np.random.default_rng(1))
        h = fit_hmm(gen.mu[z], K=3)
        assert np.allclose(h.mu, gen.mu)
        assert np.max(np.abs(h.trans - gen.trans)) < 0.02

    def test_segments_do_not_link(self):
        h = fit_hmm([np.zeros(10), np.full(10, 5.0)], K=2)
        # a single 0 -> 5 step would exist if the segments were concatenated
        assert h.trans[1, 0] == pytest.approx(1 / 11)

    @settings(max_examples=40, deadline=None)
    @given(x=st.lists(st.floats(0, 1e4, allow_nan=False), min_size=3, max_size=60),
           K=st.integers(2, 3))
    def test_output_always_valid(self, x, K):
        h = fit_hmm(np.array(x), K=K)  # constructor enforces the invariants
        assert h.K == K

    def test_rejects_negative_or_short(self):
        with pytest.raises(ValueError):
            fit_hmm(np.array([0.0, -1.0, 2.0]), K=2)
        with pytest.raises(ValueError):
            fit_hmm(np.array([1.0]), K=2)


class TestRoundStates:
    def test_examples(self):
        out = round_states(np.array([[0.2, 0.8], [0.5, 0.5], [1.0, 0.0]]))
        assert out.tolist() == [[0, 1], [1, 0], [1, 0]]

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_idempotent_one_hot(self, seed):
        rng = np.random.default_rng(seed)
        S = rng.dirichlet(np.ones(3), size=7)
        r = round_states(S)
        assert np.array_equal(round_states(r), r) and np.all(r.sum(axis=1) == 1)
