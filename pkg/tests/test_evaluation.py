import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lbmnilm.evaluation import (METRICS, ExperimentConfig, SynthSpec, compute_metrics,
                                desk_house, full_house, generate_synthetic,
                                report_csv, report_markdown, run_experiment,
                                signal_statistics, write_report)
from lbmnilm.hmm import ApplianceHmm, sample_paths
from lbmnilm.melding import MethodConfig
from lbmnilm.stats import fit_population


def always(on: bool, mu=(0.0, 10.0)) -> ApplianceHmm:
    s = 1 if on else 0
    pi = np.eye(2)[s]
    trans = np.zeros((2, 2))
    trans[s, :] = 1.0
    return ApplianceHmm(pi=pi, trans=trans, mu=list(mu), name="on" if on else "off")


def signals(seed, I=3, T=40):
    rng = np.random.default_rng(seed)
    x = rng.choice([0.0, 4.0, 9.0], size=(I, T), p=[0.5, 0.3, 0.2])
    x[:, 0] = 4.0  # every appliance has energy, duration and a cycle-free start
    x[:, T // 2] = 0.0
    x[:, T // 2 + 1] = 9.0  # and at least one OFF->ON cycle
    xh = rng.choice([0.0, 4.0, 9.0], size=(I, T))
    return x, xh


class TestMetrics:
    def test_identity_is_zero(self):
        x, _ = signals(0)
        m = compute_metrics(x, x)
        assert [getattr(m, k) for k in METRICS] == [0.0, 0.0, 0.0, 0.0]

    def test_nde_example(self):
        assert compute_metrics([[1.0, 1.0]], [[0.0, 0.0]]).nde == 1.0

    def test_sae_example(self):
        # totals (2, 2) predicted as (3, 1): (1/2)(1 + 1) / 4
        m = compute_metrics([[1.0, 1.0], [2.0, 0.0]], [[2.0, 1.0], [1.0, 0.0]])
        assert m.sae == pytest.approx(0.25, abs=1e-15)

    def test_statistics(self):
        s = signal_statistics([[0.0, 3.0, 3.0, 0.0, 1.0]], dt=2.0)
        assert s.tolist() == [[7.0, 6.0, 2.0]]

    def test_undefined_metrics(self):
        m = compute_metrics(np.zeros((2, 5)), np.ones((2, 5)))
        assert (m.nde, m.sae, m.dae, m.cae) == (None, None, None, None)
        # always ON: energy and duration defined, no OFF->ON cycle
        m = compute_metrics(np.full((1, 4), 2.0), np.full((1, 4), 2.0))
        assert m.sae == 0.0 and m.dae == 0.0 and m.cae is None

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            compute_metrics(np.ones((2, 3)), np.ones((3, 2)))

    def test_per_appliance(self):
        x, xh = signals(1)
        m = compute_metrics(x, xh, names=["a", "b", "c"])
        assert set(m.per_appliance) == {"a", "b", "c"}
        solo = compute_metrics(x[1:2], xh[1:2])
        assert m.per_appliance["b"]["nde"] == pytest.approx(solo.nde, rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_non_negative_and_zero_iff_equal(self, seed):
        x, xh = signals(seed)
        m = compute_metrics(x, xh)
        assert all(getattr(m, k) >= 0 for k in METRICS)
        assert (m.nde == 0) == np.array_equal(x, xh)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_reordering_invariance(self, seed):
        x, xh = signals(seed, I=4)
        perm = np.random.default_rng(seed).permutation(4)
        a, b = compute_metrics(x, xh), compute_metrics(x[perm], xh[perm])
        for k in METRICS:
            assert getattr(b, k) == pytest.approx(getattr(a, k), rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-3, 1e3))
    def test_scale_invariance(self, seed, scale):
        x, xh = signals(seed)
        a, b = compute_metrics(x, xh), compute_metrics(scale * x, scale * xh)
        for k in METRICS:
            assert getattr(b, k) == pytest.approx(getattr(a, k), rel=1e-9)


class TestSynthetic:
    def test_noise_free_sum(self):
        truth, mains, states = generate_synthetic(SynthSpec(desk_house(), 3, 50, 0.0, 4))
        assert truth.shape == (3, 3, 50) and states.shape == (3, 3, 50)
        assert np.array_equal(mains, truth.sum(axis=1))
        for i, h in enumerate(desk_house()):
            assert np.array_equal(truth[:, i], h.mu[states[:, i]])

    def test_always_off_gives_zero_mains(self):
        _, mains, _ = generate_synthetic(SynthSpec([always(False)], 2, 30, 0.0, 0))
        assert np.all(mains == 0.0)

    def test_noise_mean(self):
        # the load keeps Y far from the clip at 0, so Y - sum x is N(0, 100)
        sigma, n = 10.0, 100_000
        truth, mains, _ = generate_synthetic(
            SynthSpec([always(True, (0.0, 1000.0))], 100, n // 100, sigma, 9))
        e = (mains - truth.sum(axis=1)).ravel()
        assert abs(e.mean()) <= 3 * sigma / np.sqrt(n)

    def test_clipped_at_zero(self):
        _, mains, _ = generate_synthetic(SynthSpec([always(False)], 2, 500, 5.0, 1))
        assert mains.min() == 0.0 and mains.max() > 0.0

    def test_seed_determinism(self):
        a = generate_synthetic(SynthSpec(desk_house(), 2, 40, 1.0, 7))
        b = generate_synthetic(SynthSpec(desk_house(), 2, 40, 1.0, 7))
        c = generate_synthetic(SynthSpec(desk_house(), 2, 40, 1.0, 8))
        assert all(np.array_equal(u, v) for u, v in zip(a, b))
        assert not np.array_equal(a[1], c[1])

    @pytest.mark.parametrize("kw", [dict(sigma=-1.0), dict(T=1), dict(days=0)])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            SynthSpec(desk_house(), **kw)

    def test_full_house(self):
        h = full_house()
        assert len(h) == 7 and len({a.name for a in h}) == 7

    @pytest.mark.parametrize("index", [1, 2])
    def test_refit_cycle_prior(self, index):
        # cycle prior from refit synthetic days vs an independent simulation
        gen = desk_house()[index]
        days, T = 400, 720
        truth, _, _ = generate_synthetic(SynthSpec([gen], days, T, 0.0, 21))
        pop = fit_population({gen.name: list(truth[:, 0])}, {gen.name: gen})
        prior = pop.appliances[gen.name].cycle_prior
        z = sample_paths(gen, T, 20_000, np.random.default_rng(22))
        cycles = ((z[:, 1:] > 0) & (z[:, :-1] == 0)).sum(axis=1)
        q = np.bincount(np.minimum(cycles, prior.size - 1), minlength=prior.size) / z.shape[0]
        se = np.sqrt(q * (1 - q) / days + prior * (1 - prior) / days)
        assert np.all(np.abs(prior - q) <= 3 * np.maximum(se, 1 / days))


def tiny_config(**kw):
    base = dict(train_days=6, test_days=2, T=60, induced_samples=100, seed=5,
                max_outer=5)
    base.update(kw)
    return ExperimentConfig(**base)


class TestExperiment:
    def test_one_method_one_day(self):
        cfg = tiny_config(methods=[MethodConfig("afhmm", u_prior_scale=1.0)], test_days=1)
        rep = run_experiment(cfg)
        pooled = [r for r in rep["rows"] if r["house"] == "all"]
        assert len(pooled) == 1 and pooled[0]["days"] == 1
        assert all(pooled[0][f"{k}_std"] in (0.0, None) for k in METRICS)

    def test_alpha_one_matches_afhmm(self):
        cfg = tiny_config(methods=[MethodConfig("afhmm", u_prior_scale=1.0),
                                   MethodConfig("lbm", alpha=1.0, u_prior_scale=1.0,
                                                label="lbm1")])
        rows = {r["method"]: r for r in run_experiment(cfg)["rows"]}
        for k in METRICS:
            a, b = rows["afhmm"][f"{k}_mean"], rows["lbm1"][f"{k}_mean"]
            assert (a is None and b is None) or b == pytest.approx(a, rel=1e-4, abs=1e-12)

    def test_reports_deterministic(self, tmp_path):
        cfg = tiny_config(methods=[MethodConfig("pr", u_prior_scale=1.0)])
        run_experiment(cfg, tmp_path / "a")
        run_experiment(cfg, tmp_path / "b")
        for f in ("report.csv", "report.md", "days.jsonl"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert (tmp_path / "a" / "timing.csv").exists()
        assert "```json" in (tmp_path / "a" / "report.md").read_text()

    def test_per_house_and_pooled_rows(self):
        cfg = tiny_config(methods=[MethodConfig("afhmm", u_prior_scale=1.0)], houses=2)
        rep = run_experiment(cfg)
        assert [r["house"] for r in rep["rows"]] == [0, 1, "all"]
        per = [r for r in rep["days"]]
        assert rep["rows"][2]["days"] == len(per) == 4
        mean = np.mean([d["nde"] for d in per])
        assert rep["rows"][2]["nde_mean"] == pytest.approx(mean, rel=1e-12)

    def test_failures_recorded(self, monkeypatch):
        import lbmnilm.evaluation as ev

        def boom(Y, *a, **k):
            if Y.sum() == FAIL_SUM[0]:
                raise FloatingPointError("synthetic failure")
            return real(Y, *a, **k)
        real = ev.run_map
        cfg = tiny_config(methods=[MethodConfig("afhmm", u_prior_scale=1.0)])
        truth, mains, _ = _test_days(cfg)
        FAIL_SUM = [mains[0].sum()]
        monkeypatch.setattr(ev, "run_map", boom)
        rep = run_experiment(cfg)
        assert rep["failures"]["afhmm"] == [{"house": 0, "day": 0,
                                             "error": "synthetic failure"}]
        pooled = rep["rows"][-1]
        assert pooled["days"] == 1 and pooled["failures"] == 1

    def test_config_round_trip(self):
        cfg = tiny_config(houses=2, scale="full")
        d = cfg.to_dict()
        again = ExperimentConfig.from_dict(json.loads(json.dumps(d)))
        assert again.to_dict() == d

    @pytest.mark.parametrize("kw", [dict(scale="huge"), dict(houses=0)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            tiny_config(**kw)


def _test_days(cfg):
    test_seed = int(np.random.SeedSequence([cfg.seed, 2]).generate_state(1)[0])
    return generate_synthetic(SynthSpec(cfg.generator(), cfg.test_days, cfg.T,
                                        cfg.sigma, test_seed))


class TestReportFormat:
    ROW = {"method": "pr", "house": "all", "days": 2, "failures": 0,
           **{f"{k}_{s}": v for k in METRICS
              for s, v in (("mean", 0.5), ("std", 0.25), ("n", 2))}}

    def test_csv(self):
        text = report_csv([self.ROW])
        head, line = text.strip().split("\n")
        assert head.startswith("method,house,days,failures,nde_mean")
        assert line.startswith("pr,all,2,0,0.5,0.25,2")

    def test_undefined_is_na(self):
        row = dict(self.ROW, cae_mean=None, cae_std=None, cae_n=0)
        assert "n/a" in report_csv([row])
        assert report_markdown([row]).strip().endswith("| n/a |")

    def test_markdown_layout(self):
        md = report_markdown([self.ROW])
        assert md.splitlines()[0] == "| Method | House | NDE | SAE | DAE | CAE |"
        assert "| pr | all | 0.50±0.25 |" in md

    def test_write_report(self, tmp_path):
        rep = {"rows": [self.ROW], "days": [{"method": "pr", "day": 0}],
               "failures": {"pr": [{"house": 0, "day": 1, "error": "x"}]},
               "timing": [{"method": "pr", "house": 0, "day": 0, "wall_time": 1.0}],
               "config": {"seed": 1}}
        write_report(rep, tmp_path)
        lines = (tmp_path / "days.jsonl").read_text().splitlines()
        assert len(lines) == 2 and json.loads(lines[1])["method"] == "pr"
