import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from harmshift.experiments import harm_boundary, paper_pi_grid
from harmshift.simgen import (CIRCLE_SOURCE, CIRCLE_TARGET, CircleShiftConfig, DriftSchedule,
                              GaussianLabelShiftConfig, ScenarioConfig, analytic_source_risk,
                              analytic_target_misclassification_risk, bayes_losses,
                              bayes_posterior, bayes_predict, circle_label, condition_number,
                              make_rng, norm_cdf, normals, paper_drift_schedule, running_risk,
                              sample_circle_shift, sample_drift, sample_label_shift, uniforms)

CFG = GaussianLabelShiftConfig()


def density_quotient(x, cfg):
    f0 = stats.multivariate_normal(cfg.mu0, np.eye(2)).pdf(x)
    f1 = stats.multivariate_normal(cfg.mu1, np.eye(2)).pdf(x)
    return cfg.pi1_source * f1 / (cfg.pi1_source * f1 + (1 - cfg.pi1_source) * f0)


class TestRng:
    def test_uniforms_open_interval(self):
        u = uniforms(make_rng(0), 100_000)
        assert u.min() > 0 and u.max() < 1
        assert stats.kstest(u, "uniform").pvalue > 0.001

    def test_normals(self):
        z = normals(make_rng(1), 100_000)
        assert stats.kstest(z, "norm").pvalue > 0.001

    def test_keys_give_distinct_streams(self):
        a = uniforms(make_rng(5, 1), 10)
        b = uniforms(make_rng(5, 2), 10)
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(a, uniforms(make_rng(5, 1), 10))

    def test_norm_cdf_accuracy(self):
        assert norm_cdf(-1.0) == pytest.approx(0.15865525393145707, abs=1e-15)
        assert norm_cdf(0.0) == 0.5


class TestBayes:
    def test_midpoint_gives_prior(self):
        assert bayes_posterior([0.0, 0.0], CFG) == pytest.approx(0.25)

    def test_far_right_tends_to_one(self):
        assert bayes_posterior([40.0, 0.0], CFG) == pytest.approx(1.0)
        assert bayes_posterior([-40.0, 0.0], CFG) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("x", [[0.5, 0.0], [0.2, -1.3], [-2.0, 4.0], [1.7, 0.3]])
    def test_density_quotient_oracle(self, x):
        assert bayes_posterior(x, CFG) == pytest.approx(density_quotient(x, CFG), rel=1e-10)

    def test_predict_thresholds_posterior(self):
        x = normals(make_rng(2), (1000, 2))
        np.testing.assert_array_equal(bayes_predict(x, CFG), (bayes_posterior(x, CFG) >= 0.5))


class TestAnalyticRisk:
    @pytest.mark.parametrize("pi_t", [0.1, 0.5, 0.9])
    def test_symmetric_source(self, pi_t):
        cfg = GaussianLabelShiftConfig(pi1_source=0.5, pi1_target=pi_t)
        assert analytic_target_misclassification_risk(cfg) == pytest.approx(
            stats.norm.cdf(-1), abs=1e-12)

    def test_affine_in_target_marginal(self):
        pis = np.linspace(0.05, 0.95, 11)
        r = np.array([analytic_target_misclassification_risk(CFG.with_target(p)) for p in pis])
        np.testing.assert_allclose(np.diff(r, 2), 0, atol=1e-14)

    def test_coincident_means(self):
        with pytest.raises(ValueError):
            analytic_target_misclassification_risk(
                GaussianLabelShiftConfig((0.0, 0.0), (0.0, 0.0)))

    @pytest.mark.parametrize("k", range(5))
    def test_monte_carlo_agreement(self, k):
        rng = make_rng(100, k)
        mu0 = tuple(normals(rng, 2))
        mu1 = tuple(normals(rng, 2) + 1.5)
        ps, pt = 0.1 + 0.8 * uniforms(rng, 2)
        cfg = GaussianLabelShiftConfig(mu0, mu1, float(ps), float(pt))
        losses = bayes_losses(sample_label_shift(cfg, 1_000_000, 7, k), cfg)
        assert losses.mean() == pytest.approx(analytic_target_misclassification_risk(cfg), abs=0.002)

    def test_harm_boundary_on_grid(self):
        b = harm_boundary(CFG, 0.05)
        rs = analytic_source_risk(CFG)
        assert analytic_target_misclassification_risk(CFG.with_target(b)) == pytest.approx(rs + 0.05)
        grid = paper_pi_grid()
        harmful = [p for p in grid
                   if analytic_target_misclassification_risk(CFG.with_target(p)) > rs + 0.05]
        step = grid[1] - grid[0]
        assert 0 <= harmful[0] - b <= step

    def test_invalid_marginal(self):
        with pytest.raises(ValueError):
            GaussianLabelShiftConfig(pi1_target=1.0)


class TestSampling:
    def test_label_fraction_and_means(self):
        cfg = CFG.with_target(0.6)
        s = sample_label_shift(cfg, 100_000, 3)
        sd = math.sqrt(0.6 * 0.4 / 100_000)
        assert abs(s.y.mean() - 0.6) <= 3 * sd
        for y, mu in ((0, cfg.mu0), (1, cfg.mu1)):
            xs = s.x[s.y == y]
            assert np.all(np.abs(xs.mean(axis=0) - mu) <= 3 / math.sqrt(len(xs)))

    def test_deterministic(self):
        a, b = sample_label_shift(CFG, 50, 9, 1), sample_label_shift(CFG, 50, 9, 1)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)

    def test_bad_size(self):
        with pytest.raises(ValueError):
            sample_label_shift(CFG, 0, 1)

    def test_jsonl_records(self):
        s = sample_drift(DriftSchedule(((0.3, 2), (0.6, 1))), CFG, 1)
        lines = s.to_jsonl().splitlines()
        assert len(lines) == 3
        rec = json.loads(lines[2])
        assert set(rec) == {"x", "y", "t", "running_risk"}
        assert rec["t"] == 3 and len(rec["x"]) == 2
        assert rec["running_risk"] == pytest.approx(float(s.running_risk[2]))


class TestDrift:
    def test_single_segment_equals_label_shift(self):
        d = sample_drift(DriftSchedule(((0.4, 300),)), CFG, 11, 2)
        s = sample_label_shift(CFG, 300, 11, 2, pi1=0.4)
        np.testing.assert_array_equal(d.x, s.x)
        np.testing.assert_array_equal(d.y, s.y)

    def test_paper_schedule(self):
        sched = paper_drift_schedule()
        m = sched.marginals()
        assert m[0] == 0.25 and m[199] == 0.25 and m[200] == pytest.approx(0.35)
        assert m[-1] == pytest.approx(0.85)
        assert [p for p, _ in sched.segments[:7]] == pytest.approx(
            [0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85])
        assert sched.length == 7 * 200 + sched.segments[-1][1]

    def test_running_risk_nondecreasing(self):
        rr = running_risk(paper_drift_schedule(), CFG)
        assert np.all(np.diff(rr) >= -1e-15)
        assert rr[0] == pytest.approx(analytic_source_risk(CFG))

    def test_running_risk_prefix_average(self):
        sched = DriftSchedule(((0.2, 3), (0.7, 2)))
        r = [analytic_target_misclassification_risk(CFG.with_target(p)) for p in sched.marginals()]
        np.testing.assert_allclose(running_risk(sched, CFG), np.cumsum(r) / np.arange(1, 6))

    @pytest.mark.parametrize("segments", [(), ((0.0, 5),), ((0.5, 0),)])
    def test_invalid(self, segments):
        with pytest.raises(ValueError):
            DriftSchedule(segments)


class TestCircle:
    def test_labels(self):
        assert circle_label([0.0, 0.0]) == 0
        assert circle_label([1.0, 0.0]) == 1
        assert circle_label([math.cos(2.0), math.sin(2.0)]) == 1
        assert circle_label([0.5, 0.5]) == 1  # squared radius exactly 1/2

    def test_origin_fraction(self):
        s = sample_circle_shift(CIRCLE_TARGET, 100_000, 4)
        near_origin = np.linalg.norm(s.x, axis=1) < 0.5
        assert abs(near_origin.mean() - 0.5) < 0.01

    def test_source_arc(self):
        s = sample_circle_shift(CIRCLE_SOURCE, 20_000, 5)
        far = np.linalg.norm(s.x, axis=1) > 0.7
        angles = np.arctan2(s.x[far, 1], s.x[far, 0])
        assert np.quantile(np.abs(angles), 0.99) < math.pi / 3 + 0.3

    def test_invalid(self):
        with pytest.raises(ValueError):
            CircleShiftConfig(1.0, 0.0)


class TestConditionNumber:
    def test_identity(self):
        assert condition_number([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 1.0

    def test_example(self):
        assert condition_number([0.5, 0.5], [0.25, 0.75]) == pytest.approx(3.0)

    def test_zero_target_mass_excluded(self):
        assert condition_number([0.25, 0.25, 0.5], [0.0, 0.5, 0.5]) == pytest.approx(2.0)

    def test_unseen_class(self):
        assert condition_number([1.0, 0.0], [0.5, 0.5]) == math.inf

    def test_invalid(self):
        with pytest.raises(ValueError):
            condition_number([0.5, 0.6], [0.5, 0.5])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.01, 1), min_size=2, max_size=5), st.data())
    def test_at_least_one(self, ws, data):
        ps = np.asarray(ws) / np.sum(ws)
        wt = np.asarray(data.draw(st.lists(st.floats(0.01, 1), min_size=len(ws), max_size=len(ws))))
        assert condition_number(ps, wt / wt.sum()) >= 1.0 - 1e-12


class TestScenarioConfig:
    def test_roundtrip(self):
        sc = ScenarioConfig(GaussianLabelShiftConfig((-2.0, 0.5), (1.0, 1.0), 0.3), 0.8, 40, 200)
        assert ScenarioConfig.from_dict(json.loads(json.dumps(sc.to_dict()))) == sc

    def test_change_point(self):
        sc = ScenarioConfig(CFG, 0.9, 101, 100)
        z = sc.target_losses(300, 0, 0)
        assert z.shape == (300,)
        ref = bayes_losses(sample_drift(DriftSchedule(((0.25, 100), (0.9, 200))), CFG, 0, 0, 1), CFG)
        np.testing.assert_array_equal(z, ref)

    def test_source_losses(self):
        z = ScenarioConfig(CFG, n_source=5000).source_losses(0, 3)
        assert z.shape == (5000,)
        assert z.mean() == pytest.approx(analytic_source_risk(CFG), abs=0.02)
