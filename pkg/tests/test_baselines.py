import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from harmshift.baselines import (BettingKind, CLTBoundState, ConformalMartingaleState, Correction,
                                 clt_lower, clt_vs_betting_experiment, conformal_p_value,
                                 conformity_score_classification, conformity_score_regression,
                                 corrected_delta, log_simple_mixture, martingale_update,
                                 ville_threshold)
from harmshift.bounds import BettingState, Side
from harmshift.simgen import make_rng, normals, uniforms


class TestCLT:
    def test_constant_stream(self):
        s = CLTBoundState(0.1)
        s, low = clt_lower(s, 0.3)
        assert low == 0.0
        for _ in range(10):
            s, low = clt_lower(s, 0.3)
            assert low == pytest.approx(0.3)

    def test_matches_formula(self):
        z = uniforms(make_rng(0), 50)
        s = CLTBoundState(0.1)
        for v in z:
            low = s.observe(v)
        expected = z.mean() - stats.norm.ppf(0.9) * z.std(ddof=1) / math.sqrt(50)
        assert float(low) == pytest.approx(expected, rel=1e-10)

    def test_eval_count_only_on_evaluation(self):
        s = CLTBoundState(0.1, correction="power")
        for v in (0.1, 0.5, 0.9):
            s.update(v)
        assert s.eval_count == 0
        s.lower()
        s.lower()
        assert s.eval_count == 2

    @pytest.mark.parametrize("n_evals", [1, 10])
    def test_corrections_widen(self, n_evals):
        z = uniforms(make_rng(1), 100)
        lows = {}
        for c in Correction:
            s = CLTBoundState(0.1, correction=c)
            for v in z:
                s.update(v)
            for _ in range(n_evals):
                lows[c] = float(s.lower())
        # delta/2^k is below (6/pi^2) delta/k^2 at k = 1 and for every k >= 5
        assert lows[Correction.POWER] < lows[Correction.POLYNOMIAL] < lows[Correction.NONE]

    def test_corrected_delta_values(self):
        assert corrected_delta(0.1, 3, "none") == pytest.approx(0.1)
        assert corrected_delta(0.1, 3, "power") == pytest.approx(0.1 / 8)
        assert corrected_delta(0.1, 3, "polynomial") == pytest.approx(6 / math.pi ** 2 * 0.1 / 9)

    @pytest.mark.parametrize("n", [1, 2, 10, 60, 500])
    def test_bonferroni_budgets_telescope(self, n):
        d = Fraction(1, 10)
        assert sum(d / 2 ** i for i in range(1, n + 1)) < d
        # pi^2/6 = S_M + sum_{i>M} 1/i^2 > S_M + 1/(M+1), a certified rational lower bound
        m = 2000
        zeta2_lower = sum(Fraction(1, i * i) for i in range(1, m + 1)) + Fraction(1, m + 1)
        partial = sum(Fraction(1, i * i) for i in range(1, n + 1))
        assert partial < zeta2_lower
        assert 6 / math.pi ** 2 * 0.1 * float(partial) < 0.1

    def test_bad_delta(self):
        with pytest.raises(ValueError):
            CLTBoundState(1.0)


class TestConformityScores:
    def test_regression(self):
        assert conformity_score_regression(3, 1) == -2
        assert conformity_score_regression(2.5, 2.5) == 0
        res = np.array([0.1, -2.0, 0.5])
        scores = conformity_score_regression(res, 0.0)
        np.testing.assert_array_equal(np.argsort(scores), np.argsort(-np.abs(res)))

    def test_classification_examples(self):
        assert conformity_score_classification([0.5, 0.3, 0.2], 2) == pytest.approx(0.2)
        assert conformity_score_classification([0.5, 0.3, 0.2], 0) == 1.0
        for y in range(4):
            assert conformity_score_classification(np.full(4, 0.25), y) == 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.01, 1), min_size=2, max_size=6), st.data())
    def test_classification_range(self, w, data):
        f = np.asarray(w) / np.sum(w)
        y = data.draw(st.integers(0, f.size - 1))
        s = conformity_score_classification(f, y)
        assert 0 <= s <= 1
        if y == int(np.argmax(f)):
            assert s == 1.0


class TestPValues:
    def test_first_p_value_is_u(self):
        st_ = ConformalMartingaleState(seed=3)
        u = uniforms(make_rng(3, 0, 0xC0F), ())
        assert conformal_p_value(st_, 0.7) == pytest.approx(float(u))

    def test_strict_maximum(self):
        st_ = ConformalMartingaleState(seed=4)
        for a in (0.1, 0.2, 0.3, 0.4):
            conformal_p_value(st_, a)
        rng = make_rng(4, 0, 0xC0F)
        for _ in range(4):
            uniforms(rng, ())
        u = float(uniforms(rng, ()))
        assert conformal_p_value(st_, 0.9) == pytest.approx((4 + u) / 5)

    def test_ties_and_range(self):
        st_ = ConformalMartingaleState((50,), seed=5)
        for _ in range(30):
            p = st_.p_value(np.ones(50))
            assert np.all((p > 0) & (p <= 1))
        assert st_.scores.shape == (50, 30)

    def test_buffer_growth(self):
        st_ = ConformalMartingaleState(seed=6)
        x = normals(make_rng(6), 200)
        for v in x:
            st_.p_value(v)
        np.testing.assert_array_equal(st_.scores, x)

    def test_uniform_under_iid(self):
        st_ = ConformalMartingaleState(seed=7)
        p = np.array([st_.p_value(v) for v in normals(make_rng(7), 10_000)])
        assert stats.kstest(p, "uniform").pvalue > 0.01


class TestMartingales:
    def test_simple_bet_example(self):
        st_ = ConformalMartingaleState(kind="simple-bet", epsilon=0.1)
        _, w1 = martingale_update(st_, 0.01)
        assert w1 == pytest.approx(0.1 * 0.01 ** -0.9)
        assert w1 == pytest.approx(6.31, abs=0.01) and w1 < 20
        _, w2 = martingale_update(st_, 0.01)
        assert w2 == pytest.approx(w1 ** 2) and w2 > 20

    @pytest.mark.parametrize("n,s", [(1, -0.5), (5, -3.0), (40, -60.0), (200, -180.0)])
    def test_mixture_matches_quadrature(self, n, s):
        ref = integrate.quad(lambda e: e ** n * math.exp((e - 1) * s), 0, 1, epsabs=0,
                             epsrel=1e-12, limit=200)[0]
        assert log_simple_mixture(n, s) == pytest.approx(math.log(ref), rel=1e-9, abs=1e-9)

    def test_mixture_state_uses_running_sum(self):
        ps = uniforms(make_rng(8), 20)
        st_ = ConformalMartingaleState()
        for p in ps:
            w = st_.update(p)
        assert math.log(w) == pytest.approx(float(log_simple_mixture(20, np.log(ps).sum())))

    def test_small_p_values_grow_wealth(self):
        st_ = ConformalMartingaleState()
        for _ in range(30):
            w = st_.update(0.02)
        assert w > ville_threshold(0.05)

    def test_domain(self):
        st_ = ConformalMartingaleState()
        with pytest.raises(ValueError):
            st_.update(0.0)
        with pytest.raises(ValueError):
            ConformalMartingaleState(kind="simple-bet", epsilon=0.0)
        assert ville_threshold(0.05) == pytest.approx(20)

    @pytest.mark.parametrize("kind", list(BettingKind))
    def test_supermartingale_mean(self, kind):
        runs = 4000
        st_ = ConformalMartingaleState((runs,), kind)
        rng = make_rng(9)
        for t in range(1, 101):
            w = st_.update(uniforms(rng, runs))
            if t in (10, 100):
                se = w.std(ddof=1) / math.sqrt(runs)
                assert w.mean() <= 1 + 3 * se
            assert np.all(w > 0)

    def test_ville_crossing_rate(self):
        runs, delta = 1000, 0.05
        st_ = ConformalMartingaleState((runs,))
        rng = make_rng(10)
        crossed = np.zeros(runs, bool)
        for _ in range(1000):
            crossed |= st_.update(uniforms(rng, runs)) >= ville_threshold(delta)
        assert crossed.mean() <= delta + 3 * math.sqrt(delta * (1 - delta) / runs)


class TestCltVsBetting:
    def test_polynomial_clt_below_betting(self):
        runs, p = 200, 0.6
        z = (uniforms(make_rng(11), (runs, 600)) < p).astype(float)
        poly = CLTBoundState(0.1, (runs,), Correction.POLYNOMIAL)
        bet = BettingState(0.1, (runs,), side=Side.LOWER)
        below = []
        for t in range(600):
            lo_p = poly.observe(z[:, t])
            lo_b, _ = bet.update(z[:, t])
            if t >= 50:
                below.append(np.mean(lo_p <= lo_b))
        assert np.mean(below) > 0.95

    def test_small_experiment_columns(self):
        out = clt_vs_betting_experiment(n_runs=200, horizon=400, n_sizes=20, seed=1,
                                        grid_resolution=0.01)
        n = out["t"].size
        assert all(v.shape == (n,) for v in out.values())
        assert out["t"][0] == 20 and out["t"][-1] == 400
        assert np.all(np.diff(out["clt_cumulative"]) >= 0)
        assert np.all(np.diff(out["betting_cumulative"]) >= 0)
        se = math.sqrt(0.09 / 200)
        assert out["betting_cumulative"][-1] <= 0.1 + 3 * se
        assert np.all(out["clt_poly_mean_lower"] <= out["clt_mean_lower"])
