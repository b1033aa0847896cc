"""Acceptance criteria at their stated scale and tolerances.

Each test records one ``PASS``/``FAIL`` line, printed in the pytest terminal
summary, and then asserts the criterion.
"""

import math

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE_LINES
from harmshift import experiments
from harmshift.baselines import ConformalMartingaleState, clt_vs_betting_experiment
from harmshift.bounds import Method, fixed_upper_bound
from harmshift.changepoint import estimate_arl_add
from harmshift.losses import brier_loss, top_label_brier_loss, true_class_brier_loss
from harmshift.seqtest import Mode, TestSpec, mc_standard_error, run_batch
from harmshift.simgen import (GaussianLabelShiftConfig, ScenarioConfig, analytic_source_risk,
                              analytic_target_misclassification_risk, bayes_losses, make_rng,
                              normals, sample_label_shift, uniforms)

CFG = experiments.DEFAULT_CONFIG


def report(name, ok, detail):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    print(ACCEPTANCE_LINES[-1])
    assert ok, detail


@pytest.fixture(scope="module")
def grid():
    pis = experiments.paper_pi_grid()
    rows = experiments.label_shift_grid(pis, n_reps=250, max_samples=2000, batch_size=50,
                                        eps_tol=0.05, delta=0.05, seed=0)
    return pis, rows


@pytest.mark.parametrize("method", ["pmh", "pmeb", "betting", "cmeb"])
def test_criterion_1_type_one_control(method):
    runs, horizon, delta = 1000, 10_000, 0.05
    # the least favourable benign target: risk exactly at source risk + eps_tol
    pi = experiments.harm_boundary(CFG, 0.05)
    spec = TestSpec(Mode.ABSOLUTE, 0.05, delta, source_method="betting", target_method=method)
    src = experiments.source_loss_matrix(CFG, 1000, runs, seed=1)
    z = experiments.target_loss_matrix(CFG, pi, horizon, runs, seed=1)
    rate = run_batch(spec, src, z).rejected.mean()
    limit = delta + 3 * mc_standard_error(delta, runs)
    report(f"criterion 1 [{method}]", rate <= limit,
           f"rejection fraction {rate:.4f} at pi1_T={pi:.4f} (limit {limit:.4f})")


def test_criterion_2_rejection_curve(grid):
    pis, rows = grid
    bet = [r for r in rows if r["method"] == "betting"]
    benign_max = max(r["rejection_proportion"] for r in rows if not r["harmful"])
    at_09 = bet[-1]["rejection_proportion"]
    boundary = experiments.harm_boundary(CFG, 0.05)
    trans = experiments.transition_point(pis, [r["rejection_proportion"] for r in bet])
    step = pis[1] - pis[0]
    ok = (benign_max <= 0.1, at_09 >= 0.9, abs(trans - boundary) <= step)
    report("criterion 2", all(ok),
           f"benign max {benign_max:.3f} (<=0.1: {ok[0]}); betting at 0.9 {at_09:.3f} "
           f"(>=0.9: {ok[1]}); transition {trans:.3f} vs boundary {boundary:.3f}, "
           f"step {step:.3f} (within one step: {ok[2]})")


def test_criterion_3_stopping_time_ordering(grid):
    pis, rows = grid
    by = {(r["pi1_target"], r["method"]): r for r in rows}
    bad = []
    for pi in pis:
        if not by[(pi, "betting")]["harmful"]:
            continue
        t = [by[(pi, m)]["mean_stopping_time"] for m in ("betting", "pmeb", "hoeffding")]
        if not t[0] <= t[1] <= t[2]:
            bad.append(f"pi1_T={pi:.3f}: {t[0]:.1f}/{t[1]:.1f}/{t[2]:.1f}")
    report("criterion 3", not bad,
           "betting <= PM-EB <= Hoeffding at every harmful point" if not bad
           else "violations (betting/PM-EB/Hoeffding): " + "; ".join(bad))


def test_criterion_4_eps_appr():
    z = experiments.source_loss_matrix(CFG, 1000, 200, seed=4)
    eps = float(np.mean(fixed_upper_bound(z, 0.025, Method.BETTING).eps_appr))
    report("criterion 4", 0.015 <= eps <= 0.035, f"mean eps_appr {eps:.4f} over 200 draws")


def test_criterion_5_clt_vs_betting():
    runs = 1000
    out = clt_vs_betting_experiment(n_runs=runs, horizon=1000, p=0.6, delta=0.1, seed=5)
    limit = 0.1 + 3 * mc_standard_error(0.1, runs)
    fixed_ok = max(out["clt_fixed"].max(), out["betting_fixed"].max()) <= limit
    clt_exceeds = bool(np.any(out["clt_cumulative"] > 0.1))
    bet_ok = out["betting_cumulative"][-1] <= limit
    # exact fixed-time miscoverage of the CLT bound at the worst simulated size
    n = int(out["t"][np.argmax(out["clt_fixed"])])
    k = np.arange(n + 1)
    ph = k / n
    low = ph - stats.norm.ppf(0.9) * np.sqrt(ph * (1 - ph) / (n - 1))
    exact = stats.binom.pmf(k, n, 0.6)[low > 0.6].sum()
    report("criterion 5", fixed_ok and clt_exceeds and bet_ok,
           f"max fixed-time miscoverage clt {out['clt_fixed'].max():.3f} at n={n} (exact "
           f"binomial value {exact:.3f}) / betting "
           f"{out['betting_fixed'].max():.3f} (limit {limit:.3f}); clt cumulative at t=1000 "
           f"{out['clt_cumulative'][-1]:.3f}; betting cumulative at t=1000 "
           f"{out['betting_cumulative'][-1]:.3f}")


def test_criterion_6_drift():
    runs = 200
    res = experiments.drift_experiment(n_runs=runs, eps_tol=0.05, delta=0.05, seed=6)
    under = float(res.undercovered.mean())
    limit = 0.025 + 3 * mc_standard_error(0.025, runs)
    ok = res.rejection_fraction >= 0.95 and under <= limit
    report("criterion 6", ok,
           f"rejected {res.rejection_fraction:.3f} of runs within {res.running_risk.size} "
           f"points; under-coverage {under:.3f} (limit {limit:.3f})")


def test_criterion_7_conformal_contrast():
    runs, horizon = 200, 2000
    cf = experiments.conformal_experiment("cold-start", n_runs=runs, horizon=horizon,
                                          delta=0.05, seed=7)
    crossed = float(np.isfinite(cf["crossing_time"]).mean())
    spec = TestSpec(Mode.ABSOLUTE, 0.05, 0.05, source_method="betting", target_method="betting")
    src = experiments.source_loss_matrix(CFG, 1000, runs, seed=7)
    z = experiments.target_loss_matrix(CFG, 0.75, horizon, runs, seed=7)
    rej = float(run_batch(spec, src, z).rejected.mean())
    report("criterion 7", crossed < 0.5 and rej > 0.95,
           f"conformal martingale crossed 1/delta in {crossed:.3f} of runs (<0.5: {crossed < 0.5}); "
           f"betting test rejected in {rej:.3f} (>0.95: {rej > 0.95})")


def test_criterion_8_oracles():
    notes, ok = [], True
    # analytic risk versus 1e6-sample Monte Carlo on 5 random configurations
    worst = 0.0
    for k in range(5):
        rng = make_rng(800, k)
        mu0, mu1 = tuple(normals(rng, 2)), tuple(normals(rng, 2) + 1.0)
        ps, pt = 0.05 + 0.9 * uniforms(rng, 2)
        cfg = GaussianLabelShiftConfig(mu0, mu1, float(ps), float(pt))
        mc = bayes_losses(sample_label_shift(cfg, 1_000_000, 8, k), cfg).mean()
        worst = max(worst, abs(mc - analytic_target_misclassification_risk(cfg)))
    ok &= worst <= 0.002
    notes.append(f"risk MC gap {worst:.5f}")
    # binary Brier variants coincide on 1e4 fuzzed inputs
    rng = make_rng(801)
    p = uniforms(rng, 10_000)
    y = (uniforms(rng, 10_000) < 0.5).astype(int)
    f = np.stack([1 - p, p], axis=1)
    b = brier_loss(f, y)
    gap = max(np.abs(top_label_brier_loss(f, y) - b).max(),
              np.abs(true_class_brier_loss(f, y) - b).max())
    ok &= gap <= 1e-12
    notes.append(f"Brier collapse gap {gap:.1e}")
    # conformal p-values of i.i.d. continuous scores are uniform
    st = ConformalMartingaleState(seed=802)
    pv = np.array([st.p_value(v) for v in normals(make_rng(802), 10_000)])
    ks = stats.kstest(pv, "uniform")
    ok &= ks.statistic < stats.kstwo.ppf(0.99, pv.size)
    notes.append(f"KS {ks.statistic:.4f}")
    # mean wealth under uniform p-values stays at most 1 (up to MC error)
    runs = 10_000
    mart = ConformalMartingaleState((runs,))
    rng = make_rng(803)
    worst_z = -math.inf
    for t in range(1, 1001):
        w = mart.update(uniforms(rng, runs))
        if t in (10, 100, 1000):
            se = w.std(ddof=1) / math.sqrt(runs)
            ok &= w.mean() <= 1 + 3 * se
            worst_z = max(worst_z, (w.mean() - 1) / se)
    notes.append(f"max (mean wealth - 1)/SE {worst_z:.2f}")
    report("criterion 8", bool(ok), "; ".join(notes))


def test_criterion_9_changepoint_arl():
    delta = 0.1
    spec = TestSpec(Mode.ABSOLUTE, 0.05, delta, source_method="pmeb", target_method="pmh")
    rep = estimate_arl_add(spec, ScenarioConfig(CFG, 0.25, 1, 1000), n_runs=500, horizon=2000,
                           seed=9, spawn_stride=10)
    arl = rep.mean_run_length_null
    report("criterion 9", arl >= 1 / delta,
           f"mean null alarm time {arl:.1f} (censored at 2000; {int((~rep.null_censored).sum())} "
           f"alarms in 500 runs; spawn stride 10)")


def test_covariate_shift():
    res = experiments.covariate_shift_experiment(n_runs=100, eps_tol=0.1, delta=0.05, seed=10)
    times = np.where(np.isfinite(res["stopping_time"]), res["stopping_time"], np.inf)
    med = float(np.median(times))
    report("covariate shift", med < 500,
           f"median stopping time {med:.1f}; rejected {np.isfinite(times).mean():.2f} of 100 runs; "
           f"mean source risk {res['source_risk'].mean():.3f}, target {res['target_risk'].mean():.3f}")


def test_source_risk_reference():
    # sanity anchor for the criteria above: analytic source risk of the default setting
    assert 0 < analytic_source_risk(CFG) < 0.5
