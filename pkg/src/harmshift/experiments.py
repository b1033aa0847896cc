"""Seeded simulation studies built from the library pieces.

Each function returns plain columns (dicts of numpy arrays or lists of row
dicts) ready to be written as CSV by the command-line tool.  Replications
are paired: run ``r`` of every setting and method uses the same source
sample, and the target streams for a given setting are shared across methods.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import bounds, seqtest
from .baselines import BettingKind, ConformalMartingaleState, conformity_score_classification
from .bounds import Method
from .seqtest import Mode, TestSpec
from .simgen import (CIRCLE_SOURCE, CIRCLE_TARGET, DriftSchedule, GaussianLabelShiftConfig,
                     ScenarioConfig, analytic_source_risk, analytic_target_misclassification_risk,
                     bayes_losses, bayes_posterior, paper_drift_schedule, running_risk,
                     sample_circle_shift, sample_drift, sample_label_shift)

DEFAULT_CONFIG = GaussianLabelShiftConfig()

# (name, source bound, target confidence sequence)
GRID_METHODS = (
    ("betting", Method.BETTING, Method.BETTING),
    ("pmeb", Method.PMEB, Method.PMEB),
    ("hoeffding", Method.HOEFFDING, Method.PMH),
)


def paper_pi_grid(n: int = 20) -> np.ndarray:
    return np.linspace(0.1, 0.9, n)


def harm_boundary(config: GaussianLabelShiftConfig = DEFAULT_CONFIG, eps_tol: float = 0.05,
                  mode: Mode | str = Mode.ABSOLUTE) -> float:
    """Class-1 target marginal at which the analytic target risk hits the tolerance.

    Target risk is linear in the marginal, so the root is unique when it exists.
    """
    mode = Mode(mode)
    rs = analytic_source_risk(config)
    limit = rs + eps_tol if mode is Mode.ABSOLUTE else (1 + eps_tol) * rs

    def gap(p):
        return analytic_target_misclassification_risk(config.with_target(p)) - limit

    lo, hi = 1e-9, 1 - 1e-9
    if np.sign(gap(lo)) == np.sign(gap(hi)):
        return math.nan
    return float(optimize.brentq(gap, lo, hi, xtol=1e-12))


def source_loss_matrix(config: GaussianLabelShiftConfig, n_source: int, n_runs: int,
                       seed: int) -> np.ndarray:
    sc = ScenarioConfig(config, config.pi1_source, 1, n_source)
    return np.stack([sc.source_losses(seed, r) for r in range(n_runs)])


def target_loss_matrix(config: GaussianLabelShiftConfig, pi1: float, horizon: int, n_runs: int,
                       seed: int, setting: int = 0) -> np.ndarray:
    return np.stack([
        bayes_losses(sample_label_shift(config, horizon, seed, r, 1, setting, pi1=pi1), config)
        for r in range(n_runs)])


def label_shift_grid(pis=None, n_reps: int = 250, max_samples: int = 2000, batch_size: int = 50,
                     eps_tol: float = 0.05, delta: float = 0.05, n_source: int = 1000,
                     config: GaussianLabelShiftConfig = DEFAULT_CONFIG, methods=GRID_METHODS,
                     seed: int = 0, eval_per_loss: bool = False) -> list[dict]:
    """Rejection proportion and mean stopping time over a grid of target marginals.

    Target losses arrive in batches of ``batch_size`` and the test is evaluated
    at the end of each batch.  Runs that never reject are counted at
    ``max_samples`` in the mean stopping time.
    """
    pis = paper_pi_grid() if pis is None else np.atleast_1d(np.asarray(pis, dtype=float))
    source = source_loss_matrix(config, n_source, n_reps, seed)
    rs = analytic_source_risk(config)
    thresholds = {}
    for name, sm, tm in methods:
        spec = TestSpec(Mode.ABSOLUTE, eps_tol, delta, source_method=sm, target_method=tm,
                        batch_size=batch_size, eval_per_loss=eval_per_loss)
        sb = spec.source_bound(source)
        thresholds[name] = (spec, spec.threshold(np.asarray(sb.value)), sb)
    rows = []
    for i, pi in enumerate(pis):
        target = target_loss_matrix(config, float(pi), max_samples, n_reps, seed, i)
        risk = analytic_target_misclassification_risk(config.with_target(float(pi)))
        for name, _, _ in methods:
            spec, thr, sb = thresholds[name]
            res = seqtest.run_batch(spec, None, target, thresholds=thr)
            rows.append({
                "pi1_target": float(pi), "method": name,
                "rejection_proportion": float(res.rejected.mean()),
                "mean_stopping_time": float(res.censored_times(max_samples).mean()),
                "target_risk": risk, "source_risk": rs,
                "harmful": bool(risk > rs + eps_tol),
                "mean_source_upper": float(np.mean(sb.value)),
            })
    return rows


def transition_point(pis, proportions, level: float = 0.5) -> float:
    """First grid marginal whose rejection proportion reaches ``level``."""
    pis, proportions = np.asarray(pis), np.asarray(proportions)
    hit = np.flatnonzero(proportions >= level)
    return float(pis[hit[0]]) if hit.size else math.nan


def bounds_compare(ns=(50, 100, 200, 500, 1000, 2000, 5000), n_draws: int = 1000,
                   delta: float = 0.025, methods=(Method.BETTING, Method.PMEB, Method.HOEFFDING),
                   config: GaussianLabelShiftConfig = DEFAULT_CONFIG, seed: int = 0) -> list[dict]:
    """Mean upper confidence bound on the source risk per sample size and method."""
    rows = []
    for n in ns:
        z = source_loss_matrix(config, int(n), n_draws, seed + int(n))
        for m in methods:
            sb = bounds.fixed_upper_bound(z, delta, m)
            rows.append({"n": int(n), "method": Method(m).value,
                         "mean_upper": float(np.mean(sb.value)),
                         "mean_eps_appr": float(np.mean(sb.eps_appr)),
                         "mean_empirical": float(np.mean(sb.empirical_mean))})
    return rows


@dataclass
class DriftResult:
    stopping_times: np.ndarray  # inf where no rejection
    undercovered: np.ndarray  # lower bound above the running risk at some time
    lower: np.ndarray  # (R, T) lower bound trajectories
    running_risk: np.ndarray
    thresholds: np.ndarray

    @property
    def rejection_fraction(self) -> float:
        return float(np.isfinite(self.stopping_times).mean())


def drift_experiment(n_runs: int = 200, eps_tol: float = 0.05, delta: float = 0.05,
                     schedule: DriftSchedule | None = None, n_source: int = 1000,
                     source_method: Method = Method.BETTING,
                     config: GaussianLabelShiftConfig = DEFAULT_CONFIG, seed: int = 0,
                     keep_lower: bool = False) -> DriftResult:
    """Running-risk monitoring with a CM-EB target sequence on a drifting stream.

    The lower bound reported for coverage is the per-time value, not the
    running maximum: the running risk moves, so intersecting over time is not
    valid for it.  The test decision is the same either way.
    """
    schedule = schedule or paper_drift_schedule()
    spec = TestSpec(Mode.ABSOLUTE, eps_tol, delta, source_method=source_method,
                    target_method=Method.CMEB)
    sb = spec.source_bound(source_loss_matrix(config, n_source, n_runs, seed))
    thr = np.broadcast_to(spec.threshold(np.asarray(sb.value)), (n_runs,))
    streams = np.stack([bayes_losses(sample_drift(schedule, config, seed, r, 1), config)
                        for r in range(n_runs)])
    rr = running_risk(schedule, config)
    state = spec.new_target_state((n_runs,))
    stop = np.full(n_runs, np.inf)
    under = np.zeros(n_runs, bool)
    lows = np.zeros((n_runs, schedule.length)) if keep_lower else np.zeros((n_runs, 0))
    for t in range(schedule.length):
        low, _ = state.update(streams[:, t])
        under |= low > rr[t]
        stop = np.where(np.isinf(stop) & (low > thr), t + 1, stop)
        if keep_lower:
            lows[:, t] = low
    return DriftResult(stop, under, lows, rr, np.asarray(thr))


def covariate_shift_experiment(n_runs: int = 100, eps_tol: float = 0.1, delta: float = 0.05,
                               n_train: int = 200, n_source: int = 100, max_samples: int = 2000,
                               seed: int = 0) -> dict[str, np.ndarray]:
    """Logistic regression fit on the source arc, monitored on the full circle."""
    from sklearn.linear_model import LogisticRegression

    src, tgt, accs = [], [], []
    for r in range(n_runs):
        train = sample_circle_shift(CIRCLE_SOURCE, n_train, seed, r, 0)
        clf = LogisticRegression().fit(train.x, train.y)
        hold = sample_circle_shift(CIRCLE_SOURCE, n_source, seed, r, 1)
        stream = sample_circle_shift(CIRCLE_TARGET, max_samples, seed, r, 2)
        src.append((clf.predict(hold.x) != hold.y).astype(float))
        tgt.append((clf.predict(stream.x) != stream.y).astype(float))
    spec = TestSpec(Mode.ABSOLUTE, eps_tol, delta, source_method=Method.BETTING,
                    target_method=Method.CMEB)
    res = seqtest.run_batch(spec, np.stack(src), np.stack(tgt))
    return {"stopping_time": res.stopping_times, "threshold": res.thresholds,
            "source_risk": np.stack(src).mean(axis=1), "target_risk": np.stack(tgt).mean(axis=1)}


# --------------------------------------------------------------------------
# conformal test martingale scenarios

def conformal_schedules(horizon: int = 2000) -> dict[str, DriftSchedule]:
    return {
        "cold-start": DriftSchedule(((0.75, horizon),)),
        "warm-start": DriftSchedule(((0.25, 100), (0.75, max(horizon - 100, 1)))),
        "slow-benign": DriftSchedule.linear(0.1, 0.05, 0.45, 75),
        "slow-harmful": DriftSchedule.linear(0.5, 0.05, 0.85, 75),
        "sharp": DriftSchedule.linear(0.1, 0.2, 0.9, 150),
    }


def conformal_scores(schedule: DriftSchedule, config: GaussianLabelShiftConfig, seed: int,
                     run: int) -> np.ndarray:
    s = sample_drift(schedule, config, seed, run, 1)
    p = bayes_posterior(s.x, config)
    return conformity_score_classification(np.stack([1 - p, p], axis=-1), s.y)


def conformal_experiment(scenario: str, n_runs: int = 50, horizon: int = 2000, delta: float = 0.05,
                         kind: BettingKind | str = BettingKind.SIMPLE_MIXTURE,
                         config: GaussianLabelShiftConfig = DEFAULT_CONFIG,
                         seed: int = 0) -> dict[str, np.ndarray]:
    """Wealth trajectories (runs x time) of conformal martingales on one scenario."""
    schedule = conformal_schedules(horizon)[scenario]
    scores = np.stack([conformal_scores(schedule, config, seed, r) for r in range(n_runs)])
    mart = ConformalMartingaleState((n_runs,), kind, seed=seed, stream=1)
    T = schedule.length
    wealth = np.zeros((n_runs, T))
    for t in range(T):
        wealth[:, t] = mart.observe(scores[:, t])
    crossed = wealth >= 1 / delta
    first = np.where(crossed.any(axis=1), np.argmax(crossed, axis=1) + 1, np.inf)
    return {"wealth": wealth, "crossing_time": first, "marginals": schedule.marginals()}
