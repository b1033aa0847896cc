"""Baselines: CLT lower bounds (optionally Bonferroni-corrected) and conformal
test martingales.

Neither gives what the sequential risk test gives.  An uncorrected CLT bound
loses its coverage guarantee once it is monitored continuously.  A conformal
martingale reacts to any departure from exchangeability, harmful or not.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np
from scipy import special, stats

from . import bounds
from .losses import check_distribution, mass_above
from .simgen import make_rng, uniforms


class Correction(str, Enum):
    NONE = "none"
    POWER = "power"
    POLYNOMIAL = "polynomial"


def corrected_delta(delta: float, eval_index, correction: Correction | str):
    """Level spent on the ``eval_index``-th evaluation (1-based)."""
    correction = Correction(correction)
    k = np.asarray(eval_index, dtype=float)
    if correction is Correction.NONE:
        return delta * np.ones_like(k)
    if correction is Correction.POWER:
        return delta * np.exp2(-k)
    return 6 / math.pi ** 2 * delta / k ** 2


class CLTBoundState:
    """Running mean minus z_delta * sd / sqrt(t), vectorized over a batch of streams.

    ``update`` only accumulates; ``lower`` evaluates (and counts an evaluation
    for the Bonferroni schedules).  ``observe`` does both.
    """

    def __init__(self, delta: float, shape=(), correction: Correction | str = Correction.NONE):
        if not 0 < delta < 1:
            raise ValueError("delta must be in (0, 1)")
        self.delta = delta
        self.correction = Correction(correction)
        self.t = 0
        self.sum_z = np.zeros(shape)
        self.sum_z_sq = np.zeros(shape)
        self.eval_count = 0

    def update(self, z):
        z = bounds._check_losses(z)
        self.t += 1
        self.sum_z = self.sum_z + z
        self.sum_z_sq = self.sum_z_sq + z * z

    def lower(self):
        self.eval_count += 1
        if self.t < 2:
            return np.zeros_like(self.sum_z)
        d = corrected_delta(self.delta, self.eval_count, self.correction)
        # isf handles the tiny levels of the power schedule without overflow
        zq = stats.norm.isf(d)
        mean = self.sum_z / self.t
        var = np.maximum(self.sum_z_sq - self.t * mean ** 2, 0.0) / (self.t - 1)
        return mean - zq * np.sqrt(var / self.t)

    def observe(self, z):
        self.update(z)
        return self.lower()


def clt_lower(state: CLTBoundState, z):
    return state, state.observe(z)


# --------------------------------------------------------------------------
# conformal test martingales

def conformity_score_regression(y, y_hat):
    return -np.abs(np.asarray(y, dtype=float) - np.asarray(y_hat, dtype=float))


def conformity_score_classification(f, y):
    """1 minus the predicted mass of labels strictly more likely than ``y``."""
    out = 1.0 - mass_above(check_distribution(f), y)
    return float(out) if np.ndim(out) == 0 else out


class BettingKind(str, Enum):
    SIMPLE_BET = "simple-bet"
    SIMPLE_MIXTURE = "simple-mixture"


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(256)
_EPS_NODES = 0.5 * (_GL_NODES + 1.0)
_LOG_EPS_WEIGHTS = np.log(0.5 * _GL_WEIGHTS)


def log_simple_mixture(n, sum_log_p):
    """log of int_0^1 prod_i eps p_i^(eps - 1) d eps = int eps^n exp((eps - 1) S) d eps.

    Evaluated with 256-node Gauss-Legendre quadrature in log space.
    """
    n = np.asarray(n, dtype=float)[..., None]
    s = np.asarray(sum_log_p, dtype=float)[..., None]
    terms = n * np.log(_EPS_NODES) + (_EPS_NODES - 1.0) * s + _LOG_EPS_WEIGHTS
    return special.logsumexp(terms, axis=-1)


class ConformalMartingaleState:
    """Conformal p-values fed into a betting martingale, batched over streams.

    The score history is kept in full (memory grows linearly with n) in a
    buffer that doubles when full.
    """

    def __init__(self, shape=(), kind: BettingKind | str = BettingKind.SIMPLE_MIXTURE,
                 epsilon: float = 0.5, seed: int = 0, stream: int = 0):
        self.kind = BettingKind(kind)
        if self.kind is BettingKind.SIMPLE_BET and not 0 < epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        self.epsilon = epsilon
        self.shape = tuple(shape)
        self._scores = np.zeros(self.shape + (64,))
        self.n_scores = 0
        self.n = 0
        self.sum_log_p = np.zeros(self.shape)
        self.log_wealth = np.zeros(self.shape)
        self.rng = make_rng(seed, stream, 0xC0F)

    def p_value(self, alpha_n):
        """Rank p-value of the new score among all scores so far (itself included)."""
        alpha_n = np.broadcast_to(np.asarray(alpha_n, dtype=float), self.shape)
        if self.n_scores == self._scores.shape[-1]:
            self._scores = np.concatenate([self._scores, np.zeros_like(self._scores)], axis=-1)
        self._scores[..., self.n_scores] = alpha_n
        self.n_scores += 1
        n = self.n_scores
        hist = self._scores[..., :n]
        below = np.sum(hist < alpha_n[..., None], axis=-1)
        ties = np.sum(hist == alpha_n[..., None], axis=-1)
        u = uniforms(self.rng, self.shape)
        p = (below + u * ties) / n
        return float(p) if p.ndim == 0 else p

    @property
    def scores(self) -> np.ndarray:
        return self._scores[..., :self.n_scores]

    def update(self, p):
        """Bet on one p-value; returns the new wealth S_n."""
        p = np.broadcast_to(np.asarray(p, dtype=float), self.shape)
        if np.any(p <= 0) or np.any(p > 1):
            raise ValueError("p-values must lie in (0, 1]")
        self.n += 1
        logp = np.log(p)
        self.sum_log_p = self.sum_log_p + logp
        if self.kind is BettingKind.SIMPLE_BET:
            e = self.epsilon
            self.log_wealth = self.log_wealth + math.log(e) + (e - 1) * logp
        else:
            self.log_wealth = log_simple_mixture(self.n, self.sum_log_p)
        w = np.exp(self.log_wealth)
        return float(w) if w.ndim == 0 else w

    def observe(self, score):
        return self.update(self.p_value(score))


def conformal_p_value(state: ConformalMartingaleState, alpha_n):
    return state.p_value(alpha_n)


def martingale_update(state: ConformalMartingaleState, p):
    return state, state.update(p)


def ville_threshold(delta: float) -> float:
    return 1.0 / delta


def clt_vs_betting_experiment(n_runs: int = 1000, horizon: int = 1000, p: float = 0.6,
                              delta: float = 0.1, n_sizes: int = 100, seed: int = 0,
                              grid_resolution: float = 1e-3) -> dict[str, np.ndarray]:
    """Miscoverage of the CLT and betting lower bounds on Bernoulli(p) streams.

    Returns columns over ``n_sizes`` log-spaced sample sizes in [20, horizon]:
    fixed-time miscoverage (bound above p at that size), cumulative
    miscoverage (above p at some time between the first size and t), and the run-averaged lower
    bounds of the uncorrected, polynomially corrected CLT and betting bounds.
    """
    sizes = np.unique(np.round(np.geomspace(20, horizon, n_sizes)).astype(int))
    z = np.stack([(uniforms(make_rng(seed, r), horizon) < p).astype(float) for r in range(n_runs)])
    clt = CLTBoundState(delta, (n_runs,))
    poly = CLTBoundState(delta, (n_runs,), Correction.POLYNOMIAL)
    bet = bounds.BettingState(delta, (n_runs,), side=bounds.Side.LOWER,
                              grid_resolution=grid_resolution)
    clt_ever = np.zeros(n_runs, bool)
    bet_ever = np.zeros(n_runs, bool)
    cols = {k: [] for k in ("t", "clt_fixed", "betting_fixed", "clt_cumulative",
                            "betting_cumulative", "clt_mean_lower", "clt_poly_mean_lower",
                            "betting_mean_lower")}
    want = set(sizes.tolist())
    for t in range(horizon):
        clt_lo = clt.observe(z[:, t])
        poly_lo = poly.observe(z[:, t])
        bet_lo, _ = bet.update(z[:, t])
        if t + 1 >= sizes[0]:
            clt_ever |= clt_lo > p
            bet_ever |= bet_lo > p
        if t + 1 in want:
            cols["t"].append(t + 1)
            cols["clt_fixed"].append(np.mean(clt_lo > p))
            cols["betting_fixed"].append(np.mean(bet_lo > p))
            cols["clt_cumulative"].append(clt_ever.mean())
            cols["betting_cumulative"].append(bet_ever.mean())
            cols["clt_mean_lower"].append(clt_lo.mean())
            cols["clt_poly_mean_lower"].append(poly_lo.mean())
            cols["betting_mean_lower"].append(bet_lo.mean())
    return {k: np.asarray(v) for k, v in cols.items()}
