"""Seeded synthetic data with analytic ground truth.

Random numbers come from numpy's Philox4x32-10 counter-based generator keyed
by ``SeedSequence([seed, *stream_keys])``.  Uniforms are formed as
``(k + 0.5) / 2**53`` from 53-bit integers (never exactly 0 or 1) and Gaussian
variates by the inverse normal CDF (``scipy.special.ndtri``), so a given seed
produces the same stream on any platform.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy import special

TWO_53 = float(2 ** 53)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


def uniforms(rng: np.random.Generator, size) -> np.ndarray:
    k = rng.integers(0, 2 ** 53, size=size, dtype=np.int64)
    return (k + 0.5) / TWO_53


def normals(rng: np.random.Generator, size) -> np.ndarray:
    return special.ndtri(uniforms(rng, size))


def norm_cdf(x):
    """Standard normal CDF (Cephes ``ndtr``, erf/erfc rational approximations)."""
    return special.ndtr(x)


@dataclass(frozen=True)
class GaussianLabelShiftConfig:
    """Two Gaussian classes with identity covariance; only P(Y) shifts."""

    mu0: tuple[float, float] = (-1.0, 0.0)
    mu1: tuple[float, float] = (1.0, 0.0)
    pi1_source: float = 0.25
    pi1_target: float = 0.25

    def __post_init__(self):
        for p in (self.pi1_source, self.pi1_target):
            if not 0 < p < 1:
                raise ValueError("class-1 marginals must lie in (0, 1)")

    def with_target(self, pi1_target: float) -> "GaussianLabelShiftConfig":
        return GaussianLabelShiftConfig(self.mu0, self.mu1, self.pi1_source, float(pi1_target))


@dataclass
class LabeledSamples:
    """A batch of labeled points; ``running_risk`` is set by drift generators."""

    x: np.ndarray
    y: np.ndarray
    running_risk: np.ndarray | None = None

    def __len__(self):
        return len(self.y)

    def records(self) -> Iterator[dict]:
        for t in range(len(self)):
            rr = None if self.running_risk is None else float(self.running_risk[t])
            yield {"x": [float(v) for v in self.x[t]], "y": int(self.y[t]), "t": t + 1,
                   "running_risk": rr}

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())


def _log_odds(x, config: GaussianLabelShiftConfig):
    mu0, mu1 = np.asarray(config.mu0, float), np.asarray(config.mu1, float)
    x = np.asarray(x, dtype=float)
    return (math.log(config.pi1_source / (1 - config.pi1_source))
            + x @ (mu1 - mu0) - 0.5 * (mu1 @ mu1 - mu0 @ mu0))


def bayes_posterior(x, config: GaussianLabelShiftConfig):
    """P_source(Y = 1 | X = x) for the Gaussian label-shift model."""
    p = special.expit(_log_odds(x, config))
    return float(p) if np.ndim(p) == 0 else p


def bayes_predict(x, config: GaussianLabelShiftConfig) -> np.ndarray:
    return (np.asarray(_log_odds(x, config)) >= 0).astype(np.int64)


def analytic_target_misclassification_risk(config: GaussianLabelShiftConfig) -> float:
    """0-1 risk on the target of the source Bayes rule (exact, via the normal CDF)."""
    mu0, mu1 = np.asarray(config.mu0, float), np.asarray(config.mu1, float)
    d = mu1 - mu0
    scale = float(np.sqrt(d @ d))
    if scale == 0:
        raise ValueError("class means coincide")
    pi1s = config.pi1_source
    thr = math.log((1 - pi1s) / pi1s) + 0.5 * (mu1 @ mu1 - mu0 @ mu0)
    miss1 = norm_cdf((thr - mu1 @ d) / scale)
    miss0 = 1 - norm_cdf((thr - mu0 @ d) / scale)
    return float(config.pi1_target * miss1 + (1 - config.pi1_target) * miss0)


def analytic_source_risk(config: GaussianLabelShiftConfig) -> float:
    return analytic_target_misclassification_risk(config.with_target(config.pi1_source))


def sample_label_shift(config: GaussianLabelShiftConfig, n: int, seed: int, *keys: int,
                       pi1: float | None = None) -> LabeledSamples:
    """``n`` i.i.d. points with class-1 probability ``pi1`` (default: the target marginal)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed, *keys)
    p = config.pi1_target if pi1 is None else pi1
    y = (uniforms(rng, n) < p).astype(np.int64)
    means = np.where(y[:, None] == 1, np.asarray(config.mu1), np.asarray(config.mu0))
    x = means + normals(rng, (n, 2))
    return LabeledSamples(x, y)


def bayes_losses(samples: LabeledSamples, config: GaussianLabelShiftConfig) -> np.ndarray:
    """0-1 losses of the source Bayes rule on ``samples``."""
    return (bayes_predict(samples.x, config) != samples.y).astype(float)


@dataclass(frozen=True)
class DriftSchedule:
    segments: tuple[tuple[float, int], ...]

    def __post_init__(self):
        if not self.segments:
            raise ValueError("empty schedule")
        for p, n in self.segments:
            if not 0 < p < 1 or int(n) < 1:
                raise ValueError("segments need marginals in (0, 1) and counts >= 1")

    @property
    def length(self) -> int:
        return sum(int(n) for _, n in self.segments)

    def marginals(self) -> np.ndarray:
        return np.concatenate([np.full(int(n), p) for p, n in self.segments])

    @classmethod
    def linear(cls, start: float, step: float, stop: float, count: int,
               hold: int = 0) -> "DriftSchedule":
        """Raise the marginal by ``step`` every ``count`` points up to ``stop``.

        ``hold`` extra points are appended at the final marginal.
        """
        values = []
        p = start
        while p <= stop + 1e-9:
            values.append(round(p, 10))
            p += step
        segs = [(v, count) for v in values]
        if hold:
            segs.append((values[-1], hold))
        return cls(tuple(segs))


PAPER_DRIFT_HOLD = 2600


def paper_drift_schedule(hold: int = PAPER_DRIFT_HOLD) -> DriftSchedule:
    """0.25 -> 0.85 in steps of 0.1 every 200 points, then ``hold`` points at 0.85."""
    return DriftSchedule.linear(0.25, 0.1, 0.85, 200, hold=hold)


def running_risk(schedule: DriftSchedule, config: GaussianLabelShiftConfig) -> np.ndarray:
    """Average analytic risk of the first t points, for every t (prefix sums)."""
    risks = np.concatenate([
        np.full(int(n), analytic_target_misclassification_risk(config.with_target(p)))
        for p, n in schedule.segments])
    return np.cumsum(risks) / np.arange(1, risks.size + 1)


def sample_drift(schedule: DriftSchedule, config: GaussianLabelShiftConfig, seed: int,
                 *keys: int) -> LabeledSamples:
    rng = make_rng(seed, *keys)
    n = schedule.length
    p = schedule.marginals()
    y = (uniforms(rng, n) < p).astype(np.int64)
    means = np.where(y[:, None] == 1, np.asarray(config.mu1), np.asarray(config.mu0))
    x = means + normals(rng, (n, 2))
    return LabeledSamples(x, y, running_risk(schedule, config))


@dataclass(frozen=True)
class CircleShiftConfig:
    """Points near the origin (label 0) or near the unit circle (label 1 mostly)."""

    angle_low: float = -math.pi / 3
    angle_high: float = math.pi / 3
    noise_var: float = 1 / 36

    def __post_init__(self):
        if not self.angle_low < self.angle_high or self.noise_var <= 0:
            raise ValueError("invalid arc or noise")


CIRCLE_SOURCE = CircleShiftConfig()
CIRCLE_TARGET = CircleShiftConfig(0.0, 2 * math.pi)


def circle_label(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return (np.sum(x ** 2, axis=-1) >= 0.5).astype(np.int64)


def sample_circle_shift(config: CircleShiftConfig, n: int, seed: int, *keys: int) -> LabeledSamples:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed, *keys)
    on_circle = uniforms(rng, n) < 0.5
    phi = config.angle_low + (config.angle_high - config.angle_low) * uniforms(rng, n)
    centers = np.where(on_circle[:, None], np.stack([np.cos(phi), np.sin(phi)], axis=1), 0.0)
    x = centers + math.sqrt(config.noise_var) * normals(rng, (n, 2))
    return LabeledSamples(x, circle_label(x))


def condition_number(pi_source: Sequence[float], pi_target: Sequence[float]) -> float:
    """max_y w_y / min_{y: w_y > 0} w_y with w_y = pi_target_y / pi_source_y.

    Returns ``math.inf`` when the target puts mass on a class absent from the source.
    """
    ps = np.asarray(pi_source, dtype=float)
    pt = np.asarray(pi_target, dtype=float)
    if ps.shape != pt.shape or ps.ndim != 1:
        raise ValueError("marginals must be vectors of equal length")
    for p in (ps, pt):
        if np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
            raise ValueError("marginals must be probability vectors")
    if np.any((ps == 0) & (pt > 0)):
        return math.inf
    keep = ps > 0
    w = pt[keep] / ps[keep]
    nz = w[w > 0]
    return float(w.max() / nz.min())


@dataclass(frozen=True)
class ScenarioConfig:
    """Declarative label-shift experiment: source sample, then a target stream.

    Target points before ``change_at`` follow the source marginal; from
    ``change_at`` (1-based) onward the class-1 marginal is ``pi1_target``.
    """

    source: GaussianLabelShiftConfig = field(default_factory=GaussianLabelShiftConfig)
    pi1_target: float = 0.25
    change_at: int = 1
    n_source: int = 1000

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        src = d.pop("source", {})
        src = GaussianLabelShiftConfig(**{k: tuple(v) if isinstance(v, list) else v
                                          for k, v in src.items()})
        return cls(source=src, **d)

    def source_losses(self, seed: int, run: int) -> np.ndarray:
        s = sample_label_shift(self.source, self.n_source, seed, run, 0,
                               pi1=self.source.pi1_source)
        return bayes_losses(s, self.source)

    def target_losses(self, n: int, seed: int, run: int) -> np.ndarray:
        pre = max(min(self.change_at - 1, n), 0)
        schedule = []
        if pre:
            schedule.append((self.source.pi1_source, pre))
        if n - pre:
            schedule.append((self.pi1_target, n - pre))
        s = sample_drift(DriftSchedule(tuple(schedule)), self.source, seed, run, 1)
        return bayes_losses(s, self.source)
