"""Changepoint detection by launching a fresh sequential test at every start time.

Test k only sees losses with index >= k.  The detector alarms the first time
any launched test rejects, at the global index

    N* = min_k (N_k + (k - 1)).

Under no shift each individual test falsely rejects with probability at most
delta, which gives the run-length bound E[N*] >= 1/delta.

All sub-tests of all runs share one bound state of shape ``batch + (capacity,)``.
Capacity grows by doubling as tests are spawned, and only the block of
launched tests is updated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import bounds
from .seqtest import Mode, TestSpec
from .simgen import ScenarioConfig


class ChangepointDetector:
    """Batch of independent detectors, one per entry of ``shape``.

    Parameters
    ----------
    spec:
        Test configuration shared by every launched test.
    threshold:
        Rejection threshold(s), broadcastable to ``shape``.  Use
        :meth:`from_source` to derive them from a source sample.
    spawn_stride:
        A new test starts at indices 1, 1 + s, 1 + 2s, ...  ``None`` launches a
        single test at index 1, which is the plain sequential test.
    prune_window:
        Heuristic dominance pruning.  A test is dropped once its lower bound
        has been strictly below that of another live test for this many
        consecutive evaluations.  Off by default, and the type-I guarantee
        of the full construction no longer applies when it is on.
    """

    def __init__(self, spec: TestSpec, threshold, shape=(), spawn_stride: int | None = 1,
                 prune_window: int | None = None, initial_capacity: int = 8):
        if spawn_stride is not None and spawn_stride < 1:
            raise ValueError("spawn_stride must be >= 1 or None")
        if prune_window is not None and prune_window < 1:
            raise ValueError("prune_window must be >= 1")
        self.spec = spec
        self.shape = tuple(shape)
        self.threshold = np.broadcast_to(np.asarray(threshold, dtype=float), self.shape).copy()
        self.spawn_stride = spawn_stride
        self.prune_window = prune_window
        cap = max(int(initial_capacity), 1)
        self.state = spec.new_target_state(self.shape + (cap,))
        self.n_tests = 0
        self.start = np.zeros(cap, dtype=np.int64)
        self.live = np.zeros(self.shape + (cap,), dtype=bool)
        self.dominated_for = np.zeros(self.shape + (cap,), dtype=np.int64)
        self.t = 0
        self.alarm_time = np.zeros(self.shape, dtype=np.int64)  # 0 = no alarm yet
        self.alarm_start = np.zeros(self.shape, dtype=np.int64)
        self._pending = 0

    @classmethod
    def from_source(cls, spec: TestSpec, source_losses=None, shape=(), **kwargs):
        """Bound the source risk once and build a detector around it.

        ``source_losses`` may carry one sample per detector (leading axes
        equal to ``shape``).
        """
        if spec.mode is Mode.FIXED:
            return cls(spec, spec.eps_tol, shape, **kwargs)
        sb = spec.source_bound(source_losses)
        return cls(spec, spec.threshold(np.asarray(sb.value)), shape, **kwargs)

    # -- bookkeeping -------------------------------------------------------

    @property
    def capacity(self) -> int:
        return self.start.size

    @property
    def alarmed(self) -> np.ndarray:
        return self.alarm_time > 0

    @property
    def active_tests(self) -> np.ndarray:
        """Number of live tests per detector."""
        return self.live[..., :self.n_tests].sum(axis=-1)

    def _block(self):
        lead = (slice(None),) * len(self.shape)
        return lead + (slice(0, self.n_tests),)

    def _spawn(self):
        if self.n_tests == self.capacity:
            extra = self.capacity
            self.state.append(extra)
            self.start = np.concatenate([self.start, np.zeros(extra, dtype=np.int64)])
            pad = np.zeros(self.shape + (extra,), dtype=bool)
            self.live = np.concatenate([self.live, pad], axis=-1)
            self.dominated_for = np.concatenate(
                [self.dominated_for, pad.astype(np.int64)], axis=-1)
        k = self.n_tests
        self.start[k] = self.t
        self.live[..., k] = ~self.alarmed
        self.n_tests += 1

    def _should_spawn(self) -> bool:
        if self.spawn_stride is None:
            return self.t == 1
        return (self.t - 1) % self.spawn_stride == 0

    # -- streaming ---------------------------------------------------------

    def observe(self, z) -> np.ndarray:
        """Feed one loss per detector; returns the alarm times (0 = none yet).

        Detectors that already alarmed are frozen.
        """
        z = np.broadcast_to(bounds._check_losses(z), self.shape)
        self.t += 1
        if self._should_spawn():
            self._spawn()
        blk = self._block()
        sub = self.state.take(blk, copy=False)
        live = self.live[blk] & ~self.alarmed[..., None]
        sub.update(z[..., None], where=live)
        self.state.put(blk, sub)
        self._pending += 1
        if self.spec.eval_per_loss or self._pending >= self.spec.batch_size:
            self._pending = 0
            self._evaluate(sub, live)
        return self.alarm_time

    def _evaluate(self, sub, live):
        low = np.where(live, sub.best_lower, -np.inf)
        hit = live & (low > self.threshold[..., None])
        fire = hit.any(axis=-1) & ~self.alarmed
        if fire.any():
            first = np.argmax(hit, axis=-1)
            self.alarm_time = np.where(fire, self.t, self.alarm_time)
            self.alarm_start = np.where(fire, self.start[first] if self.n_tests else 0,
                                        self.alarm_start)
        if self.prune_window is not None:
            best = low.max(axis=-1, keepdims=True)
            behind = live & (low < best)
            blk = self._block()
            counts = np.where(behind, self.dominated_for[blk] + 1, 0)
            self.dominated_for[blk] = counts
            self.live[blk] = self.live[blk] & (counts < self.prune_window)

    def flush(self) -> np.ndarray:
        if self._pending and self.n_tests:
            self._pending = 0
            blk = self._block()
            sub = self.state.take(blk, copy=False)
            self._evaluate(sub, self.live[blk] & ~self.alarmed[..., None])
        return self.alarm_time

    def alarm(self) -> int | None:
        """Alarm time of a single (unbatched) detector, or ``None``."""
        if self.shape:
            raise ValueError("alarm() is for a single detector; use alarm_time")
        return int(self.alarm_time) or None


def cp_observe(det: ChangepointDetector, z) -> tuple[ChangepointDetector, int | None]:
    det.observe(z)
    return det, det.alarm()


# --------------------------------------------------------------------------
# Monte-Carlo ARL / ADD

@dataclass
class ArlAddReport:
    """Run-length and delay estimates.

    Alarm times of censored runs (no alarm by ``horizon``) are recorded as
    ``horizon`` and flagged in the matching ``*_censored`` array.
    """

    mean_run_length_null: float
    delay_estimates: dict[int, float]
    n_runs: int
    horizon: int
    null_alarm_times: np.ndarray
    null_censored: np.ndarray
    alarm_times: dict[int, np.ndarray] = field(default_factory=dict)
    censored: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def worst_delay(self) -> float:
        """Largest mean delay over the supplied change locations."""
        return max(self.delay_estimates.values()) if self.delay_estimates else math.nan

    @property
    def null_alarm_fraction(self) -> float:
        return float(np.mean(~self.null_censored))

    def rows(self):
        """Per-run rows: (change_at or None for the null, run, alarm_time, censored)."""
        for r in range(self.n_runs):
            yield None, r, int(self.null_alarm_times[r]), bool(self.null_censored[r])
        for m in sorted(self.alarm_times):
            for r in range(self.n_runs):
                yield m, r, int(self.alarm_times[m][r]), bool(self.censored[m][r])

    def summary(self) -> dict:
        return {
            "n_runs": self.n_runs, "horizon": self.horizon,
            "mean_run_length_null": self.mean_run_length_null,
            "null_alarms": int(np.sum(~self.null_censored)),
            "null_censored": int(np.sum(self.null_censored)),
            "delay_estimates": {str(m): v for m, v in sorted(self.delay_estimates.items())},
            "censored": {str(m): int(c.sum()) for m, c in sorted(self.censored.items())},
            "worst_delay": self.worst_delay,
        }


def _run_detectors(spec: TestSpec, thresholds, streams: np.ndarray, spawn_stride,
                   prune_window=None) -> np.ndarray:
    R, T = streams.shape
    det = ChangepointDetector(spec, thresholds, (R,), spawn_stride=spawn_stride,
                              prune_window=prune_window)
    for t in range(T):
        det.observe(streams[:, t])
        if det.alarmed.all():
            break
    det.flush()
    return det.alarm_time.copy()


def estimate_arl_add(spec: TestSpec, scenario: ScenarioConfig, n_runs: int, horizon: int,
                     change_locations=(), seed: int = 0, spawn_stride: int | None = 1,
                     prune_window: int | None = None) -> ArlAddReport:
    """Simulate ``n_runs`` seeded streams of length ``horizon``.

    The null streams keep the source class marginal throughout.  For each
    change location m the class-1 marginal switches to
    ``scenario.pi1_target`` at index m, and the delay of a run is
    (N* - (m - 1))_+ with N* censored at ``horizon``.  Every location reuses
    the same per-run random numbers.
    """
    if n_runs < 1 or horizon < 1:
        raise ValueError("n_runs and horizon must be >= 1")
    if spec.mode is Mode.FIXED:
        thresholds = np.full(n_runs, spec.eps_tol)
    else:
        src = np.stack([scenario.source_losses(seed, r) for r in range(n_runs)])
        sb = spec.source_bound(src)
        thresholds = np.broadcast_to(spec.threshold(np.asarray(sb.value)), (n_runs,))

    def simulate(cfg: ScenarioConfig):
        streams = np.stack([cfg.target_losses(horizon, seed, r) for r in range(n_runs)])
        at = _run_detectors(spec, thresholds, streams, spawn_stride, prune_window)
        cens = at == 0
        return np.where(cens, horizon, at), cens

    null_cfg = ScenarioConfig(scenario.source, scenario.source.pi1_source, 1, scenario.n_source)
    null_times, null_cens = simulate(null_cfg)
    times, cens, delays = {}, {}, {}
    for m in change_locations:
        m = int(m)
        cfg = ScenarioConfig(scenario.source, scenario.pi1_target, m, scenario.n_source)
        times[m], cens[m] = simulate(cfg)
        delays[m] = float(np.mean(np.maximum(times[m] - (m - 1), 0)))
    return ArlAddReport(float(null_times.mean()), delays, n_runs, horizon,
                        null_times, null_cens, times, cens)
