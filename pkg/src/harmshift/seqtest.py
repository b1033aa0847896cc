"""Sequential test for a harmful increase in risk.

A :class:`MonitorState` holds an upper confidence bound on the source risk
and a time-uniform lower confidence sequence on the target risk.  It rejects
(raises an alarm) the first time the target lower bound strictly exceeds the
threshold implied by the test mode:

* ``abs``:   U_S + eps_tol
* ``rel``:   (1 + eps_tol) * U_S
* ``fixed``: r0 (no source sample needed)

The false-alarm probability over the whole (infinite) stream is at most
``delta = delta_s + delta_t``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from . import bounds
from .bounds import Method, Side, SourceBound


class Mode(str, Enum):
    ABSOLUTE = "abs"
    RELATIVE = "rel"
    FIXED = "fixed"


class Decision(str, Enum):
    CONTINUE = "continue"
    REJECT = "reject"


@dataclass(frozen=True)
class StoppingTime:
    """First crossing time, or ``None`` for "never crossed"."""

    n: int | None = None

    @property
    def finite(self) -> bool:
        return self.n is not None

    def __str__(self):
        return "inf" if self.n is None else str(self.n)


@dataclass(frozen=True)
class TestSpec:
    """Configuration of one sequential test.

    In ``fixed`` mode ``eps_tol`` is the absolute risk threshold r0 and the
    whole budget goes to the target bound.
    """

    __test__ = False

    mode: Mode = Mode.ABSOLUTE
    eps_tol: float = 0.05
    delta: float = 0.05
    delta_split: tuple[float, float] | None = None
    source_method: Method = Method.BETTING
    target_method: Method = Method.BETTING
    batch_size: int = 1
    eval_per_loss: bool = True
    source_kwargs: dict = field(default_factory=dict, hash=False, compare=False)
    target_kwargs: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "source_method", Method(self.source_method))
        object.__setattr__(self, "target_method", Method(self.target_method))
        if not 0 < self.delta < 1:
            raise ValueError("delta must be in (0, 1)")
        if self.eps_tol < 0:
            raise ValueError("eps_tol must be >= 0")
        if self.mode is Mode.FIXED and self.eps_tol > 1:
            raise ValueError("fixed threshold must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.target_method is Method.HOEFFDING:
            raise ValueError("the target bound must be a confidence sequence")
        if self.delta_split is None:
            split = (0.0, self.delta) if self.mode is Mode.FIXED else (self.delta / 2, self.delta / 2)
            object.__setattr__(self, "delta_split", split)
        ds, dt = map(float, self.delta_split)
        object.__setattr__(self, "delta_split", (ds, dt))
        if ds + dt != self.delta:
            raise ValueError("delta_split must add up to delta")
        if not 0 < dt < 1 or (self.mode is not Mode.FIXED and not 0 < ds < 1):
            raise ValueError("each part of delta_split must lie in (0, 1)")

    @property
    def delta_s(self) -> float:
        return self.delta_split[0]

    @property
    def delta_t(self) -> float:
        return self.delta_split[1]

    @property
    def hypothesis(self) -> str:
        """Which null is being tested: i.i.d. target risk or running risk."""
        return "running-risk" if self.target_method is Method.CMEB else "iid"

    def threshold(self, source_upper):
        if self.mode is Mode.ABSOLUTE:
            return source_upper + self.eps_tol
        if self.mode is Mode.RELATIVE:
            return (1 + self.eps_tol) * source_upper
        return self.eps_tol

    def source_bound(self, source_losses) -> SourceBound | None:
        if self.mode is Mode.FIXED:
            return None
        z = np.asarray(source_losses, dtype=float)
        if z.size == 0:
            raise ValueError("a source sample is required in abs/rel mode")
        return bounds.fixed_upper_bound(z, self.delta_s, self.source_method, **self.source_kwargs)

    def new_target_state(self, shape=()) -> bounds.BoundState:
        return bounds.make_state(self.target_method, self.delta_t, shape, side=Side.LOWER,
                                 **self.target_kwargs)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value, "eps_tol": float(self.eps_tol).hex(),
            "delta": float(self.delta).hex(),
            "delta_split": [float(d).hex() for d in self.delta_split],
            "source_method": self.source_method.value, "target_method": self.target_method.value,
            "batch_size": self.batch_size, "eval_per_loss": self.eval_per_loss,
            "source_kwargs": self.source_kwargs, "target_kwargs": self.target_kwargs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TestSpec":
        return cls(mode=d["mode"], eps_tol=float.fromhex(d["eps_tol"]),
                   delta=float.fromhex(d["delta"]),
                   delta_split=tuple(float.fromhex(v) for v in d["delta_split"]),
                   source_method=d["source_method"], target_method=d["target_method"],
                   batch_size=d["batch_size"], eval_per_loss=d["eval_per_loss"],
                   source_kwargs=d.get("source_kwargs", {}), target_kwargs=d.get("target_kwargs", {}))


EventLogger = Callable[[int, float, float, Decision], None]


class MonitorState:
    """One monitored stream.  Use :func:`init_monitor` to build one."""

    def __init__(self, spec: TestSpec, source_bound: SourceBound | None,
                 target: bounds.BoundState | None = None, trace_len: int = 0):
        self.spec = spec
        self.source_bound = source_bound
        self.target = target if target is not None else spec.new_target_state()
        self.threshold = float(spec.threshold(None if source_bound is None else source_bound.value))
        self.t = 0
        self.rejected_at: int | None = None
        self.trace: deque = deque(maxlen=trace_len or None) if trace_len else deque(maxlen=0)
        self._pending = 0

    @property
    def decision(self) -> Decision:
        return Decision.CONTINUE if self.rejected_at is None else Decision.REJECT

    @property
    def lower(self) -> float:
        return float(self.target.best_lower)

    def observe(self, target_losses, log: EventLogger | None = None) -> Decision:
        """Feed a batch of target losses; returns the decision after the batch.

        Once rejected the monitor ignores further data.
        """
        z = np.atleast_1d(np.asarray(target_losses, dtype=float))
        if self.rejected_at is not None:
            return Decision.REJECT
        bounds._check_losses(z)
        for zi in z:
            self.target.update(zi)
            self.t += 1
            self._pending += 1
            if self.spec.eval_per_loss or self._pending >= self.spec.batch_size:
                self._pending = 0
                if self._evaluate(log):
                    break
        return self.decision

    def flush(self, log: EventLogger | None = None) -> Decision:
        """Evaluate a partially filled batch (end of stream in batch-end mode)."""
        if self.rejected_at is None and self._pending:
            self._pending = 0
            self._evaluate(log)
        return self.decision

    def _evaluate(self, log) -> bool:
        low = self.lower
        if self.trace.maxlen:
            self.trace.append((self.t, low))
        crossed = low > self.threshold
        if crossed:
            self.rejected_at = self.t
        if log is not None:
            log(self.t, low, self.threshold, self.decision)
        return crossed

    def stopping_time(self) -> StoppingTime:
        return StoppingTime(self.rejected_at)

    def metadata(self) -> dict:
        return {"hypothesis": self.spec.hypothesis, "iid_target_assumed": self.target.iid_required,
                "threshold": self.threshold}

    def to_dict(self) -> dict:
        return {
            "format": "harmshift.monitor", "version": 1,
            "spec": self.spec.to_dict(),
            "source_bound": None if self.source_bound is None else self.source_bound.to_dict(),
            "target": self.target.to_dict(),
            "t": self.t, "rejected_at": self.rejected_at, "pending": self._pending,
            "threshold": self.threshold.hex(),
            "trace_len": self.trace.maxlen or 0,
            "trace": [[t, v.hex()] for t, v in self.trace],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MonitorState":
        if d.get("format") != "harmshift.monitor" or d.get("version") != 1:
            raise ValueError("not a harmshift monitor checkpoint")
        spec = TestSpec.from_dict(d["spec"])
        sb = None if d["source_bound"] is None else SourceBound.from_dict(d["source_bound"])
        m = cls(spec, sb, bounds.state_from_dict(d["target"]), trace_len=d["trace_len"])
        m.threshold = float.fromhex(d["threshold"])
        m.t, m.rejected_at, m._pending = d["t"], d["rejected_at"], d["pending"]
        m.trace.extend((t, float.fromhex(v)) for t, v in d["trace"])
        return m


def init_monitor(spec: TestSpec, source_losses=None, trace_len: int = 0) -> MonitorState:
    """Bound the source risk (unless in fixed mode) and start an empty target bound."""
    sb = spec.source_bound(source_losses if source_losses is not None else [])
    return MonitorState(spec, sb, trace_len=trace_len)


def observe(state: MonitorState, target_losses) -> tuple[MonitorState, Decision]:
    return state, state.observe(target_losses)


def stopping_time(state: MonitorState) -> StoppingTime:
    return state.stopping_time()


# --------------------------------------------------------------------------
# many independent monitors at once

@dataclass
class BatchResult:
    stopping_times: np.ndarray  # float, inf where no rejection
    thresholds: np.ndarray
    source_bound: SourceBound | None
    final_lower: np.ndarray

    @property
    def rejected(self) -> np.ndarray:
        return np.isfinite(self.stopping_times)

    def censored_times(self, horizon: int) -> np.ndarray:
        return np.where(self.rejected, self.stopping_times, horizon)


def run_batch(spec: TestSpec, source_losses, target_losses, thresholds=None) -> BatchResult:
    """Run R independent monitors, one per row of ``target_losses`` (R x T).

    Equivalent to R separate :class:`MonitorState` runs; rejected rows are
    dropped from the working set as the stream advances.
    """
    target = bounds._check_losses(target_losses)
    if target.ndim != 2:
        raise ValueError("target_losses must be R x T")
    R, T = target.shape
    sb = None
    if thresholds is None:
        if spec.mode is Mode.FIXED:
            thresholds = np.full(R, spec.eps_tol)
        else:
            source = np.asarray(source_losses, dtype=float)
            if source.ndim == 1:
                source = np.broadcast_to(source, (R, source.size))
            sb = spec.source_bound(source)
            thresholds = np.broadcast_to(spec.threshold(np.asarray(sb.value)), (R,)).astype(float)
    thresholds = np.asarray(thresholds, dtype=float)
    stop = np.full(R, np.inf)
    final_lower = np.zeros(R)
    active = np.arange(R)
    state = spec.new_target_state((R,))
    thr = thresholds.copy()
    dead = 0
    m = spec.batch_size
    for t in range(T):
        if active.size == 0:
            break
        state.update(target[active, t])
        if not (spec.eval_per_loss or (t + 1) % m == 0 or t == T - 1):
            continue
        low = state.best_lower
        hit = low > thr
        final_lower[active] = np.where(np.isfinite(thr), low, final_lower[active])
        if hit.any():
            stop[active[hit]] = t + 1
            thr = np.where(hit, np.inf, thr)
            dead += int(hit.sum())
            # compacting copies the whole state, so only do it once enough rows died
            if dead > 0.1 * active.size:
                keep = np.isfinite(thr)
                active, thr = active[keep], thr[keep]
                state = state.take(keep)
                dead = 0
    return BatchResult(stop, thresholds, sb, final_lower)


def mc_standard_error(p: float, n: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / n)
