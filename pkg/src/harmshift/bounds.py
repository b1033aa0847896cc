"""Confidence bounds for the mean of [0, 1]-valued losses.

Two kinds of objects live here:

* fixed-sample upper bounds (:func:`hoeffding_fixed_upper`,
  :func:`fixed_upper_bound`) used for the source risk, and
* streaming confidence-sequence states (:class:`PMHState`,
  :class:`PMEBState`, :class:`BettingState`, :class:`CMEBState`) used for the
  target risk.  ``update`` feeds one observation and returns the current
  (lower, upper) pair, clamped to [0, 1].

Every state is vectorized over an arbitrary batch shape so that many
independent streams (Monte Carlo replications, changepoint sub-tests) advance
in lock-step.  A single stream is the batch shape ``()``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np
from scipy import special

FORMAT_NAME = "harmshift.state"
FORMAT_VERSION = 1


class Method(str, Enum):
    HOEFFDING = "hoeffding"
    PMH = "pmh"
    PMEB = "pmeb"
    BETTING = "betting"
    CMEB = "cmeb"


class Side(str, Enum):
    LOWER = "lower"
    UPPER = "upper"
    TWO_SIDED = "two-sided"


class BoundDomainError(ValueError):
    pass


class BoundNumericError(ArithmeticError):
    pass


def _check_delta(delta: float) -> float:
    if not 0 < delta < 1:
        raise BoundDomainError(f"delta must be in (0, 1), got {delta}")
    return float(delta)


def _check_losses(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if np.any(~np.isfinite(z)) or np.any(z < 0) or np.any(z > 1):
        raise BoundDomainError("losses must lie in [0, 1]")
    return z


# --------------------------------------------------------------------------
# fixed-sample bounds

@dataclass
class SourceBound:
    """Upper confidence bound on the source risk.

    ``value`` and ``eps_appr`` are floats for a single sample or arrays when
    several samples were bounded at once.
    """

    value: Any
    eps_appr: Any
    empirical_mean: Any
    n_source: int
    method: str
    delta_s: float

    def to_dict(self) -> dict:
        return {
            "value": _encode(self.value),
            "eps_appr": _encode(self.eps_appr),
            "empirical_mean": _encode(self.empirical_mean),
            "n_source": self.n_source,
            "method": self.method,
            "delta_s": float(self.delta_s).hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SourceBound":
        return cls(_decode(d["value"]), _decode(d["eps_appr"]), _decode(d["empirical_mean"]),
                   int(d["n_source"]), d["method"], float.fromhex(d["delta_s"]))


def hoeffding_fixed_upper(losses, delta: float) -> SourceBound:
    """Classic Hoeffding upper limit: mean + sqrt(log(1/delta) / (2n))."""
    delta = _check_delta(delta)
    z = _check_losses(losses)
    n = z.shape[-1] if z.ndim else 0
    if n < 1:
        raise BoundDomainError("need at least one loss")
    mean = z.mean(axis=-1)
    eps = math.sqrt(math.log(1 / delta) / (2 * n))
    return SourceBound(_scalar(mean + eps), _scalar(np.full_like(mean, eps)),
                       _scalar(mean), n, Method.HOEFFDING.value, delta)


def fixed_upper_bound(losses, delta: float, method: str | Method = Method.HOEFFDING,
                      **kwargs) -> SourceBound:
    """Upper confidence bound on the mean of a fixed sample (last axis).

    Sequential methods are run over the sample with the horizon declared and
    the running intersection (minimum over t of the upper limit) is reported.
    """
    method = Method(method)
    if method is Method.HOEFFDING:
        return hoeffding_fixed_upper(losses, delta)
    delta = _check_delta(delta)
    z = _check_losses(losses)
    if z.ndim == 0 or z.shape[-1] < 1:
        raise BoundDomainError("need at least one loss")
    n = z.shape[-1]
    batch = z.shape[:-1]
    if method is Method.PMH:
        state = PMHState(delta, batch)
    elif method is Method.PMEB:
        state = PMEBState(delta, batch, horizon=n, **kwargs)
    elif method is Method.BETTING:
        state = BettingState(delta, batch, side=Side.UPPER, horizon=n, **kwargs)
    else:
        state = CMEBState(delta, batch, **kwargs)
    for i in range(n):
        state.update(z[..., i])
    mean = z.mean(axis=-1)
    value = np.maximum(state.best_upper, mean)
    return SourceBound(_scalar(value), _scalar(value - mean), _scalar(mean), n,
                       method.value, delta)


def _scalar(x):
    x = np.asarray(x, dtype=float)
    return float(x) if x.ndim == 0 else x


# --------------------------------------------------------------------------
# serialization helpers: floats travel as hex strings so round-trips are exact

def _encode(x):
    if x is None or isinstance(x, (bool, str)):
        return x
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return {"int": int(x)}
    if isinstance(x, (float, np.floating)):
        return {"float": float(x).hex()}
    arr = np.asarray(x)
    if arr.dtype == bool:
        return {"shape": list(arr.shape), "dtype": "bool", "data": arr.ravel().tolist()}
    if np.issubdtype(arr.dtype, np.integer):
        return {"shape": list(arr.shape), "dtype": "int64", "data": arr.ravel().tolist()}
    return {"shape": list(arr.shape), "dtype": "float64",
            "data": [float(v).hex() for v in arr.ravel()]}


def _decode(d):
    if d is None or isinstance(d, (bool, str)):
        return d
    if "int" in d:
        return d["int"]
    if "float" in d:
        return float.fromhex(d["float"])
    shape = tuple(d["shape"])
    if d["dtype"] == "bool":
        return np.array(d["data"], dtype=bool).reshape(shape)
    if d["dtype"] == "int64":
        return np.array(d["data"], dtype=np.int64).reshape(shape)
    return np.array([float.fromhex(v) for v in d["data"]], dtype=float).reshape(shape)


_STATE_TYPES: dict[str, type] = {}


def state_from_dict(doc: dict) -> "BoundState":
    if doc.get("format") != FORMAT_NAME:
        raise ValueError("not a harmshift state document")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported state version {doc.get('version')}")
    cls = _STATE_TYPES[doc["type"]]
    obj = cls.__new__(cls)
    for name, value in doc["params"].items():
        setattr(obj, name, _decode(value))
    for name, value in doc["arrays"].items():
        setattr(obj, name, _decode(value))
    obj._restore()
    return obj


# --------------------------------------------------------------------------
# streaming states

class BoundState:
    """Common machinery for the batched confidence-sequence states.

    Subclasses list batch-shaped arrays in ``_arrays`` and configuration in
    ``_params``; copying, sub-selection and serialization are generic.
    """

    _arrays: tuple[str, ...] = ()
    _params: tuple[str, ...] = ()
    method: Method
    iid_required = True

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        _STATE_TYPES[cls.__name__] = cls

    def _init_common(self, shape):
        self.shape = tuple(np.broadcast_shapes(shape))
        self.t = np.zeros(self.shape, dtype=np.int64)
        self.lower_raw = np.full(self.shape, -np.inf)
        self.upper_raw = np.full(self.shape, np.inf)
        self.best_lower = np.zeros(self.shape)
        self.best_upper = np.ones(self.shape)

    def _restore(self):
        # scalar batches decay to numpy scalars; keep every field an ndarray
        for name in self._arrays + self._common:
            setattr(self, name, np.asarray(getattr(self, name)))
        self.shape = tuple(self.t.shape)

    @property
    def lower(self):
        return _scalar(np.clip(self.lower_raw, 0.0, 1.0))

    @property
    def upper(self):
        return _scalar(np.clip(self.upper_raw, 0.0, 1.0))

    def _intersect(self, where):
        lo = np.maximum(self.best_lower, np.clip(self.lower_raw, 0.0, 1.0))
        hi = np.minimum(self.best_upper, np.clip(self.upper_raw, 0.0, 1.0))
        if where is None:
            self.best_lower, self.best_upper = lo, hi
        else:
            self.best_lower = np.where(where, lo, self.best_lower)
            self.best_upper = np.where(where, hi, self.best_upper)

    def update(self, z, where=None):
        """Feed one loss per stream; ``where`` masks streams that skip this step."""
        z = np.broadcast_to(_check_losses(z), self.shape)
        if where is not None:
            where = np.broadcast_to(np.asarray(where, dtype=bool), self.shape)
        self._update(z, where)
        self._intersect(where)
        return self.lower, self.upper

    def _update(self, z, where):
        raise NotImplementedError

    def copy(self) -> "BoundState":
        return self.take(...)

    _common = ("t", "lower_raw", "upper_raw", "best_lower", "best_upper")

    def take(self, index, copy: bool = True) -> "BoundState":
        """State holding the streams selected by ``index`` over the batch axes.

        With ``copy=False`` and basic slicing the arrays are views; pair with
        :meth:`put` to write an updated sub-state back.
        """
        obj = self.__class__.__new__(self.__class__)
        for name in self._params:
            setattr(obj, name, getattr(self, name))
        for name in self._arrays + self._common:
            sub = getattr(self, name)[index]
            setattr(obj, name, np.array(sub) if copy else sub)
        obj._restore()
        return obj

    def put(self, index, sub: "BoundState") -> None:
        for name in self._arrays + self._common:
            getattr(self, name)[index] = getattr(sub, name)

    def append(self, n: int) -> None:
        """Add ``n`` fresh streams along the last batch axis."""
        if not self.shape:
            raise ValueError("cannot append to a scalar batch")
        axis = len(self.shape) - 1
        fresh = self.__class__(**self._fresh_kwargs(), shape=self.shape[:-1] + (n,))
        for name in self._arrays + self._common:
            setattr(self, name, np.concatenate([getattr(self, name), getattr(fresh, name)], axis=axis))
        self._restore()

    def _fresh_kwargs(self) -> dict:
        return {name: getattr(self, name) for name in self._ctor_params}

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "type": self.__class__.__name__,
            "params": {name: _encode(getattr(self, name)) for name in self._params},
            "arrays": {name: _encode(getattr(self, name)) for name in
                       self._arrays + self._common},
        }


def _merge(where, new, old):
    return new if where is None else np.where(where, new, old)


def pmh_lambda(t, delta: float):
    """Predictable Hoeffding bet size min(sqrt(8 log(1/delta) / (t log(t+1))), 1)."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 1):
        raise BoundDomainError("t must be >= 1")
    lam = np.minimum(np.sqrt(8 * math.log(1 / delta) / (t * np.log1p(t))), 1.0)
    return _scalar(lam)


def psi_hoeffding(lam):
    return np.asarray(lam) ** 2 / 8


def psi_eb(lam):
    """(-log(1 - lam) - lam) / 4 for lam in [0, 1)."""
    lam = np.asarray(lam, dtype=float)
    return (-np.log1p(-lam) - lam) / 4


class PMHState(BoundState):
    """Predictably-mixed Hoeffding confidence sequence."""

    method = Method.PMH
    _arrays = ("sum_lambda", "sum_lambda_z", "sum_psi")
    _params = ("delta",)
    _ctor_params = ("delta",)

    def __init__(self, delta: float, shape=()):
        self.delta = _check_delta(delta)
        self._init_common(shape)
        self.sum_lambda = np.zeros(self.shape)
        self.sum_lambda_z = np.zeros(self.shape)
        self.sum_psi = np.zeros(self.shape)

    def radius(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            r = (math.log(1 / self.delta) + self.sum_psi) / self.sum_lambda
        return np.where(self.sum_lambda > 0, r, np.inf)

    def _update(self, z, where):
        t = self.t + 1
        lam = np.asarray(pmh_lambda(t, self.delta))
        self.t = _merge(where, t, self.t)
        self.sum_lambda = _merge(where, self.sum_lambda + lam, self.sum_lambda)
        self.sum_lambda_z = _merge(where, self.sum_lambda_z + lam * z, self.sum_lambda_z)
        self.sum_psi = _merge(where, self.sum_psi + psi_hoeffding(lam), self.sum_psi)
        with np.errstate(divide="ignore", invalid="ignore"):
            center = np.where(self.sum_lambda > 0, self.sum_lambda_z / self.sum_lambda, 0.5)
        r = self.radius()
        self.lower_raw = center - r
        self.upper_raw = center + r


class _RegularizedMoments:
    """Running regularized mean/variance: mu_0 = 1/2, sigma2_0 = 1/4.

    mu_t = (1/2 + sum z) / (t + 1), sigma2_t = (1/4 + sum (z_i - mu_i)^2) / (t + 1).
    """

    def _init_moments(self):
        self.sum_z = np.zeros(self.shape)
        self.sum_sq_dev = np.zeros(self.shape)
        self.mu_hat = np.full(self.shape, 0.5)
        self.sigma2_hat = np.full(self.shape, 0.25)

    def _advance_moments(self, z, t, where):
        sum_z = self.sum_z + z
        mu = (0.5 + sum_z) / (t + 1)
        sum_sq = self.sum_sq_dev + (z - mu) ** 2
        self.sum_z = _merge(where, sum_z, self.sum_z)
        self.sum_sq_dev = _merge(where, sum_sq, self.sum_sq_dev)
        self.mu_hat = _merge(where, mu, self.mu_hat)
        self.sigma2_hat = _merge(where, (0.25 + sum_sq) / (t + 1), self.sigma2_hat)

    def _eb_rate(self, t):
        """sqrt(2 log(1/delta) / (sigma2_{t-1} * schedule)) before any cap."""
        if self.horizon is None:
            schedule = t * np.log1p(t)
        else:
            schedule = float(self.horizon)
        return np.sqrt(2 * math.log(1 / self.delta) / (self.sigma2_hat * schedule))


class PMEBState(BoundState, _RegularizedMoments):
    """Predictably-mixed empirical-Bernstein confidence sequence.

    With ``horizon=n`` the fixed-sample rate sqrt(2 log(1/delta) / (n sigma2))
    replaces the streaming t log(1 + t) schedule.
    """

    method = Method.PMEB
    _arrays = ("sum_lambda", "sum_lambda_z", "sum_v_psi",
               "sum_z", "sum_sq_dev", "mu_hat", "sigma2_hat")
    _params = ("delta", "c_cap", "horizon")
    _ctor_params = ("delta", "c_cap", "horizon")

    def __init__(self, delta: float, shape=(), c_cap: float = 0.5, horizon: int | None = None):
        self.delta = _check_delta(delta)
        if not 0 < c_cap < 1:
            raise BoundDomainError("c_cap must be in (0, 1)")
        self.c_cap = float(c_cap)
        self.horizon = None if horizon is None else int(horizon)
        self._init_common(shape)
        self.sum_lambda = np.zeros(self.shape)
        self.sum_lambda_z = np.zeros(self.shape)
        self.sum_v_psi = np.zeros(self.shape)
        self._init_moments()

    def radius(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            r = (math.log(1 / self.delta) + self.sum_v_psi) / self.sum_lambda
        return np.where(self.sum_lambda > 0, r, np.inf)

    def _update(self, z, where):
        t = self.t + 1
        lam = np.minimum(self._eb_rate(t), self.c_cap)
        v = 4 * (z - self.mu_hat) ** 2
        self.sum_lambda = _merge(where, self.sum_lambda + lam, self.sum_lambda)
        self.sum_lambda_z = _merge(where, self.sum_lambda_z + lam * z, self.sum_lambda_z)
        self.sum_v_psi = _merge(where, self.sum_v_psi + v * psi_eb(lam), self.sum_v_psi)
        self._advance_moments(z, t, where)
        self.t = _merge(where, t, self.t)
        with np.errstate(divide="ignore", invalid="ignore"):
            center = np.where(self.sum_lambda > 0, self.sum_lambda_z / self.sum_lambda, 0.5)
        r = self.radius()
        self.lower_raw = center - r
        self.upper_raw = center + r


class BettingState(BoundState, _RegularizedMoments):
    """Betting (hedged capital) confidence sequence evaluated on a grid of means.

    For every candidate mean m the capital processes

        K+(m) = prod (1 + lam+(m) (z - m)),   K-(m) = prod (1 - lam-(m) (z - m))

    are tracked in log space with lam+(m) = min(lam_dot, c/m) and
    lam-(m) = min(lam_dot, c/(1-m)), where lam_dot is the empirical-Bernstein
    rate truncated at c.  The lower limit is the infimum of grid
    means whose K+ has not reached 1/delta; K+ is nonincreasing in m so the
    rejected means form a prefix of the grid.  Limits are reported at the
    neighbouring rejected grid point, which errs on the conservative side by
    at most one grid step.
    """

    method = Method.BETTING
    _arrays = ("log_capital_plus", "log_capital_minus", "sum_z", "sum_sq_dev",
               "mu_hat", "sigma2_hat")
    _params = ("delta", "c_cap", "grid_resolution", "side", "horizon")
    _ctor_params = ("delta", "c_cap", "grid_resolution", "side", "horizon")

    def __init__(self, delta: float, shape=(), c_cap: float = 0.5,
                 grid_resolution: float = 1e-3, side: Side | str = Side.TWO_SIDED,
                 horizon: int | None = None):
        self.delta = _check_delta(delta)
        if not 0 < c_cap < 1:
            raise BoundDomainError("c_cap must be in (0, 1)")
        if not grid_resolution > 0:
            raise BoundDomainError("grid_resolution must be positive")
        self.c_cap = float(c_cap)
        self.grid_resolution = float(grid_resolution)
        self.side = Side(side).value
        self.horizon = None if horizon is None else int(horizon)
        self._init_common(shape)
        self._init_moments()
        self._make_grid()
        g = self.grid.size
        track_plus = self.side != Side.UPPER.value
        track_minus = self.side != Side.LOWER.value
        self.log_capital_plus = np.zeros(self.shape + (g if track_plus else 0,))
        self.log_capital_minus = np.zeros(self.shape + (g if track_minus else 0,))

    def _make_grid(self):
        n = max(int(round(1.0 / self.grid_resolution)), 1)
        self.grid = np.linspace(0.0, 1.0, n + 1)
        with np.errstate(divide="ignore"):
            self._cap_plus = self.c_cap / self.grid
            self._cap_minus = self.c_cap / (1.0 - self.grid)
        self._log_thr = math.log(1 / self.delta)

    def _restore(self):
        super()._restore()
        self.side = Side(self.side).value
        self._make_grid()

    def _update(self, z, where):
        t = self.t + 1
        # truncated at c like PM-EB; the per-m caps c/m, c/(1-m) then only bind near the edges
        lam_dot = np.minimum(np.abs(self._eb_rate(t)), self.c_cap)[..., None]
        zm = z[..., None] - self.grid
        grid_where = True if where is None else where[..., None]
        buf = np.empty(np.broadcast_shapes(lam_dot.shape, zm.shape))
        if self.log_capital_plus.shape[-1]:
            np.minimum(lam_dot, self._cap_plus, out=buf)
            buf *= zm
            np.log1p(buf, out=buf)
            np.add(self.log_capital_plus, buf, out=self.log_capital_plus, where=grid_where)
            # K+ is nonincreasing in m, so the rejected points form a prefix
            j = np.count_nonzero(self.log_capital_plus >= self._log_thr, axis=-1)
            lo = np.where(j > 0, self.grid[np.maximum(j - 1, 0)], 0.0)
            self.lower_raw = _merge(where, lo, self.lower_raw)
        if self.log_capital_minus.shape[-1]:
            np.minimum(lam_dot, self._cap_minus, out=buf)
            buf *= zm
            np.negative(buf, out=buf)
            np.log1p(buf, out=buf)
            np.add(self.log_capital_minus, buf, out=self.log_capital_minus, where=grid_where)
            k = np.count_nonzero(self.log_capital_minus >= self._log_thr, axis=-1)
            g = self.grid.size
            hi = np.where(k > 0, self.grid[np.minimum(g - k, g - 1)], 1.0)
            self.upper_raw = _merge(where, hi, self.upper_raw)
        self._advance_moments(z, t, where)
        self.t = _merge(where, t, self.t)

    @property
    def lower(self):
        return _scalar(self.best_lower)

    @property
    def upper(self):
        return _scalar(self.best_upper)


# --------------------------------------------------------------------------
# conjugate-mixture empirical Bernstein

def normal_mixture_rho(v_opt: float, alpha: float) -> float:
    """Mixture precision that makes a one-sided normal mixture tightest at ``v_opt``."""
    la = math.log(1 / (2 * alpha))
    return v_opt / (2 * la + math.log(1 + 2 * la))


def gamma_exponential_log_mixture(s, v, rho: float, c: float = 1.0):
    """log m(s, v) for the gamma-exponential mixture of exp(lam s - psi_E(lam) v).

    psi_E(lam) = (-log(1 - c lam) - c lam) / c^2 and lam ranges over [0, 1/c)
    with 1 - c lam following a gamma law of shape = rate = rho / c^2,
    truncated to (0, 1].  Closed form:

        m = (r^r / (Gamma(r) P(r, r)))
            * Gamma(a) P(a, x) x^{-a} exp((c s + v) / c^2)

    with r = rho/c^2, a = (v + rho)/c^2, x = (c s + v + rho)/c^2 and P the
    regularized lower incomplete gamma function.
    """
    s = np.asarray(s, dtype=float)
    v = np.asarray(v, dtype=float)
    c2 = c * c
    r = rho / c2
    lead = r * math.log(r) - special.gammaln(r) - math.log(special.gammainc(r, r))
    a = (v + rho) / c2
    x = (c * s + v + rho) / c2
    return lead + special.gammaln(a) + np.log(special.gammainc(a, x)) - a * np.log(x) + (c * s + v) / c2


class GammaExponentialBoundary:
    """Sub-exponential uniform boundary u(v) with crossing probability ``alpha``.

    u(v) solves m(u, v) = 1/alpha; m is increasing in s so bisection applies.
    """

    max_iter = 200
    tol = 1e-10

    def __init__(self, alpha: float, rho: float | None = None, v_opt: float = 100.0,
                 c: float = 1.0):
        self.alpha = _check_delta(alpha)
        self.rho = float(rho) if rho is not None else normal_mixture_rho(v_opt, alpha)
        self.c = float(c)
        self.log_thr = math.log(1 / self.alpha)

    def log_mixture(self, s, v):
        return gamma_exponential_log_mixture(s, v, self.rho, self.c)

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        if np.any(v < 0) or np.any(~np.isfinite(v)):
            raise BoundDomainError("intrinsic time v must be finite and >= 0")
        lo = np.zeros_like(v)
        hi = np.maximum(np.sqrt(2 * (v + self.rho) * self.log_thr), 1.0) + 4 * self.log_thr
        for _ in range(64):
            low = self.log_mixture(hi, v) < self.log_thr
            if not low.any():
                break
            hi = np.where(low, 2 * hi, hi)
        else:
            raise BoundNumericError("could not bracket the mixture boundary")
        # Illinois-modified regula falsi on f(s) = log m(s, v) - log(1/alpha).
        # The bracket [lo, hi] keeps f(lo) < 0 <= f(hi) throughout.
        f_lo = self.log_mixture(lo, v) - self.log_thr
        f_hi = self.log_mixture(hi, v) - self.log_thr
        side = np.zeros(v.shape, dtype=np.int8)
        done = f_hi <= self.tol
        for _ in range(self.max_iter):
            done |= hi - lo <= self.tol * np.maximum(1.0, hi)
            if np.all(done):
                break
            mid = (lo * f_hi - hi * f_lo) / (f_hi - f_lo)
            bad = ~np.isfinite(mid) | (mid <= lo) | (mid >= hi)
            mid = np.where(bad, 0.5 * (lo + hi), mid)
            mid = np.where(done, hi, mid)
            f_mid = self.log_mixture(mid, v) - self.log_thr
            below = (f_mid < 0) & ~done
            done |= ~below & (f_mid <= self.tol)
            lo, f_lo = np.where(below, mid, lo), np.where(below, f_mid, f_lo)
            hi, f_hi = np.where(below, hi, mid), np.where(below, f_hi, f_mid)
            # halve the stale endpoint when the same side moves twice in a row
            f_hi = np.where(below & (side == -1), 0.5 * f_hi, f_hi)
            f_lo = np.where(~below & (side == 1), 0.5 * f_lo, f_lo)
            side = np.where(below, -1, 1).astype(np.int8)
        else:
            raise BoundNumericError("root search did not converge")
        return _scalar(hi)


def cmeb_boundary(v, alpha: float, rho: float | None = None, v_opt: float = 100.0):
    """Gamma-exponential conjugate-mixture boundary for unit-range losses."""
    return GammaExponentialBoundary(alpha, rho=rho, v_opt=v_opt)(v)


class CMEBState(BoundState):
    """Conjugate-mixture empirical-Bernstein sequence for the running mean.

    Valid for mu_t = t^{-1} sum E_{i-1} Z_i without assuming identically
    distributed observations.  ``alpha`` is the crossing probability of each
    side.
    """

    method = Method.CMEB
    iid_required = False
    _arrays = ("sum_z", "v_total", "z_hat")
    _params = ("alpha", "rho")
    _ctor_params = ("alpha", "rho")

    def __init__(self, alpha: float, shape=(), rho: float | None = None, v_opt: float = 100.0):
        self.alpha = _check_delta(alpha)
        self.rho = float(rho) if rho is not None else normal_mixture_rho(v_opt, alpha)
        self._init_common(shape)
        self.sum_z = np.zeros(self.shape)
        self.v_total = np.zeros(self.shape)
        self.z_hat = np.full(self.shape, 0.5)
        self._restore_boundary()

    def _restore_boundary(self):
        self.boundary = GammaExponentialBoundary(self.alpha, rho=self.rho)

    def _restore(self):
        super()._restore()
        self._restore_boundary()

    @property
    def delta(self):
        return self.alpha

    @property
    def mean_z(self):
        with np.errstate(invalid="ignore"):
            return _scalar(np.where(self.t > 0, self.sum_z / np.maximum(self.t, 1), np.nan))

    def _update(self, z, where):
        t = self.t + 1
        v = self.v_total + (z - self.z_hat) ** 2
        sum_z = self.sum_z + z
        self.t = _merge(where, t, self.t)
        self.v_total = _merge(where, v, self.v_total)
        self.sum_z = _merge(where, sum_z, self.sum_z)
        self.z_hat = _merge(where, sum_z / t, self.z_hat)
        active = self.t > 0
        u = np.asarray(self.boundary(self.v_total))
        tt = np.maximum(self.t, 1)
        mean = self.sum_z / tt
        self.lower_raw = np.where(active, mean - u / tt, -np.inf)
        self.upper_raw = np.where(active, mean + u / tt, np.inf)


def make_state(method: str | Method, delta: float, shape=(), side: str | Side = Side.LOWER,
               **kwargs) -> BoundState:
    """Construct a streaming state for ``method`` at level ``delta``."""
    method = Method(method)
    if method is Method.PMH:
        return PMHState(delta, shape)
    if method is Method.PMEB:
        return PMEBState(delta, shape, **kwargs)
    if method is Method.BETTING:
        return BettingState(delta, shape, side=side, **kwargs)
    if method is Method.CMEB:
        return CMEBState(delta, shape, **kwargs)
    raise BoundDomainError("fixed Hoeffding has no streaming form; use pmh")
