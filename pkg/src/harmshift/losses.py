"""Bounded loss functions and set-valued predictor calibration.

Every loss maps into [0, 1] so that the concentration machinery in
:mod:`harmshift.bounds` can assume unit range.  All functions accept scalars
or numpy arrays; for probability vectors the class axis is the last one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

PROB_SUM_TOL = 1e-9


class LossDomainError(ValueError):
    """Raised for inputs outside a loss function's domain."""


def _check_labels(y, n_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(y != np.floor(y)):
            raise LossDomainError("class indices must be integers")
        y = y.astype(np.int64)
    if np.any(y < 0) or (n_classes is not None and np.any(y >= n_classes)):
        raise LossDomainError(f"class index out of range [0, {n_classes})")
    return y


def check_distribution(f) -> np.ndarray:
    """Validate one or many label distributions (last axis = classes).

    Distributions that do not sum to one are rejected, never renormalized.
    """
    f = np.asarray(f, dtype=float)
    if f.ndim == 0 or f.shape[-1] < 2:
        raise LossDomainError("a label distribution needs at least 2 classes")
    if np.any(f < 0) or np.any(f > 1):
        raise LossDomainError("probabilities must lie in [0, 1]")
    if np.any(np.abs(f.sum(axis=-1) - 1.0) > PROB_SUM_TOL):
        raise LossDomainError("probabilities must sum to 1")
    return f


def top_label(f) -> np.ndarray:
    """Argmax label; ties go to the lowest class index."""
    return np.argmax(check_distribution(f), axis=-1)


def _take(f: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return np.take_along_axis(f, np.expand_dims(idx, -1), axis=-1)[..., 0]


def misclassification_loss(pred, y, n_classes: int | None = None):
    """0-1 loss.  ``pred`` is a class index, or a distribution (argmax taken)."""
    pred_arr = np.asarray(pred)
    if pred_arr.dtype.kind == "f" and pred_arr.ndim >= 1 and pred_arr.shape[-1] >= 2 \
            and pred_arr.ndim > np.ndim(y):
        n_classes = pred_arr.shape[-1]
        pred_arr = top_label(pred_arr)
    pred_arr = _check_labels(pred_arr, n_classes)
    y = _check_labels(y, n_classes)
    out = (pred_arr != y).astype(float)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class CostVector:
    costs: tuple[float, ...]

    def __post_init__(self):
        c = np.asarray(self.costs, dtype=float)
        if c.ndim != 1 or c.size < 2:
            raise LossDomainError("cost vector needs one entry per class")
        if np.any(c < 0):
            raise LossDomainError("costs must be nonnegative")
        if c.max() <= 0:
            raise LossDomainError("at least one cost must be positive")

    @property
    def L(self) -> float:
        return float(max(self.costs))


def weighted_misclassification_loss(pred, y, costs: CostVector | Iterable[float]):
    """Label-dependent cost of a mistake, divided by the largest cost.

    Multiply by ``costs.L`` to get back the unscaled value in [0, L].
    """
    if not isinstance(costs, CostVector):
        costs = CostVector(tuple(float(c) for c in costs))
    k = len(costs.costs)
    miss = np.asarray(misclassification_loss(pred, y, n_classes=k))
    y = _check_labels(y, k)
    c = np.asarray(costs.costs) / costs.L
    out = c[y] * miss
    return out if np.ndim(out) else float(out)


def brier_loss(f, y):
    """Half the squared distance between ``f`` and the one-hot encoding of ``y``."""
    f = check_distribution(f)
    y = _check_labels(y, f.shape[-1])
    onehot = np.zeros_like(f)
    np.put_along_axis(onehot, np.expand_dims(np.broadcast_to(y, f.shape[:-1]), -1), 1.0, axis=-1)
    out = 0.5 * np.sum((f - onehot) ** 2, axis=-1)
    return out if out.ndim else float(out)


def top_label_brier_loss(f, y):
    f = check_distribution(f)
    y = _check_labels(y, f.shape[-1])
    yhat = np.argmax(f, axis=-1)
    out = (_take(f, yhat) - (yhat == y)) ** 2
    return out if out.ndim else float(out)


def true_class_brier_loss(f, y):
    f = check_distribution(f)
    y = _check_labels(y, f.shape[-1])
    out = (_take(f, np.broadcast_to(y, f.shape[:-1])) - 1.0) ** 2
    return out if out.ndim else float(out)


def miscoverage_loss(S: Iterable[int], y: int) -> float:
    """1 if the label is missing from the prediction set (the empty set never covers)."""
    y = int(_check_labels(y))
    return 0.0 if y in set(int(s) for s in S) else 1.0


def mass_above(f, y=None) -> np.ndarray:
    """Probability mass of labels strictly more likely than ``y``.

    With ``y=None`` returns the value for every label (shape of ``f``).
    """
    f = check_distribution(f)
    # rho_k = sum_j f_j 1{f_j > f_k}
    greater = f[..., None, :] > f[..., :, None]
    rho = np.sum(np.where(greater, f[..., None, :], 0.0), axis=-1)
    if y is None:
        return rho
    y = _check_labels(y, f.shape[-1])
    return _take(rho, np.broadcast_to(y, f.shape[:-1]))


def density_superlevel_set(f, lam: float) -> set[int]:
    """Labels whose more-likely mass is at most ``lam``; nested in ``lam``."""
    f = check_distribution(f)
    if f.ndim != 1:
        raise LossDomainError("expected a single distribution")
    rho = mass_above(f)
    return {int(k) for k in np.flatnonzero(rho <= lam)}


@dataclass
class RCPSResult:
    lam: float
    saturated: bool
    upper_bounds: np.ndarray
    grid: np.ndarray


def rcps_calibrate(score_matrix, labels, beta: float, gamma: float,
                   bound_method: str = "hoeffding", grid_size: int = 1001) -> RCPSResult:
    """Pick the smallest grid threshold past which the miscoverage bound stays below ``beta``.

    ``lam`` is the smallest grid value such that the level-``gamma`` upper
    confidence bound on miscoverage is below ``beta`` at every strictly larger
    grid value.  If the bound at lam = 1 (full label sets) is not below
    ``beta`` either, the result is lam = 1 with ``saturated=True``.
    """
    from .bounds import fixed_upper_bound

    if not (0 < beta <= 1 and 0 < gamma < 1):
        raise LossDomainError("beta must be in (0, 1] and gamma in (0, 1)")
    f = check_distribution(score_matrix)
    if f.ndim != 2 or f.shape[0] < 1:
        raise LossDomainError("score matrix must be n x K with n >= 1")
    y = _check_labels(labels, f.shape[1])
    rho_true = mass_above(f, y)
    grid = np.linspace(0.0, 1.0, grid_size)
    # miscoverage of S_lam at each grid point, for each calibration example
    miss = (rho_true[None, :] > grid[:, None]).astype(float)
    ucb = np.asarray(fixed_upper_bound(miss, gamma, bound_method).value)
    bad = np.flatnonzero(ucb >= beta)
    if bad.size == 0:
        return RCPSResult(0.0, False, ucb, grid)
    j = bad[-1]
    if j == grid_size - 1:
        return RCPSResult(1.0, True, ucb, grid)
    return RCPSResult(float(grid[j]), False, ucb, grid)
