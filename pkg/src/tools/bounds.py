"""Margin-based generalisation bound for boosted adapters.

With probability at least 1 - delta over a training set of size n,

    err <= Pr_train[m(x) < theta] + 2 X B_total / (theta sqrt(n)) + sqrt(log(2/delta) / 2n)

where B_total is the sum of per-round adapter norms and X bounds the feature
map norm. This module evaluates the three terms over a theta grid, picks the
minimising theta, audits merge regressions, and computes the bootstrap and
binary-task summaries written next to each run.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from tools.adapter import AdapterState
from tools.model import FrozenModel, LabeledDataset, margin_features
from utils.errors import InvalidInputError, RangeError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_DELTA = 0.05
DEFAULT_GRID_POINTS = 64


@dataclass(frozen=True)
class BoundInputs:
    margins: np.ndarray
    B_total: float
    X: float
    n: int
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        margins = np.asarray(self.margins, dtype=np.float64)
        object.__setattr__(self, "margins", margins)
        if margins.shape != (self.n,):
            raise ShapeError(f"{margins.shape[0]} margin(s) for n = {self.n}")
        if self.n < 1:
            raise InvalidInputError("bound needs at least one training margin")
        if self.B_total < 0 or self.X < 0:
            raise RangeError(f"B_total and X must be >= 0, got {self.B_total}, {self.X}")
        if not 0.0 < self.delta < 1.0:
            raise RangeError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass
class BoundReport:
    theta_grid: np.ndarray
    margin_term: np.ndarray
    complexity_term: np.ndarray
    confidence_term: float
    bound: np.ndarray
    theta_star: float
    bound_at_star: float
    vacuous: bool
    star_index: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "theta": self.theta_grid,
                "margin_term": self.margin_term,
                "complexity_term": self.complexity_term,
                "confidence_term": np.full(self.theta_grid.shape, self.confidence_term),
                "bound": self.bound,
            }
        )

    def summary(self) -> Dict[str, Any]:
        return {
            "theta_star": self.theta_star,
            "bound_at_star": self.bound_at_star,
            "margin_term": float(self.margin_term[self.star_index]),
            "complexity_term": float(self.complexity_term[self.star_index]),
            "confidence_term": self.confidence_term,
            "vacuous": self.vacuous,
        }


def complexity_term(X: float, B_total: float, theta: float, n: int) -> float:
    """2 X B_total / (theta sqrt(n))."""
    if theta <= 0:
        raise RangeError(f"theta must be positive, got {theta}")
    if n < 1:
        raise RangeError(f"n must be >= 1, got {n}")
    return 2.0 * X * B_total / (theta * math.sqrt(n))


def margin_term(margins: Sequence[float], theta: float) -> float:
    """Fraction of margins strictly below theta."""
    if theta <= 0:
        raise RangeError(f"theta must be positive, got {theta}")
    m = np.asarray(margins, dtype=np.float64)
    if m.size == 0:
        raise InvalidInputError("margin_term needs at least one margin")
    return float(np.count_nonzero(m < theta) / m.size)


def confidence_term(delta: float, n: int) -> float:
    """sqrt(log(2 / delta) / 2n)."""
    if not 0.0 < delta < 1.0:
        raise RangeError(f"delta must lie in (0, 1), got {delta}")
    if n < 1:
        raise RangeError(f"n must be >= 1, got {n}")
    return math.sqrt(math.log(2.0 / delta) / (2.0 * n))


def default_grid(margins: Sequence[float], points: int = DEFAULT_GRID_POINTS) -> np.ndarray:
    """Log-spaced grid over [0.01 * max margin, max margin]."""
    top = float(np.max(margins)) if len(margins) else 0.0
    if top <= 0:
        return np.logspace(-3, 0, points)
    return np.geomspace(0.01 * top, top, points)


def evaluate_bound(inputs: BoundInputs, grid: Optional[Sequence[float]] = None) -> BoundReport:
    """All three bound terms at every grid point and the minimising theta.

    Ties in the minimum go to the smaller theta. The report is vacuous when
    the bound at theta* is at least 1.
    """
    thetas = default_grid(inputs.margins) if grid is None else np.asarray(grid, dtype=np.float64)
    if thetas.ndim != 1 or thetas.size == 0:
        raise RangeError("theta grid must be a nonempty sequence")
    if np.any(thetas <= 0) or not np.all(np.isfinite(thetas)):
        raise RangeError("theta grid values must be finite and positive")

    sorted_margins = np.sort(inputs.margins)
    m_term = np.searchsorted(sorted_margins, thetas, side="left") / inputs.n
    c_term = 2.0 * inputs.X * inputs.B_total / (thetas * math.sqrt(inputs.n))
    conf = confidence_term(inputs.delta, inputs.n)
    total = m_term + c_term + conf

    best = total.min()
    candidates = np.flatnonzero(total == best)
    star = int(candidates[np.argmin(thetas[candidates])])
    report = BoundReport(
        theta_grid=thetas,
        margin_term=m_term,
        complexity_term=c_term,
        confidence_term=conf,
        bound=total,
        theta_star=float(thetas[star]),
        bound_at_star=float(total[star]),
        vacuous=bool(total[star] >= 1.0),
        star_index=star,
    )
    logger.debug(
        f"Bound minimised at theta*={report.theta_star:.4g}: {report.bound_at_star:.4f}"
        f"{' (vacuous)' if report.vacuous else ''}"
    )
    return report


def estimate_X(
    model: FrozenModel, dataset: LabeledDataset, adapters: Sequence[AdapterState]
) -> float:
    """Largest feature-map norm over rounds and examples.

    Each adapter contributes its round's windows and projections; features
    are taken at v = 0 on the given model weights.
    """
    if len(dataset) == 0:
        raise InvalidInputError("cannot estimate X on an empty dataset")
    best = 0.0
    for adapter in adapters:
        base = adapter.with_v(np.zeros_like(adapter.v))
        phi = margin_features(model, dataset.features, dataset.labels, base)
        best = max(best, float(np.max(np.linalg.norm(phi, axis=1))))
    return best


@dataclass
class RegressionAudit:
    """Correct-to-incorrect flips at one merge."""

    flips: np.ndarray
    flip_margins: np.ndarray
    threshold: float
    violations: np.ndarray
    regression_rate: float
    correct_before: int

    @property
    def count(self) -> int:
        return int(self.flips.shape[0])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "flips": self.count,
            "threshold": self.threshold,
            "violations": int(self.violations.shape[0]),
            "regression_rate": self.regression_rate,
        }


def _margin_array(obj: Any) -> np.ndarray:
    for name in ("margins", "margin"):
        if hasattr(obj, name):
            return np.asarray(getattr(obj, name), dtype=np.float64)
    return np.asarray(obj, dtype=np.float64)


def regression_audit(before: Any, after: Any, M: int, eps: float, H: float) -> RegressionAudit:
    """List flips at a merge and check each against margin < M * eps * H.

    `before` and `after` are margin arrays (or evaluations carrying them) over
    the same examples. eps is the largest per-module spectral norm of the
    merged delta. Violations are reported, never raised.
    """
    m_before = _margin_array(before)
    m_after = _margin_array(after)
    if m_before.shape != m_after.shape:
        raise ShapeError(
            f"audit inputs differ in length: {m_before.shape} vs {m_after.shape}",
            expected=m_before.shape,
            actual=m_after.shape,
        )
    correct_before = m_before > 0
    flips = np.flatnonzero(correct_before & ~(m_after > 0))
    threshold = float(M * eps * H)
    flip_margins = m_before[flips]
    violations = flips[flip_margins >= threshold]
    n_correct = int(np.count_nonzero(correct_before))
    rate = flips.shape[0] / n_correct if n_correct else 0.0
    if violations.size:
        logger.warning(
            f"{violations.size} flip(s) exceed the regression threshold {threshold:.4g}"
        )
    return RegressionAudit(
        flips=flips,
        flip_margins=flip_margins,
        threshold=threshold,
        violations=violations,
        regression_rate=float(rate),
        correct_before=n_correct,
    )


@dataclass
class TrajectoryPoint:
    round: int
    theta_star: float
    bound_at_star: float
    margin_term: float
    complexity_term: float
    vacuous: bool


def bound_trajectory(
    margin_snapshots: Sequence[np.ndarray],
    cumulative_v_norms: Sequence[float],
    X: float,
    delta: float = DEFAULT_DELTA,
) -> List[TrajectoryPoint]:
    """Bound at theta* after every round.

    margin_snapshots[0] holds the margins before round 1 and
    margin_snapshots[t] those after round t.
    """
    if len(margin_snapshots) != len(cumulative_v_norms) + 1:
        raise ShapeError(
            f"{len(margin_snapshots)} snapshot(s) for {len(cumulative_v_norms)} round(s)"
        )
    points = []
    for t, B in enumerate(cumulative_v_norms, start=1):
        margins = np.asarray(margin_snapshots[t], dtype=np.float64)
        report = evaluate_bound(BoundInputs(margins=margins, B_total=B, X=X, n=margins.shape[0], delta=delta))
        points.append(
            TrajectoryPoint(
                round=t,
                theta_star=report.theta_star,
                bound_at_star=report.bound_at_star,
                margin_term=float(report.margin_term[report.star_index]),
                complexity_term=float(report.complexity_term[report.star_index]),
                vacuous=report.vacuous,
            )
        )
    return points


@dataclass(frozen=True)
class ConfidenceInterval:
    estimate: float
    low: float
    high: float
    level: float = 0.95
    resamples: int = 1000

    def to_dict(self) -> Dict[str, float]:
        return {"estimate": self.estimate, "low": self.low, "high": self.high, "level": self.level}


def bootstrap_accuracy_ci(
    correct: Sequence[bool], resamples: int = 1000, seed: int = 0, level: float = 0.95
) -> ConfidenceInterval:
    """Percentile bootstrap interval for an accuracy."""
    c = np.asarray(correct, dtype=np.float64)
    if c.size == 0:
        raise InvalidInputError("bootstrap needs at least one example")
    if resamples < 1:
        raise RangeError(f"resamples must be >= 1, got {resamples}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    stats = np.empty(resamples)
    for i in range(resamples):
        stats[i] = c[rng.integers(0, c.size, size=c.size)].mean()
    alpha = (1.0 - level) / 2.0
    low, high = np.quantile(stats, [alpha, 1.0 - alpha])
    return ConfidenceInterval(
        estimate=float(c.mean()), low=float(low), high=float(high), level=level, resamples=resamples
    )


def binary_metrics(labels: Sequence[int], scores: Sequence[float]) -> Dict[str, float]:
    """Accuracy, F1 and ROC-AUC of a two-class task.

    `scores` are positive-class scores; a score above 0 predicts class 1.
    AUC uses average ranks, so tied scores count half.
    """
    y = np.asarray(labels, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.size == 0:
        raise ShapeError("labels and scores must be nonempty and of equal length")
    if np.any((y != 0) & (y != 1)):
        raise InvalidInputError("binary metrics need labels in {0, 1}")

    pred = (s > 0).astype(np.int64)
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0

    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        auc = float("nan")
    else:
        ranks = pd.Series(s).rank(method="average").to_numpy()
        auc = (ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return {"accuracy": float(np.mean(pred == y)), "f1": float(f1), "auc": float(auc)}
