"""Discrete-time survival mathematics.

Survival is modelled as N conditional interval-survival probabilities.
This module builds the interval scheme from training times, converts a
(time, event) label into the two binary target vectors consumed by the
negative log-likelihood, evaluates that likelihood and its analytic
gradient, converts predictions back into an expected survival time, and
scores orderings with the concordance index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateIntervalError,
    ShapeMismatchError,
    UndefinedMetricError,
)

DEFAULT_EPS = 1e-7


@dataclass(frozen=True)
class SurvivalLabel:
    """Observed outcome: time to event, or time of last follow-up if censored."""

    time: float
    event: bool

    def __post_init__(self):
        if not self.time > 0:
            raise ValueError(f"survival time must be > 0, got {self.time}")


@dataclass(frozen=True)
class IntervalScheme:
    """N contiguous time intervals (q_{k-1}, q_k] with q_0 = 0."""

    boundaries: tuple[float, ...]  # q_0 = 0 < q_1 < ... < q_N

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        if b[0] != 0.0:
            raise ValueError("first boundary must be 0")
        if not np.all(np.diff(b) > 0):
            raise DegenerateIntervalError(
                f"interval boundaries must be strictly increasing, got {self.boundaries}"
            )

    @property
    def n_intervals(self) -> int:
        return len(self.boundaries) - 1

    @property
    def durations(self) -> np.ndarray:
        return np.diff(np.asarray(self.boundaries, dtype=float))

    def interval_of(self, time: float) -> int:
        """1-based index k with time in (q_{k-1}, q_k]; times > q_N clamp to N."""
        if not time > 0:
            raise ValueError(f"time must be > 0, got {time}")
        k = int(np.searchsorted(self.boundaries, time, side="left"))
        return min(k, self.n_intervals)

    def to_text(self) -> str:
        lines = [f"N = {self.n_intervals}"]
        lines.append("boundaries = " + ", ".join(repr(float(b)) for b in self.boundaries))
        lines.append("durations = " + ", ".join(repr(float(t)) for t in self.durations))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "IntervalScheme":
        for line in text.splitlines():
            key, _, value = line.partition("=")
            if key.strip() == "boundaries":
                return cls(tuple(float(v) for v in value.split(",")))
        raise ValueError("no 'boundaries' line found")


@dataclass(frozen=True)
class DiscreteLabels:
    """Binary targets: survived[k]=1 for intervals fully survived before the
    outcome; event_at[k]=1 marks the event interval (uncensored only)."""

    survived: np.ndarray
    event_at: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.survived)
        e = np.asarray(self.event_at)
        if s.shape != e.shape:
            raise ShapeMismatchError(f"label vectors disagree: {s.shape} vs {e.shape}")


@dataclass
class PredictedSurvival:
    """Conditional per-interval survival probabilities plus their scheme."""

    probabilities: np.ndarray
    scheme: IntervalScheme = field(repr=False)

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float)
        if p.ndim != 1 or len(p) != self.scheme.n_intervals:
            raise ShapeMismatchError(
                f"expected {self.scheme.n_intervals} probabilities, got shape {p.shape}"
            )


def make_intervals(train_times: Sequence[float], n_intervals: int) -> IntervalScheme:
    """Build an interval scheme whose interior boundaries are the k/N
    empirical quantiles (linear interpolation) of the training times, so
    events spread evenly across intervals. The last boundary is max(times).
    """
    times = np.asarray(list(train_times), dtype=float)
    if n_intervals < 2:
        raise ValueError(f"need at least 2 intervals, got {n_intervals}")
    if times.size < n_intervals:
        raise DegenerateIntervalError(
            f"need at least {n_intervals} training times, got {times.size}"
        )
    qs = [float(np.quantile(times, k / n_intervals)) for k in range(1, n_intervals)]
    boundaries = (0.0, *qs, float(times.max()))
    if not np.all(np.diff(boundaries) > 0):
        raise DegenerateIntervalError(
            f"quantile boundaries collapse ({boundaries}); use a smaller N"
        )
    return IntervalScheme(boundaries)


def make_labels(label: SurvivalLabel, scheme: IntervalScheme) -> DiscreteLabels:
    """Discretize one outcome.

    With k the interval containing the outcome time: intervals 1..k-1 are
    marked survived; the event interval k is marked only for uncensored
    patients. Censored patients get an all-zero event vector.
    """
    n = scheme.n_intervals
    k = scheme.interval_of(label.time)
    survived = np.zeros(n, dtype=np.int8)
    survived[: k - 1] = 1
    event_at = np.zeros(n, dtype=np.int8)
    if label.event:
        event_at[k - 1] = 1
    return DiscreteLabels(survived, event_at)


def _loss_terms(s_pred, labels: DiscreteLabels, eps: float):
    s_pred = np.asarray(s_pred, dtype=float)
    s = np.asarray(labels.survived, dtype=float)
    e = np.asarray(labels.event_at, dtype=float)
    if not (s_pred.shape == s.shape == e.shape):
        raise ShapeMismatchError(
            f"shapes disagree: pred {s_pred.shape}, survived {s.shape}, event {e.shape}"
        )
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    surv_term = 1.0 + s * (s_pred - 1.0)  # = p_i on survived intervals, else 1
    evt_term = 1.0 - e * s_pred  # = 1 - p_i on the event interval, else 1
    return s, e, surv_term, evt_term


def survival_loss(s_pred, labels: DiscreteLabels, eps: float = DEFAULT_EPS) -> float:
    """Negative log-likelihood of interval survival predictions.

    loss = -sum_i [ log(max(1 + S_i (p_i - 1), eps)) + log(max(1 - E_i p_i, eps)) ]

    where S marks survived intervals and E the event interval. Both log
    arguments are clamped at eps, keeping the loss finite everywhere.
    """
    _, _, surv_term, evt_term = _loss_terms(s_pred, labels, eps)
    return float(
        -(np.log(np.maximum(surv_term, eps)).sum() + np.log(np.maximum(evt_term, eps)).sum())
    )


def survival_loss_grad(s_pred, labels: DiscreteLabels, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Analytic gradient of survival_loss w.r.t. the predictions.

    d/dp_i = -S_i / (1 + S_i (p_i - 1)) + E_i / (1 - E_i p_i); zero on
    components where the corresponding log term is clamped below eps.
    """
    s, e, surv_term, evt_term = _loss_terms(s_pred, labels, eps)
    g = np.zeros_like(surv_term)
    g -= np.where(surv_term < eps, 0.0, s / np.maximum(surv_term, eps))
    g += np.where(evt_term < eps, 0.0, e / np.maximum(evt_term, eps))
    return g


def predict_time(pred: PredictedSurvival) -> float:
    """Expected survival time: sum_k (prod_{i<=k} p_i) * T_k."""
    p = np.asarray(pred.probabilities, dtype=float)
    return float(np.cumprod(p).dot(pred.scheme.durations))


def c_index(pred_times: Sequence[float], labels: Sequence[SurvivalLabel]) -> float:
    """Concordance index over predicted times.

    A pair (i, j) is comparable when time_i < time_j and patient i had an
    observed event; it is concordant when the prediction orders it the same
    way, and ties in predictions count half. O(n^2) pair enumeration.
    """
    preds = np.asarray(list(pred_times), dtype=float)
    if len(preds) != len(labels):
        raise ShapeMismatchError(f"{len(preds)} predictions for {len(labels)} labels")
    if len(preds) < 2:
        raise UndefinedMetricError("need at least 2 patients")
    comparable = 0
    score = 0.0
    for i, lab_i in enumerate(labels):
        if not lab_i.event:
            continue
        for j, lab_j in enumerate(labels):
            if i == j or not lab_i.time < lab_j.time:
                continue
            comparable += 1
            if preds[i] < preds[j]:
                score += 1.0
            elif preds[i] == preds[j]:
                score += 0.5
    if comparable == 0:
        raise UndefinedMetricError("no comparable pairs (all censored or tied times)")
    return score / comparable
