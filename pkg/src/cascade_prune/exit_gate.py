"""Early-exit scores computed from the small model's own generation.

Every criterion maps into [0, 1] with higher meaning "trust the small model",
so a single threshold domain serves all of them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ScoreError

CRITERIA = ("combined", "confidence", "consistency",
            "quantile_q1", "quantile_q2", "quantile_q3", "entropy")
QUANTILE_LEVELS = {"quantile_q1": 0.25, "quantile_q2": 0.50, "quantile_q3": 0.75}
NEEDS_CONSISTENCY = frozenset({"combined", "consistency"})


@dataclass(frozen=True)
class ExitDecision:
    s_confidence: float
    s_consistency: float
    s: float
    threshold: float
    exit: bool
    criterion: str

    def to_dict(self) -> dict:
        return {"s_confidence": self.s_confidence, "s_consistency": self.s_consistency,
                "s": self.s, "threshold": self.threshold, "exit": self.exit,
                "criterion": self.criterion}


def _probs(values: Sequence[float]) -> np.ndarray:
    p = np.asarray(values, dtype=np.float64).ravel()
    if p.size == 0:
        raise ScoreError("need at least one generated token")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ScoreError("probabilities must lie in [0, 1]")
    return p


def confidence_score(step_probs: Sequence[float]) -> float:
    """Length-normalized sequence probability (geometric mean of step probabilities)."""
    p = _probs(step_probs)
    if np.any(p == 0):
        return 0.0
    return float(math.exp(np.mean(np.log(p))))


def consistency_score(forced_probs: Sequence[float], length_normalized: bool = False) -> float:
    """Product of the pruned model's teacher-forced probabilities.

    The raw product is the default; ``length_normalized`` switches to the
    geometric mean for experiments.
    """
    p = _probs(forced_probs)
    if length_normalized:
        return confidence_score(p)
    return float(np.prod(p))


def decision_score(s_confidence: float, s_consistency: float) -> float:
    for v in (s_confidence, s_consistency):
        if not 0 <= v <= 1:
            raise ScoreError(f"score {v} outside [0, 1]")
    return (s_confidence + s_consistency) / 2


def quantile_score(step_probs: Sequence[float], q: float) -> float:
    """q-th quantile of the step probabilities, linear interpolation."""
    if not 0 <= q <= 1:
        raise ScoreError("quantile level must lie in [0, 1]")
    return float(np.quantile(_probs(step_probs), q))


def entropy_score(step_dists: np.ndarray) -> float:
    """``exp(-mean Shannon entropy)`` of the per-step vocabulary distributions."""
    d = np.atleast_2d(np.asarray(step_dists, dtype=np.float64))
    if d.shape[0] == 0:
        raise ScoreError("need at least one distribution")
    if np.any(d < 0) or np.any(np.abs(d.sum(axis=1) - 1) > 1e-6):
        raise ScoreError("every step distribution must be nonnegative and sum to 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(d > 0, d * np.log(d), 0.0)
    entropies = -plogp.sum(axis=1)
    return float(math.exp(-entropies.mean()))


def criterion_score(criterion: str, step_probs, step_dists=None, forced_probs=None) -> float:
    if criterion == "confidence":
        return confidence_score(step_probs)
    if criterion == "consistency":
        return consistency_score(_require(forced_probs, criterion))
    if criterion == "combined":
        return decision_score(confidence_score(step_probs),
                              consistency_score(_require(forced_probs, criterion)))
    if criterion in QUANTILE_LEVELS:
        return quantile_score(step_probs, QUANTILE_LEVELS[criterion])
    if criterion == "entropy":
        return entropy_score(_require(step_dists, criterion))
    raise ScoreError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")


def _require(value, criterion):
    if value is None:
        raise ScoreError(f"criterion {criterion!r} needs inputs that were not provided")
    return value


def decide(criterion: str, threshold: float, step_probs, step_dists=None,
           forced_probs=None) -> ExitDecision:
    """Score one generation and compare against ``threshold`` (ties exit)."""
    s_conf = confidence_score(step_probs)
    s_cons = consistency_score(forced_probs) if forced_probs is not None else float("nan")
    s = criterion_score(criterion, step_probs, step_dists, forced_probs)
    return ExitDecision(s_conf, s_cons, s, float(threshold), bool(s >= threshold), criterion)


def calibrate_threshold(scores: Sequence[float], target_exit_ratio: float) -> float:
    """Threshold under which roughly ``target_exit_ratio`` of ``scores`` exit.

    Picks the ``m``-th largest score with ``m = round(target * n)``, so with
    distinct scores exactly ``m`` of them clear the threshold.
    """
    s = np.sort(np.asarray(scores, dtype=np.float64))[::-1]
    if s.size == 0:
        raise ScoreError("cannot calibrate on an empty score pool")
    if not 0 <= target_exit_ratio <= 1:
        raise ScoreError("target exit ratio must lie in [0, 1]")
    m = math.floor(target_exit_ratio * s.size + 0.5)
    if m == 0:
        return float(np.nextafter(s[0], np.inf))
    return float(s[m - 1])


def exit_ratio(scores: Sequence[float], threshold: float) -> float:
    s = np.asarray(scores, dtype=np.float64)
    return float(np.mean(s >= threshold))
