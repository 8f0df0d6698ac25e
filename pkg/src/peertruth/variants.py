"""Augmented peer truth serum and quadratic scoring against a benchmark.

The augmented score swaps the sampled frequency for a forest estimate of
P(label | descriptors), floored at epsilon, so raters only profit by
beating what public descriptors already predict. The quadratic rule scores
a probability forecast of a binary success event against the benchmark
forecast for the same event.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NoBenchmarkData, UnresolvedEvent
from .forest import DescriptorVector, Forest, regularize
from .mechanism import PENDING, PROVISIONAL, LabelSet, Score

COMMUNITY = "community_average"
ALGORITHMIC = "algorithmic"
CONSTANT = "constant"

CONSTANT_BENCHMARK = 0.5
DEFAULT_EPSILON = 0.05
SUCCESS = "1"


@dataclass(frozen=True)
class ProbabilisticRating:
    rater: str
    item: str
    p: float

    def __post_init__(self) -> None:
        _check_probability(self.p)


@dataclass
class SuccessEvent:
    item: str
    description: str
    outcome: Optional[int] = None
    resolution_time: Optional[float] = None

    def resolve(self, outcome: int, when: Optional[float] = None) -> None:
        if self.outcome is not None:
            raise ValueError(f"success event for {self.item!r} already resolved")
        if outcome not in (0, 1):
            raise ValueError("outcome must be 0 or 1")
        self.outcome = outcome
        self.resolution_time = when


@dataclass(frozen=True)
class BenchmarkPrediction:
    p_B: float
    source: str

    def __post_init__(self) -> None:
        _check_probability(self.p_B)


def _check_probability(p) -> None:
    arr = np.asarray(p, dtype=float)
    if not np.all((arr >= 0.0) & (arr <= 1.0)):
        raise ValueError(f"probability {p!r} outside [0, 1]")


def augmented_score(
    r_w: str,
    r_p: Optional[str],
    q_tilde: Sequence[float],
    labels: LabelSet,
    alpha: float = 1.0,
) -> Score:
    """Peer truth serum with ``q_tilde[r_w]`` in place of the sampled frequency.

    ``q_tilde`` is the regularized forest estimate for the item's descriptors.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if r_p is None:
        return Score(0.0, PENDING)
    if r_w != r_p:
        return Score(-alpha, PROVISIONAL)
    return Score(alpha * (1.0 / float(q_tilde[labels.index(r_w)]) - 1.0), PROVISIONAL)


def q_tilde_for(forest: Forest, d: DescriptorVector, eps: float = DEFAULT_EPSILON) -> np.ndarray:
    return regularize(forest.predict_proba(d), eps)


def quadratic_score(p: float, o: int) -> float:
    """Quadratic score; accepts arrays of forecasts and outcomes as well as scalars."""
    _check_probability(p)
    return 1.0 - 2.0 * (o - p) ** 2


def quadratic_accuracy(p_i: float, p_B: float, o: Optional[int]) -> float:
    """Rater's quadratic score minus the benchmark's on the same outcome."""
    if o is None:
        raise UnresolvedEvent("success event has no outcome yet")
    return quadratic_score(p_i, o) - quadratic_score(p_B, o)


def benchmark_prediction(
    mode: str,
    community: Sequence[ProbabilisticRating] = (),
    rater: Optional[str] = None,
    forest: Optional[Forest] = None,
    d: Optional[DescriptorVector] = None,
    fallback: bool = False,
) -> BenchmarkPrediction:
    """Benchmark forecast ``p_B`` for one rater.

    ``community_average`` averages the other raters' forecasts (``rater``'s
    own is left out); ``algorithmic`` reads the forest's probability of the
    ``"1"`` outcome; ``constant`` is 0.5 for every item. With ``fallback``,
    missing data degrades to the constant instead of raising.
    """
    if mode == COMMUNITY:
        others = [r.p for r in community if r.rater != rater]
        if others:
            return BenchmarkPrediction(sum(others) / len(others), COMMUNITY)
    elif mode == ALGORITHMIC:
        if forest is not None and d is not None:
            proba = forest.predict_proba(d)
            p = float(proba[forest.labels.index(SUCCESS)]) if SUCCESS in forest.labels else 0.0
            return BenchmarkPrediction(min(1.0, max(0.0, p)), ALGORITHMIC)
    elif mode == CONSTANT:
        return BenchmarkPrediction(CONSTANT_BENCHMARK, CONSTANT)
    else:
        raise ValueError(f"unknown benchmark mode {mode!r}")
    if fallback:
        return BenchmarkPrediction(CONSTANT_BENCHMARK, CONSTANT)
    raise NoBenchmarkData(f"no data for a {mode} benchmark")
