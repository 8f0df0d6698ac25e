"""Peer-truth scoring for research platforms.

Accuracy scores for categorical ratings (sampled-frequency and
forest-benchmarked variants) and for probability forecasts, a replayable
reputation ledger, a token market, and Monte-Carlo incentive experiments.
"""

from .forest import DescriptorSchema, DescriptorVector, Forest, ForestConfig, TrainingSet, train_forest
from .ledger import EventLog, LedgerConfig, ReputationState, Weights, replay
from .mechanism import LabelSet, RatingEvent, ScoreParams, rptsc_score, score_item_ratings
from .variants import augmented_score, quadratic_accuracy, quadratic_score

__version__ = "0.1.0"

__all__ = [
    "DescriptorSchema",
    "DescriptorVector",
    "EventLog",
    "Forest",
    "ForestConfig",
    "LabelSet",
    "LedgerConfig",
    "RatingEvent",
    "ReputationState",
    "ScoreParams",
    "TrainingSet",
    "Weights",
    "augmented_score",
    "quadratic_accuracy",
    "quadratic_score",
    "replay",
    "rptsc_score",
    "score_item_ratings",
    "train_forest",
]
