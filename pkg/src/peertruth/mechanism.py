"""Robust peer truth serum scoring for categorical ratings.

A rater's report on an item is compared against a randomly chosen peer
rating of the same item. Matching reports earn ``alpha * (1/F - 1)`` where
``F`` is the share of the same label among ratings sampled from other
items; a mismatch earns ``-alpha``. A rater with no peer yet is pending and
scores zero.

All functions here are pure apart from the explicit ``rng`` argument.
"""

from __future__ import annotations

import hashlib
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import InsufficientCorpus

PENDING = "pending"
PROVISIONAL = "provisional"
FINAL = "final"

SAMPLED = "sampled"
EXPECTATION = "expectation"

DEFAULT_MAX_SAMPLE = 10


@dataclass(frozen=True)
class LabelSet:
    """Ordered categorical labels; position is the label's index."""

    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) < 2:
            raise ValueError("a label set needs at least two labels")
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate labels in {labels!r}")

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ValueError(f"unknown label {label!r}; expected one of {self.labels}") from None

    def __contains__(self, label: object) -> bool:
        return label in self.labels

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[str]:
        return iter(self.labels)

    def __getitem__(self, i: int) -> str:
        return self.labels[i]


REPORT_LABELS = LabelSet(("u", "s", "e"))


@dataclass(frozen=True)
class RatingEvent:
    rater: str
    item: str
    question: str
    label: str
    seq: int = 0


@dataclass(frozen=True)
class FrequencyEstimate:
    label: str
    value: float
    sample_size: int

    def __post_init__(self) -> None:
        if self.sample_size < 1:
            raise ValueError("sample_size must be >= 1")
        if not (1.0 / self.sample_size <= self.value <= 1.0):
            raise ValueError(f"frequency {self.value} outside [1/{self.sample_size}, 1]")


@dataclass(frozen=True)
class ScoreParams:
    """Scoring knobs.

    ``n`` is the number of sampled reports behind ``F``; ``None`` picks
    ``min(10, available other items + 1)`` per call.
    """

    alpha: float = 1.0
    n: Optional[int] = None
    include_peer_in_frequency: bool = False
    peer_mode: str = EXPECTATION

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.n is not None and self.n < 2:
            raise ValueError("n must be >= 2")
        if self.peer_mode not in (SAMPLED, EXPECTATION):
            raise ValueError(f"peer_mode must be {SAMPLED!r} or {EXPECTATION!r}")


class Score(NamedTuple):
    value: float
    status: str


@dataclass(frozen=True)
class AccuracyScore:
    rater: str
    item: str
    question: str
    value: float
    status: str


def stable_key(value: object) -> int:
    digest = hashlib.blake2b(str(value).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def keyed_rng(seed: int, *keys: object) -> np.random.Generator:
    """Generator derived from ``seed`` and identifiers, independent of event order."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [stable_key(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


class RatingPool:
    """Active ratings indexed by question and item.

    Items and, within an item, raters are kept in sorted order so that the
    draws made against a pool depend only on its contents, never on the
    order in which ratings arrived.
    """

    def __init__(self, ratings: Iterable[RatingEvent] = ()):
        by_q: dict[str, dict[str, dict[str, str]]] = {}
        for r in ratings:
            channel = by_q.setdefault(r.question, {}).setdefault(r.item, {})
            if r.rater in channel:
                raise ValueError(
                    f"rater {r.rater!r} has two active ratings on {r.item!r}/{r.question!r}"
                )
            channel[r.rater] = r.label
        self._raters: dict[str, dict[str, tuple[str, ...]]] = {}
        self._labels: dict[str, dict[str, tuple[str, ...]]] = {}
        self._items: dict[str, list[str]] = {}
        self._sole: dict[str, dict[str, set[str]]] = {}
        for q, items in by_q.items():
            raters_q, labels_q, sole_q = {}, {}, {}
            for item, channel in items.items():
                order = sorted(channel)
                raters_q[item] = tuple(order)
                labels_q[item] = tuple(channel[w] for w in order)
                if len(order) == 1:
                    sole_q.setdefault(order[0], set()).add(item)
            self._raters[q] = raters_q
            self._labels[q] = labels_q
            self._items[q] = sorted(items)
            self._sole[q] = sole_q

    @classmethod
    def of(cls, log: "RatingPool | Iterable[RatingEvent]") -> "RatingPool":
        return log if isinstance(log, RatingPool) else cls(log)

    @property
    def questions(self) -> list[str]:
        return sorted(self._items)

    def items(self, question: str) -> list[str]:
        return self._items.get(question, [])

    def ratings(self, question: str, item: str) -> list[tuple[str, str]]:
        raters = self._raters.get(question, {}).get(item, ())
        labels = self._labels.get(question, {}).get(item, ())
        return list(zip(raters, labels))

    def peer_labels(self, question: str, item: str, rater: str) -> list[str]:
        return [lab for w, lab in self.ratings(question, item) if w != rater]

    def eligible_count(self, question: str, item_k: str, rater_w: str) -> int:
        """Other items holding at least one rating not authored by ``rater_w``."""
        items = self._items.get(question, [])
        count = len(items)
        if item_k in self._raters.get(question, {}):
            count -= 1
        sole = self._sole.get(question, {}).get(rater_w, set())
        return count - len(sole) + (item_k in sole)

    def _resolve_question(self, question: Optional[str]) -> str:
        if question is not None:
            return question
        if len(self._items) != 1:
            raise ValueError("question must be given when the pool spans several questions")
        return next(iter(self._items))

    def _is_eligible(self, question: str, item: str, item_k: str, rater_w: str) -> bool:
        if item == item_k:
            return False
        raters = self._raters[question][item]
        return not (len(raters) == 1 and raters[0] == rater_w)

    def draw_other_labels(
        self, question: str, item_k: str, rater_w: str, count: int, rng: np.random.Generator
    ) -> list[str]:
        """One rating (not by ``rater_w``) from each of ``count`` distinct other items."""
        items = self._items[question]
        eligible = self.eligible_count(question, item_k, rater_w)
        count = min(count, eligible)
        if eligible <= 2 * count:
            pool = [it for it in items if self._is_eligible(question, it, item_k, rater_w)]
            picks = rng.choice(len(pool), size=count, replace=False)
            chosen = [pool[i] for i in picks]
        else:
            chosen, seen = [], set()
            while len(chosen) < count:
                for idx in rng.integers(len(items), size=2 * count):
                    it = items[idx]
                    if it in seen or not self._is_eligible(question, it, item_k, rater_w):
                        continue
                    seen.add(it)
                    chosen.append(it)
                    if len(chosen) == count:
                        break
        u = rng.random(len(chosen))
        out = []
        for it, ui in zip(chosen, u):
            raters = self._raters[question][it]
            labels = self._labels[question][it]
            if rater_w in raters:
                labels = tuple(lab for w, lab in zip(raters, labels) if w != rater_w)
            out.append(labels[int(ui * len(labels))])
        return out


def tau(r_w: str, r_p: str, f: FrequencyEstimate) -> float:
    return 1.0 / f.value if r_w == r_p else 0.0


def rptsc_score(r_w: str, r_p: Optional[str], f: Optional[FrequencyEstimate], alpha: float) -> Score:
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if r_p is None:
        return Score(0.0, PENDING)
    return Score(alpha * (tau(r_w, r_p, f) - 1.0), PROVISIONAL)


def _sample_size(params: ScoreParams, eligible: int) -> int:
    if params.n is not None:
        return min(params.n, eligible + 1)
    return min(DEFAULT_MAX_SAMPLE, eligible + 1)


def _frequency(label: str, sample: Sequence[str], n: int) -> FrequencyEstimate:
    share = sum(1 for x in sample if x == label) / len(sample)
    return FrequencyEstimate(label, max(share, 1.0 / n), n)


def _other_sample(pool, question, item_k, rater_w, params, rng) -> tuple[list[str], int]:
    eligible = pool.eligible_count(question, item_k, rater_w)
    if eligible < 1:
        raise InsufficientCorpus(
            f"no other rated item available for {item_k!r}/{question!r} (rater {rater_w!r})"
        )
    n = _sample_size(params, eligible)
    return pool.draw_other_labels(question, item_k, rater_w, n - 1, rng), n


def sample_frequency(
    log,
    item_k: str,
    rater_w: str,
    label: str,
    params: ScoreParams,
    rng: np.random.Generator,
    question: Optional[str] = None,
    peer_label: Optional[str] = None,
) -> FrequencyEstimate:
    """Share of ``label`` among ratings sampled from ``n - 1`` other items.

    With ``include_peer_in_frequency`` one rating of ``item_k`` itself (other
    than ``rater_w``'s) joins the sample; pass ``peer_label`` to fix which.
    The share is clamped below at ``1/n``.
    """
    pool = RatingPool.of(log)
    question = pool._resolve_question(question)
    sample, n = _other_sample(pool, question, item_k, rater_w, params, rng)
    if params.include_peer_in_frequency:
        if peer_label is None:
            peers = pool.peer_labels(question, item_k, rater_w)
            if peers:
                peer_label = peers[int(rng.integers(len(peers)))]
        if peer_label is not None:
            sample = sample + [peer_label]
    return _frequency(label, sample, n)


def select_peer(log, item_k: str, rater_w: str, question: str, rng: np.random.Generator) -> Optional[str]:
    peers = RatingPool.of(log).peer_labels(question, item_k, rater_w)
    if not peers:
        return None
    return peers[int(rng.integers(len(peers)))]


def score_item_ratings(
    log,
    item_k: str,
    question: str,
    params: ScoreParams,
    rng: np.random.Generator,
    finalized: bool = False,
    pending_without_corpus: bool = False,
) -> dict[str, AccuracyScore]:
    """Score every rating of one item channel.

    Raters are visited in sorted order and each draws its own frequency
    sample. In expectation mode the score is averaged over all peers.
    With ``pending_without_corpus`` a rater with no other rated item to
    sample from is left pending instead of raising ``InsufficientCorpus``.
    """
    pool = RatingPool.of(log)
    status = FINAL if finalized else PROVISIONAL
    out: dict[str, AccuracyScore] = {}
    for rater, label in pool.ratings(question, item_k):
        peers = pool.peer_labels(question, item_k, rater)
        if not peers or (pending_without_corpus and pool.eligible_count(question, item_k, rater) < 1):
            out[rater] = AccuracyScore(rater, item_k, question, 0.0, PENDING)
            continue
        sample, n = _other_sample(pool, question, item_k, rater, params, rng)
        if params.peer_mode == SAMPLED:
            peer = peers[int(rng.integers(len(peers)))]
            full = sample + [peer] if params.include_peer_in_frequency else sample
            value = rptsc_score(label, peer, _frequency(label, full, n), params.alpha).value
        elif params.include_peer_in_frequency:
            total = 0.0
            for peer in peers:
                f = _frequency(label, sample + [peer], n)
                total += rptsc_score(label, peer, f, params.alpha).value
            value = total / len(peers)
        else:
            f = _frequency(label, sample, n)
            total = 0.0
            for peer in peers:
                total += rptsc_score(label, peer, f, params.alpha).value
            value = total / len(peers)
        out[rater] = AccuracyScore(rater, item_k, question, value, status)
    return out
