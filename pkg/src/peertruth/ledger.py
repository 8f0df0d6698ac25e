"""Append-only platform log and the reputation derived from replaying it.

``LedgerState`` holds the structural state (users, items, rating channels,
token accounts) and validates every event before it lands. ``replay``
rebuilds that state from the events and then scores every channel, so
reputation is always a pure function of ``(events, weights, params, seed)``.

A user's reputation is ``r0 + rp + rr + ep + er``: initial reputation,
rating totals of their finalized projects and reports, and the weighted
accuracy scores of the ratings they gave on projects and reports.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import events as ev
from .errors import (
    InvalidPayload,
    SchemaMismatch,
    SequenceGap,
    UnauthorizedReset,
    UnknownQuestion,
)
from .forest import (
    DescriptorSchema,
    DescriptorVector,
    Forest,
    ForestConfig,
    TrainingSet,
    _encode,
    regularize,
    train_excluding,
)
from .mechanism import (
    EXPECTATION,
    FINAL,
    PENDING,
    PROVISIONAL,
    REPORT_LABELS,
    AccuracyScore,
    LabelSet,
    RatingEvent,
    RatingPool,
    ScoreParams,
    keyed_rng,
    score_item_ratings,
)
from .tokens import TokenConfig, TokenLedger
from .variants import (
    COMMUNITY,
    CONSTANT,
    DEFAULT_EPSILON,
    ProbabilisticRating,
    augmented_score,
    benchmark_prediction,
    quadratic_accuracy,
)

logger = logging.getLogger(__name__)

PROJECT = "project"
REPORT = "report"

ORIGINAL = "original"
AUGMENTED = "augmented"
QUADRATIC = "quadratic"
MECHANISMS = (ORIGINAL, AUGMENTED, QUADRATIC)


@dataclass(frozen=True)
class Weights:
    level_weights: Mapping[str, float] = field(default_factory=lambda: {"u": -1.0, "s": 1.0, "e": 2.0})
    beta_r: float = 1.0
    beta_p: float = 1.0
    project_scale: float = 1.0

    def __post_init__(self) -> None:
        if not (self.beta_r > 0 and self.beta_p > 0):
            raise ValueError("accuracy weights must be positive")


@dataclass(frozen=True)
class LedgerConfig:
    report_labels: LabelSet = REPORT_LABELS
    project_labels: LabelSet = REPORT_LABELS
    project_questions: tuple[str, ...] = ("contribution", "design")
    report_question: str = "quality"
    finalize_count: int = 5
    finalize_days: float = 30.0
    descriptor_schema: Optional[DescriptorSchema] = None
    tokens: TokenConfig = TokenConfig()
    quadratic_benchmark: str = COMMUNITY
    epsilon: float = DEFAULT_EPSILON
    forest: ForestConfig = ForestConfig()

    @classmethod
    def from_dict(cls, obj: Mapping) -> "LedgerConfig":
        kw = dict(obj)
        for key in ("report_labels", "project_labels"):
            if key in kw:
                kw[key] = LabelSet(tuple(kw[key]))
        if "project_questions" in kw:
            kw["project_questions"] = tuple(kw["project_questions"])
        if kw.get("descriptor_schema") is not None:
            s = kw["descriptor_schema"]
            kw["descriptor_schema"] = DescriptorSchema(s.get("n_numeric", 0), tuple(s.get("categories", ())))
        if "tokens" in kw:
            kw["tokens"] = TokenConfig(**kw["tokens"])
        if "forest" in kw:
            kw["forest"] = ForestConfig(**kw["forest"])
        return cls(**kw)


@dataclass
class Channel:
    """One rating question of one item."""

    item: str
    question: str
    probabilistic: bool = False
    active: dict[str, object] = field(default_factory=dict)
    archived: list[tuple[str, object, int]] = field(default_factory=list)
    finalized: bool = False
    opened_ts: float = 0.0
    description: str = ""
    outcome: Optional[int] = None

    @property
    def status(self) -> str:
        return "finalized" if self.finalized else "pending"


@dataclass
class ItemState:
    item: str
    kind: str
    author: str
    descriptors: DescriptorVector
    mechanism: str
    questions: dict[str, Channel]
    project: Optional[str] = None

    @property
    def finalized(self) -> bool:
        return all(ch.finalized for ch in self.questions.values())


def item_rating_total(ratings: Iterable[str], weights: Weights) -> float:
    """Level-weighted count of one item's ratings."""
    total = 0.0
    for label in ratings:
        try:
            total += weights.level_weights[label]
        except KeyError:
            raise ValueError(f"no level weight for label {label!r}") from None
    return total


def accuracy_component(scores: Iterable, beta: float) -> float:
    """``beta`` times the sum of non-pending accuracy scores."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    return beta * sum(s.value for s in scores if s.status != PENDING)


class LedgerState:
    def __init__(self, config: LedgerConfig = LedgerConfig()):
        self.config = config
        self.users: dict[str, float] = {}
        self.items: dict[str, ItemState] = {}
        self.tokens = TokenLedger(config.tokens)
        self.last_seq = 0
        self.last_ts: Optional[float] = None
        self._arity: Optional[tuple[int, int]] = None

    # -- validation helpers --------------------------------------------------

    def _user(self, user: str) -> None:
        if user not in self.users:
            raise InvalidPayload(f"unknown user {user!r}")

    def _item(self, item: str) -> ItemState:
        try:
            return self.items[item]
        except KeyError:
            raise InvalidPayload(f"unknown item {item!r}") from None

    def channel(self, item: str, question: str) -> Channel:
        state = self._item(item)
        try:
            return state.questions[question]
        except KeyError:
            raise UnknownQuestion(f"item {item!r} has no question {question!r}") from None

    def labels_for(self, item: ItemState) -> LabelSet:
        return self.config.project_labels if item.kind == PROJECT else self.config.report_labels

    def _descriptors(self, obj) -> DescriptorVector:
        try:
            d = DescriptorVector.from_json(obj)
        except (TypeError, ValueError, AttributeError) as exc:
            raise InvalidPayload(f"malformed descriptors: {exc}") from None
        schema = self.config.descriptor_schema
        if schema is not None:
            try:
                _encode(schema, d)
            except SchemaMismatch as exc:
                raise InvalidPayload(str(exc)) from None
        else:
            arity = (len(d.numeric), len(d.categorical))
            if self._arity is not None and arity != self._arity:
                raise InvalidPayload(f"descriptor arity {arity} differs from earlier items {self._arity}")
            if any(c < 0 for c in d.categorical):
                raise InvalidPayload("categorical descriptors must be non-negative")
            self._arity = arity
        return d

    # -- event application ---------------------------------------------------

    def apply(self, event: ev.LedgerEvent) -> None:
        if event.seq != self.last_seq + 1:
            raise SequenceGap(f"expected seq {self.last_seq + 1}, got {event.seq}")
        event.validate()
        if self.last_ts is not None and event.ts < self.last_ts:
            raise InvalidPayload(f"timestamp {event.ts} precedes {self.last_ts}")
        handler = getattr(self, f"_on_{event.kind}")
        handler(event.payload, event)
        self.last_seq = event.seq
        self.last_ts = event.ts

    def _on_UserJoined(self, p, e):
        self.tokens.mint_on_join(p["user"])
        self.users[p["user"]] = float(p.get("r0", 0.0))

    def _new_item(self, p, e, kind, questions, project=None):
        if p["item"] in self.items:
            raise InvalidPayload(f"item {p['item']!r} already exists")
        self._user(p["author"])
        mechanism = p.get("mechanism", ORIGINAL)
        allowed = MECHANISMS if kind == PROJECT else (ORIGINAL, AUGMENTED)
        if mechanism not in allowed:
            raise InvalidPayload(f"{kind} mechanism must be one of {allowed}, got {mechanism!r}")
        descriptors = self._descriptors(p.get("descriptors"))
        self.items[p["item"]] = ItemState(
            p["item"], kind, p["author"], descriptors, mechanism, questions, project
        )

    def _on_ProjectPublished(self, p, e):
        item = p["item"]
        if p.get("mechanism", ORIGINAL) == QUADRATIC:
            specs = p.get("success_events") or []
            if not specs:
                raise InvalidPayload("a quadratic-scored project needs at least one success event")
            questions = {}
            for spec in specs:
                q = spec.get("question") if isinstance(spec, dict) else None
                if not isinstance(q, str) or not q or q in questions:
                    raise InvalidPayload(f"bad or duplicate success event {spec!r}")
                questions[q] = Channel(item, q, probabilistic=True, opened_ts=e.ts,
                                       description=str(spec.get("description", "")))
        else:
            if p.get("success_events"):
                raise InvalidPayload("success events are only scored under the quadratic mechanism")
            questions = {q: Channel(item, q, opened_ts=e.ts) for q in self.config.project_questions}
        self._new_item(p, e, PROJECT, questions)

    def _on_ReportSubmitted(self, p, e):
        project = self._item(p["project"])
        if project.kind != PROJECT:
            raise InvalidPayload(f"{p['project']!r} is not a project")
        q = self.config.report_question
        self._new_item(p, e, REPORT, {q: Channel(p["item"], q, opened_ts=e.ts)}, project=p["project"])

    def _rating_target(self, p, probabilistic: bool) -> Channel:
        self._user(p["rater"])
        item = self._item(p["item"])
        if p["rater"] == item.author:
            raise InvalidPayload(f"{p['rater']!r} cannot rate their own item")
        ch = self.channel(p["item"], p["question"])
        if ch.probabilistic != probabilistic:
            kind = "probabilistic" if ch.probabilistic else "categorical"
            raise InvalidPayload(f"{p['item']}/{p['question']} takes {kind} ratings")
        if ch.finalized:
            raise InvalidPayload(f"{p['item']}/{p['question']} is closed for rating")
        if p["rater"] in ch.active:
            raise InvalidPayload(f"{p['rater']!r} already rated {p['item']}/{p['question']}")
        return ch

    def _on_RatingSubmitted(self, p, e):
        ch = self._rating_target(p, probabilistic=False)
        labels = self.labels_for(self.items[p["item"]])
        if p["label"] not in labels:
            raise InvalidPayload(f"label {p['label']!r} not in {labels.labels}")
        ch.active[p["rater"]] = p["label"]

    def _on_ProbabilisticRatingSubmitted(self, p, e):
        ch = self._rating_target(p, probabilistic=True)
        if not 0.0 <= p["p"] <= 1.0:
            raise InvalidPayload(f"probability {p['p']} outside [0, 1]")
        ch.active[p["rater"]] = float(p["p"])

    def _on_EventResolved(self, p, e):
        ch = self.channel(p["item"], p["question"])
        if not ch.probabilistic:
            raise InvalidPayload(f"{p['item']}/{p['question']} is not a success event")
        if ch.outcome is not None:
            raise InvalidPayload(f"{p['item']}/{p['question']} is already resolved")
        if p["outcome"] not in (0, 1):
            raise InvalidPayload("outcome must be 0 or 1")
        ch.outcome = p["outcome"]
        ch.finalized = True

    def _on_QuestionReset(self, p, e):
        item = self._item(p["item"])
        if p["requester"] != item.author:
            raise UnauthorizedReset(f"only {item.author!r} may reset {p['item']!r}")
        ch = self.channel(p["item"], p["question"])
        if ch.outcome is not None:
            raise InvalidPayload(f"{p['item']}/{p['question']} is resolved and cannot be reset")
        ch.archived.extend((w, v, e.seq) for w, v in sorted(ch.active.items()))
        ch.active = {}
        ch.finalized = False
        ch.opened_ts = e.ts

    def _on_ScoringFinalized(self, p, e):
        ch = self.channel(p["item"], p["question"])
        if ch.probabilistic:
            raise InvalidPayload("success events finalize through EventResolved")
        if ch.finalized:
            raise InvalidPayload(f"{p['item']}/{p['question']} is already finalized")
        ch.finalized = True

    def _on_ReviewBidPlaced(self, p, e):
        item = self._item(p["item"])
        if item.kind != PROJECT or item.author != p["buyer"]:
            raise InvalidPayload("review bids are placed by a project's author on that project")
        self.tokens.place_review_bid(p["buyer"], p["item"], p["amount"], p["slots"], bid_id=p["bid"])

    def _on_ReviewFulfilled(self, p, e):
        bid = self.tokens._bid(p["bid"])
        report = self._item(p["report"])
        if report.kind != REPORT or report.project != bid.item:
            raise InvalidPayload(f"{p['report']!r} is not a report on {bid.item!r}")
        if report.author != p["reviewer"]:
            raise InvalidPayload(f"{p['reviewer']!r} did not write {p['report']!r}")
        if not report.finalized:
            raise InvalidPayload(f"report {p['report']!r} is not finalized")
        total = self.rating_total(report, Weights())
        self.tokens.fulfill_review(p["bid"], p["reviewer"], total, report=p["report"])

    def _on_BidCancelled(self, p, e):
        self.tokens.cancel_bid(p["bid"])

    def _on_BountyPosted(self, p, e):
        self.tokens.post_bounty(p["sponsor"], p["question"], p["amount"], bounty_id=p["bounty"])

    def _on_BountyClaimed(self, p, e):
        item = self._item(p["item"])
        if item.author != p["claimant"]:
            raise InvalidPayload(f"{p['claimant']!r} did not author {p['item']!r}")
        if not item.finalized:
            raise InvalidPayload(f"item {p['item']!r} is not finalized")
        self.tokens.claim_bounty(p["bounty"], p["claimant"], self.rating_total(item, Weights()))

    def _on_IdeaAdopted(self, p, e):
        item = self._item(p["item"])
        if item.kind != PROJECT:
            raise InvalidPayload("only projects can be adopted")
        self.tokens.adopt_idea(p["adopter"], item.author, p["item"], p["price"])

    # -- derived views -------------------------------------------------------

    def rating_total(self, item: ItemState, weights: Weights) -> float:
        """Weighted rating total over the item's finalized categorical channels."""
        total = 0.0
        for q in sorted(item.questions):
            ch = item.questions[q]
            if ch.finalized and not ch.probabilistic:
                total += item_rating_total((ch.active[w] for w in sorted(ch.active)), weights)
        return total


class EventLog:
    """Validated, append-only sequence of ledger events."""

    def __init__(self, config: LedgerConfig = LedgerConfig(), events: Iterable[ev.LedgerEvent] = ()):
        self.config = config
        self.events: list[ev.LedgerEvent] = []
        self.state = LedgerState(config)
        for event in events:
            self.append(event)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def append(self, event: ev.LedgerEvent) -> None:
        self.state.apply(event)
        self.events.append(event)

    def emit(self, kind: str, payload: dict, ts: Optional[float] = None) -> ev.LedgerEvent:
        if ts is None:
            ts = self.state.last_ts if self.state.last_ts is not None else 0.0
        event = ev.LedgerEvent(self.state.last_seq + 1, kind, payload, ts)
        self.append(event)
        return event

    def save(self, path) -> None:
        ev.dump_events(self.events, path)

    @classmethod
    def load(cls, path, config: LedgerConfig = LedgerConfig()) -> "EventLog":
        return cls(config, ev.load_events(path))


def append_event(log: EventLog, event: ev.LedgerEvent) -> EventLog:
    log.append(event)
    return log


def reset_question(log: EventLog, item: str, question: str, author: str, ts: Optional[float] = None) -> ev.LedgerEvent:
    return log.emit(ev.QUESTION_RESET, {"item": item, "question": question, "requester": author}, ts)


def due_finalizations(state: LedgerState, now: float) -> list[tuple[str, str]]:
    """Open categorical channels with enough ratings or enough elapsed days."""
    cfg = state.config
    due = []
    for item_id in sorted(state.items):
        for q, ch in sorted(state.items[item_id].questions.items()):
            if ch.finalized or ch.probabilistic:
                continue
            if len(ch.active) >= cfg.finalize_count or now - ch.opened_ts >= cfg.finalize_days:
                due.append((item_id, q))
    return due


def finalize_due(log: EventLog, now: float) -> list[ev.LedgerEvent]:
    return [
        log.emit(ev.SCORING_FINALIZED, {"item": item, "question": q}, ts=now)
        for item, q in due_finalizations(log.state, now)
    ]


def visible_ratings(state: LedgerState, item: str, question: str, viewer: str) -> dict[str, object]:
    """Ratings ``viewer`` may see: their own until the channel finalizes, then all."""
    ch = state.channel(item, question)
    if ch.finalized:
        return dict(sorted(ch.active.items()))
    return {viewer: ch.active[viewer]} if viewer in ch.active else {}


# -- replay --------------------------------------------------------------------


@dataclass(frozen=True)
class UserReputation:
    r0: float = 0.0
    rp: float = 0.0
    rr: float = 0.0
    ep: float = 0.0
    er: float = 0.0

    @property
    def total(self) -> float:
        return self.r0 + self.rp + self.rr + self.ep + self.er

    def to_dict(self) -> dict:
        return {"r0": self.r0, "rp": self.rp, "rr": self.rr, "ep": self.ep, "er": self.er, "total": self.total}


@dataclass
class ReputationState:
    users: dict[str, UserReputation]
    scores: list[AccuracyScore]
    item_totals: dict[str, float]
    balances: dict[str, tuple[int, int]]

    def to_json(self) -> str:
        obj = {
            "users": {u: r.to_dict() for u, r in sorted(self.users.items())},
            "scores": [[s.item, s.question, s.rater, s.value, s.status] for s in self.scores],
            "item_totals": dict(sorted(self.item_totals.items())),
            "balances": {u: list(b) for u, b in sorted(self.balances.items())},
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _infer_schema(items: Iterable[ItemState]) -> DescriptorSchema:
    items = list(items)
    if not items:
        return DescriptorSchema()
    n_num = len(items[0].descriptors.numeric)
    widths = [1] * len(items[0].descriptors.categorical)
    for it in items:
        for j, c in enumerate(it.descriptors.categorical):
            widths[j] = max(widths[j], c + 1)
    return DescriptorSchema(n_num, tuple(widths))


def training_set(state: LedgerState, question: str, finalized_only: bool = False) -> TrainingSet:
    """Rows (item descriptors, label) from active categorical ratings on ``question``."""
    items = [it for _, it in sorted(state.items.items()) if question in it.questions]
    schema = state.config.descriptor_schema or _infer_schema(state.items.values())
    labels = None
    rows, tags = [], []
    for it in items:
        ch = it.questions[question]
        if ch.probabilistic or (finalized_only and not ch.finalized):
            continue
        labels = labels or state.labels_for(it)
        for w in sorted(ch.active):
            rows.append((it.descriptors, ch.active[w]))
            tags.append(it.item)
    return TrainingSet.from_rows(rows, schema, labels or REPORT_LABELS, items=tags)


class _ChannelScorer:
    def __init__(self, state, params, seed, forest, mechanism):
        self.state = state
        self.params = params
        self.seed = seed
        self.forest = forest
        self.mechanism = mechanism
        ratings = []
        for item_id, it in state.items.items():
            for q, ch in it.questions.items():
                if not ch.probabilistic:
                    ratings.extend(RatingEvent(w, item_id, q, lab) for w, lab in ch.active.items())
        self.pool = RatingPool(ratings)
        self._training: dict[str, TrainingSet] = {}

    def score(self, it: ItemState, ch: Channel) -> list[AccuracyScore]:
        if ch.probabilistic:
            return self._quadratic(it, ch)
        mech = self.mechanism if self.mechanism in (ORIGINAL, AUGMENTED) else it.mechanism
        rng = keyed_rng(self.seed, it.item, ch.question)
        if mech == AUGMENTED:
            return self._augmented(it, ch, rng)
        scores = score_item_ratings(self.pool, it.item, ch.question, self.params, rng,
                                    finalized=ch.finalized, pending_without_corpus=True)
        return [scores[w] for w in sorted(scores)]

    def _q_tilde(self, it: ItemState, question: str) -> np.ndarray:
        eps = self.state.config.epsilon
        if self.forest is not None:
            return regularize(self.forest.predict_proba(it.descriptors), eps)
        if question not in self._training:
            self._training[question] = training_set(self.state, question)
        forest: Forest = train_excluding(self._training[question], self.state.config.forest, it.item)
        return regularize(forest.predict_proba(it.descriptors), eps)

    def _augmented(self, it, ch, rng) -> list[AccuracyScore]:
        labels = self.state.labels_for(it)
        status = FINAL if ch.finalized else PROVISIONAL
        alpha = self.params.alpha
        q_tilde = None
        out = []
        for w in sorted(ch.active):
            label = ch.active[w]
            peers = [ch.active[v] for v in sorted(ch.active) if v != w]
            if not peers:
                out.append(AccuracyScore(w, it.item, ch.question, 0.0, PENDING))
                continue
            if q_tilde is None:
                q_tilde = self._q_tilde(it, ch.question)
            if self.params.peer_mode == EXPECTATION:
                value = sum(augmented_score(label, p, q_tilde, labels, alpha).value for p in peers) / len(peers)
            else:
                peer = peers[int(rng.integers(len(peers)))]
                value = augmented_score(label, peer, q_tilde, labels, alpha).value
            out.append(AccuracyScore(w, it.item, ch.question, value, status))
        return out

    def _quadratic(self, it, ch) -> list[AccuracyScore]:
        out = []
        community = [ProbabilisticRating(w, it.item, p) for w, p in sorted(ch.active.items())]
        for w in sorted(ch.active):
            if ch.outcome is None:
                out.append(AccuracyScore(w, it.item, ch.question, 0.0, PENDING))
                continue
            mode = self.state.config.quadratic_benchmark
            bench = benchmark_prediction(mode if mode == CONSTANT else COMMUNITY, community, rater=w, fallback=True)
            value = quadratic_accuracy(ch.active[w], bench.p_B, ch.outcome)
            out.append(AccuracyScore(w, it.item, ch.question, value, FINAL))
        return out


def score_channels(
    state: LedgerState,
    params: ScoreParams = ScoreParams(),
    seed: int = 0,
    forest: Optional[Forest] = None,
    mechanism: Optional[str] = None,
) -> list[AccuracyScore]:
    """Current accuracy score of every active rating, ordered by (item, question, rater)."""
    scorer = _ChannelScorer(state, params, seed, forest, mechanism)
    out = []
    for item_id in sorted(state.items):
        it = state.items[item_id]
        for q in sorted(it.questions):
            out.extend(scorer.score(it, it.questions[q]))
    return out


def build_state(events: Iterable[ev.LedgerEvent], config: LedgerConfig = LedgerConfig()) -> LedgerState:
    state = LedgerState(config)
    for event in events:
        state.apply(event)
    return state


def replay(
    log,
    weights: Weights = Weights(),
    params: ScoreParams = ScoreParams(),
    seed: int = 0,
    config: Optional[LedgerConfig] = None,
    forest: Optional[Forest] = None,
    mechanism: Optional[str] = None,
) -> ReputationState:
    """Recompute every user's reputation from scratch."""
    if config is None:
        config = log.config if isinstance(log, EventLog) else LedgerConfig()
    state = build_state(log.events if isinstance(log, EventLog) else log, config)
    scores = score_channels(state, params, seed, forest, mechanism)

    raw_ep = dict.fromkeys(state.users, 0.0)
    raw_er = dict.fromkeys(state.users, 0.0)
    for s in scores:
        if s.status == PENDING:
            continue
        target = raw_ep if state.items[s.item].kind == PROJECT else raw_er
        target[s.rater] += s.value

    rp = dict.fromkeys(state.users, 0.0)
    rr = dict.fromkeys(state.users, 0.0)
    totals = {}
    for item_id in sorted(state.items):
        it = state.items[item_id]
        if not any(ch.finalized and not ch.probabilistic for ch in it.questions.values()):
            continue
        totals[item_id] = state.rating_total(it, weights)
        if it.kind == PROJECT:
            rp[it.author] += weights.project_scale * totals[item_id]
        else:
            rr[it.author] += totals[item_id]

    users = {
        u: UserReputation(
            r0=state.users[u],
            rp=rp[u],
            rr=rr[u],
            ep=weights.beta_p * raw_ep[u],
            er=weights.beta_r * raw_er[u],
        )
        for u in sorted(state.users)
    }
    balances = {u: (a.available, a.escrowed) for u, a in state.tokens.accounts.items()}
    logger.debug("replayed %d users, %d scores", len(users), len(scores))
    return ReputationState(users, scores, totals, balances)
