"""Ledger event records and their newline-delimited JSON file format.

A log file starts with a header line::

    {"format":"peertruth-ledger","version":1}

followed by one event per line::

    {"kind":"RatingSubmitted","payload":{...},"seq":7,"ts":3.5}

``seq`` starts at 1 and increases by exactly one per event; ``ts`` is the
event time in days. Keys are written sorted with no whitespace so the same
events always serialise to the same bytes. Payload fields per kind are
listed in ``PAYLOAD_FIELDS`` (a trailing ``?`` marks an optional field).
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import InvalidPayload, LogFormatError

LEDGER_FORMAT = "peertruth-ledger"
LEDGER_VERSION = 1

USER_JOINED = "UserJoined"
PROJECT_PUBLISHED = "ProjectPublished"
REPORT_SUBMITTED = "ReportSubmitted"
RATING_SUBMITTED = "RatingSubmitted"
PROBABILISTIC_RATING_SUBMITTED = "ProbabilisticRatingSubmitted"
EVENT_RESOLVED = "EventResolved"
QUESTION_RESET = "QuestionReset"
SCORING_FINALIZED = "ScoringFinalized"
REVIEW_BID_PLACED = "ReviewBidPlaced"
REVIEW_FULFILLED = "ReviewFulfilled"
BID_CANCELLED = "BidCancelled"
BOUNTY_POSTED = "BountyPosted"
BOUNTY_CLAIMED = "BountyClaimed"
IDEA_ADOPTED = "IdeaAdopted"

PAYLOAD_FIELDS: dict[str, dict[str, str]] = {
    USER_JOINED: {"user": "str", "r0": "num?"},
    PROJECT_PUBLISHED: {
        "item": "str", "author": "str", "mechanism": "str?",
        "descriptors": "dict?", "success_events": "list?",
    },
    REPORT_SUBMITTED: {
        "item": "str", "author": "str", "project": "str",
        "mechanism": "str?", "descriptors": "dict?",
    },
    RATING_SUBMITTED: {"rater": "str", "item": "str", "question": "str", "label": "str"},
    PROBABILISTIC_RATING_SUBMITTED: {"rater": "str", "item": "str", "question": "str", "p": "num"},
    EVENT_RESOLVED: {"item": "str", "question": "str", "outcome": "int"},
    QUESTION_RESET: {"item": "str", "question": "str", "requester": "str"},
    SCORING_FINALIZED: {"item": "str", "question": "str"},
    REVIEW_BID_PLACED: {"bid": "str", "buyer": "str", "item": "str", "amount": "int", "slots": "int"},
    REVIEW_FULFILLED: {"bid": "str", "reviewer": "str", "report": "str"},
    BID_CANCELLED: {"bid": "str"},
    BOUNTY_POSTED: {"bounty": "str", "sponsor": "str", "question": "str", "amount": "int"},
    BOUNTY_CLAIMED: {"bounty": "str", "claimant": "str", "item": "str"},
    IDEA_ADOPTED: {"adopter": "str", "item": "str", "price": "int"},
}
KINDS = tuple(PAYLOAD_FIELDS)


def _type_ok(value: Any, kind: str) -> bool:
    if kind == "str":
        return isinstance(value, str) and value != ""
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "num":
        return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    if kind == "dict":
        return isinstance(value, dict)
    if kind == "list":
        return isinstance(value, list)
    raise AssertionError(kind)


@dataclass(frozen=True)
class LedgerEvent:
    seq: int
    kind: str
    payload: dict = field(default_factory=dict)
    ts: float = 0.0

    def validate(self) -> None:
        if self.kind not in PAYLOAD_FIELDS:
            raise InvalidPayload(f"unknown event kind {self.kind!r}")
        if not _type_ok(self.ts, "num"):
            raise InvalidPayload(f"timestamp must be a finite number, got {self.ts!r}")
        spec = PAYLOAD_FIELDS[self.kind]
        for name, kind in spec.items():
            optional = kind.endswith("?")
            kind = kind.rstrip("?")
            if name not in self.payload:
                if optional:
                    continue
                raise InvalidPayload(f"{self.kind} payload is missing {name!r}")
            if not _type_ok(self.payload[name], kind):
                raise InvalidPayload(f"{self.kind}.{name} must be {kind}, got {self.payload[name]!r}")
        extra = set(self.payload) - set(spec)
        if extra:
            raise InvalidPayload(f"{self.kind} payload has unexpected fields {sorted(extra)}")

    def to_dict(self) -> dict:
        return {"seq": self.seq, "kind": self.kind, "ts": self.ts, "payload": self.payload}

    def to_line(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, obj: dict) -> "LedgerEvent":
        return cls(seq=obj["seq"], kind=obj["kind"], payload=obj.get("payload", {}), ts=obj.get("ts", 0.0))


def header_line() -> str:
    return json.dumps({"format": LEDGER_FORMAT, "version": LEDGER_VERSION}, sort_keys=True, separators=(",", ":"))


def dump_events(events: Iterable[LedgerEvent], path) -> None:
    lines = [header_line()] + [e.to_line() for e in events]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_lines(lines: Iterable[str]) -> list[LedgerEvent]:
    """Parse log lines; the header is optional and blank lines are skipped."""
    return [event for _, event in parse_numbered(lines)]


def parse_numbered(lines: Iterable[str]) -> list[tuple[int, LedgerEvent]]:
    """Like ``parse_lines`` but keeps each event's 1-based line number."""
    events = []
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise LogFormatError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(obj, dict):
            raise LogFormatError("expected a JSON object", lineno)
        if "format" in obj:
            if obj.get("format") != LEDGER_FORMAT or obj.get("version") != LEDGER_VERSION:
                raise LogFormatError(f"unsupported header {obj!r}", lineno)
            if events:
                raise LogFormatError("header must be the first record", lineno)
            continue
        seq = obj.get("seq")
        if not _type_ok(seq, "int") or not isinstance(obj.get("kind"), str):
            raise LogFormatError("event needs integer 'seq' and string 'kind'", lineno, seq if _type_ok(seq, "int") else None)
        if not isinstance(obj.get("payload", {}), dict):
            raise LogFormatError("payload must be an object", lineno, seq)
        event = LedgerEvent.from_dict(obj)
        try:
            event.validate()
        except InvalidPayload as exc:
            raise LogFormatError(str(exc), lineno, seq) from None
        events.append((lineno, event))
    return events


def load_events(path) -> list[LedgerEvent]:
    return parse_lines(Path(path).read_text(encoding="utf-8").splitlines())
