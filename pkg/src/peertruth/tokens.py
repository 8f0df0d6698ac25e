"""Token accounts for the review and ideas markets.

Tokens are integers. New tokens only appear when a user joins; every other
operation moves tokens between accounts or between an account's available
and escrowed balances, so total supply always equals ``t0 * joins``.

Accuracy rewards are settled against a treasury account: negative scores
pay into it (never below a zero balance) and positive scores draw from it,
pro rata when it cannot cover every claim.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Optional

from .errors import (
    BelowThreshold,
    BidExhausted,
    BountyClosed,
    DuplicateAccount,
    InsufficientBalance,
    InvalidPayload,
    SelfDealing,
)

TREASURY = "__treasury__"

OPEN = "open"
EXHAUSTED = "exhausted"
CANCELLED = "cancelled"
CLAIMED = "claimed"


@dataclass
class Account:
    user: str
    available: int = 0
    escrowed: int = 0


@dataclass
class ReviewBid:
    bid_id: str
    item: str
    buyer: str
    amount: int
    remaining_slots: int
    status: str = OPEN
    paid_reports: list[str] = field(default_factory=list)

    @property
    def escrow(self) -> int:
        return self.amount * self.remaining_slots if self.status == OPEN else 0


@dataclass
class Bounty:
    bounty_id: str
    question: str
    sponsor: str
    amount: int
    status: str = OPEN
    claimant: Optional[str] = None


@dataclass(frozen=True)
class TokenConfig:
    t0: int = 100
    satisfactory_threshold: float = 0.0
    claim_threshold: float = 0.0

    def __post_init__(self) -> None:
        _check_amount(self.t0, "t0", allow_zero=True)


def _check_amount(value, what: str, allow_zero: bool = False) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidPayload(f"{what} must be an integer token amount, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        raise InvalidPayload(f"{what} must be {'non-negative' if allow_zero else 'positive'}, got {value}")
    return value


class TokenLedger:
    def __init__(self, config: TokenConfig = TokenConfig()):
        self.config = config
        self.accounts: dict[str, Account] = {}
        self.bids: dict[str, ReviewBid] = {}
        self.bounties: dict[str, Bounty] = {}
        self.adoptions: list[tuple[str, str, str, int]] = []
        self.joins = 0

    # -- helpers -----------------------------------------------------------

    def _account(self, user: str) -> Account:
        try:
            return self.accounts[user]
        except KeyError:
            raise InvalidPayload(f"user {user!r} has no token account") from None

    def balance(self, user: str) -> tuple[int, int]:
        acct = self._account(user)
        return acct.available, acct.escrowed

    @property
    def supply(self) -> int:
        return sum(a.available + a.escrowed for a in self.accounts.values())

    def check_invariants(self) -> None:
        for acct in self.accounts.values():
            assert acct.available >= 0 and acct.escrowed >= 0, acct
        assert self.supply == self.config.t0 * self.joins
        open_escrow = sum(b.escrow for b in self.bids.values())
        open_escrow += sum(b.amount for b in self.bounties.values() if b.status == OPEN)
        assert open_escrow == sum(a.escrowed for a in self.accounts.values())

    # -- operations --------------------------------------------------------

    def mint_on_join(self, user: str) -> Account:
        if user == TREASURY:
            raise InvalidPayload(f"{TREASURY!r} is reserved")
        if user in self.accounts:
            raise DuplicateAccount(f"user {user!r} already has an account")
        acct = Account(user, available=self.config.t0)
        self.accounts[user] = acct
        self.joins += 1
        return acct

    def place_review_bid(self, buyer: str, item: str, amount: int, slots: int, bid_id: Optional[str] = None) -> ReviewBid:
        _check_amount(amount, "amount")
        _check_amount(slots, "slots")
        bid_id = bid_id or f"bid-{len(self.bids) + 1}"
        if bid_id in self.bids:
            raise InvalidPayload(f"bid {bid_id!r} already exists")
        acct = self._account(buyer)
        total = amount * slots
        if acct.available < total:
            raise InsufficientBalance(f"{buyer!r} has {acct.available}, bid needs {total}")
        acct.available -= total
        acct.escrowed += total
        bid = ReviewBid(bid_id, item, buyer, amount, slots)
        self.bids[bid_id] = bid
        return bid

    def _bid(self, bid_id: str) -> ReviewBid:
        try:
            return self.bids[bid_id]
        except KeyError:
            raise InvalidPayload(f"unknown bid {bid_id!r}") from None

    def fulfill_review(self, bid_id: str, reviewer: str, report_rating_total: float, report: Optional[str] = None) -> bool:
        """Pay one slot of the bid if the report is satisfactory; returns whether it paid."""
        bid = self._bid(bid_id)
        if bid.status != OPEN:
            raise BidExhausted(f"bid {bid_id!r} is {bid.status}")
        if reviewer == bid.buyer:
            raise SelfDealing(f"{reviewer!r} cannot be paid for reviewing their own item")
        if report is not None and report in bid.paid_reports:
            raise InvalidPayload(f"report {report!r} was already paid under {bid_id!r}")
        dest = self._account(reviewer)
        if report_rating_total < self.config.satisfactory_threshold:
            return False
        buyer = self._account(bid.buyer)
        buyer.escrowed -= bid.amount
        dest.available += bid.amount
        bid.remaining_slots -= 1
        if report is not None:
            bid.paid_reports.append(report)
        if bid.remaining_slots == 0:
            bid.status = EXHAUSTED
        return True

    def cancel_bid(self, bid_id: str) -> int:
        bid = self._bid(bid_id)
        if bid.status != OPEN:
            raise BidExhausted(f"bid {bid_id!r} is {bid.status}")
        refund = bid.escrow
        buyer = self._account(bid.buyer)
        buyer.escrowed -= refund
        buyer.available += refund
        bid.status = CANCELLED
        return refund

    def post_bounty(self, sponsor: str, question: str, amount: int, bounty_id: Optional[str] = None) -> Bounty:
        _check_amount(amount, "amount")
        bounty_id = bounty_id or f"bounty-{len(self.bounties) + 1}"
        if bounty_id in self.bounties:
            raise InvalidPayload(f"bounty {bounty_id!r} already exists")
        acct = self._account(sponsor)
        if acct.available < amount:
            raise InsufficientBalance(f"{sponsor!r} has {acct.available}, bounty needs {amount}")
        acct.available -= amount
        acct.escrowed += amount
        bounty = Bounty(bounty_id, question, sponsor, amount)
        self.bounties[bounty_id] = bounty
        return bounty

    def claim_bounty(self, bounty_id: str, claimant: str, item_rating_total: float) -> None:
        try:
            bounty = self.bounties[bounty_id]
        except KeyError:
            raise InvalidPayload(f"unknown bounty {bounty_id!r}") from None
        if bounty.status != OPEN:
            raise BountyClosed(f"bounty {bounty_id!r} was already claimed")
        if claimant == bounty.sponsor:
            raise SelfDealing(f"{claimant!r} cannot claim their own bounty")
        dest = self._account(claimant)
        if item_rating_total < self.config.claim_threshold:
            raise BelowThreshold(f"rating total {item_rating_total} below {self.config.claim_threshold}")
        sponsor = self._account(bounty.sponsor)
        sponsor.escrowed -= bounty.amount
        dest.available += bounty.amount
        bounty.status = CLAIMED
        bounty.claimant = claimant

    def adopt_idea(self, adopter: str, author: str, idea_item: str, price: int) -> None:
        _check_amount(price, "price", allow_zero=True)
        if adopter == author:
            raise SelfDealing(f"{adopter!r} cannot adopt their own idea")
        src = self._account(adopter)
        dest = self._account(author)
        if src.available < price:
            raise InsufficientBalance(f"{adopter!r} has {src.available}, price is {price}")
        src.available -= price
        dest.available += price
        self.adoptions.append((adopter, author, idea_item, price))

    def settle_accuracy(self, scores: Mapping[str, float], rate: float) -> dict[str, int]:
        """Move ``floor(rate * |score|)`` tokens per user through the treasury."""
        if not rate > 0:
            raise InvalidPayload("rate must be positive")
        treasury = self.accounts.setdefault(TREASURY, Account(TREASURY))
        deltas: dict[str, int] = {}
        claims: dict[str, int] = {}
        for user in sorted(scores):
            units = math.floor(rate * abs(scores[user]))
            if units == 0:
                continue
            acct = self._account(user)
            if scores[user] < 0:
                paid = min(units, acct.available)
                acct.available -= paid
                treasury.available += paid
                deltas[user] = -paid
            else:
                claims[user] = units
        wanted = sum(claims.values())
        pot = treasury.available
        for user, units in claims.items():
            paid = units if wanted <= pot else units * pot // wanted
            self.accounts[user].available += paid
            treasury.available -= paid
            deltas[user] = paid
        return deltas
