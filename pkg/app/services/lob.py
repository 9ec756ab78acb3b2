"""
Reduced-form limit order book: best bid, best ask and the typed, marked
events that move them.

Aggressive events shift one side of the book by J ticks, so every event moves
the mid by +/- J * tick / 2 and the mid-price stays a closed-form function of
the event log. Non-aggressive market orders leave prices untouched.
"""

import math
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Iterable, Optional

import numpy as np

from app.exceptions import ContractViolationError, DegenerateSupportError
from app.schemas import MarkParams
from app.services.hawkes import EventSource

MID_IDENTITY_TOL = 1e-9


class EventType(IntEnum):
    """The eight modelled event types; the value is the Hawkes dimension."""

    MARKET_BUY_AGG = 0
    MARKET_SELL_AGG = 1
    LIMIT_BUY_AGG = 2
    LIMIT_SELL_AGG = 3
    CANCEL_BUY_AGG = 4
    CANCEL_SELL_AGG = 5
    MARKET_BUY = 6
    MARKET_SELL = 7

    @property
    def label(self) -> str:
        return _LABELS[self]

    @property
    def is_aggressive(self) -> bool:
        return self not in NEUTRAL

    @property
    def direction(self) -> int:
        """+1 if the event raises the mid, -1 if it lowers it, 0 otherwise."""
        if self in INCREASING:
            return 1
        if self in DECREASING:
            return -1
        return 0


_LABELS = {
    EventType.MARKET_BUY_AGG: "M_b^a",
    EventType.MARKET_SELL_AGG: "M_s^a",
    EventType.LIMIT_BUY_AGG: "L_b^a",
    EventType.LIMIT_SELL_AGG: "L_s^a",
    EventType.CANCEL_BUY_AGG: "C_b^a",
    EventType.CANCEL_SELL_AGG: "C_s^a",
    EventType.MARKET_BUY: "M_b^n",
    EventType.MARKET_SELL: "M_s^n",
}

INCREASING = frozenset({EventType.MARKET_BUY_AGG, EventType.LIMIT_BUY_AGG, EventType.CANCEL_SELL_AGG})
DECREASING = frozenset({EventType.MARKET_SELL_AGG, EventType.LIMIT_SELL_AGG, EventType.CANCEL_BUY_AGG})
NEUTRAL = frozenset({EventType.MARKET_BUY, EventType.MARKET_SELL})


def quantize_ticks(x):
    """Round half away from zero; the single tick-rounding rule of the package."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class MarkedEvent:
    """An event with its jump mark.

    Aggressive events whose truncated jump support was empty are kept with
    jump=None: they excite the Hawkes process but leave the book unchanged.
    """

    etype: EventType
    time: float
    jump: Optional[float] = None
    source: EventSource = EventSource.MARKET

    def __post_init__(self):
        if not self.etype.is_aggressive and self.jump is not None:
            raise ValueError(f"{self.etype.label} carries no jump")
        if self.jump is not None and not self.jump > 0:
            raise ValueError(f"jump must be > 0, got {self.jump}")

    @property
    def signed_jump(self) -> float:
        return 0.0 if self.jump is None else self.etype.direction * self.jump


@dataclass(frozen=True)
class BookTop:
    bid: float
    ask: float
    tick: float

    def __post_init__(self):
        if not self.ask > self.bid:
            raise ContractViolationError(f"crossed or locked book: bid={self.bid} ask={self.ask}")

    @classmethod
    def centered(cls, mid: float, spread_ticks: float, tick: float) -> "BookTop":
        half = spread_ticks * tick / 2.0
        return cls(bid=mid - half, ask=mid + half, tick=tick)

    @property
    def mid(self) -> float:
        return (self.bid + self.ask) / 2.0

    @property
    def spread_ticks(self) -> float:
        return (self.ask - self.bid) / self.tick


def sample_jump(
    rng: np.random.Generator,
    marks: MarkParams,
    upper_bound: Optional[float] = None,
    round_jumps: bool = False,
) -> float:
    """Inverse-CDF draw of a shifted exponential jump, optionally truncated to (loc, upper_bound).

    Exactly one uniform is consumed per call, even when the support turns out
    empty, so the caller's RNG stream does not depend on the book state.
    With round_jumps the draw is ceiled to whole ticks and truncated one tick
    lower, so the result is an integer in [1, upper_bound - 1].
    """
    u = rng.random()
    bound = upper_bound
    if round_jumps and bound is not None:
        bound = math.floor(bound + 1e-9) - 1
    if bound is not None and bound <= marks.loc:
        raise DegenerateSupportError(f"empty jump support ({marks.loc}, {bound})")
    if bound is None:
        jump = marks.loc - marks.scale * math.log1p(-u)
    else:
        mass = -math.expm1(-(bound - marks.loc) / marks.scale)
        jump = marks.loc - marks.scale * math.log1p(-u * mass)
    return float(math.ceil(jump)) if round_jumps else jump


def apply_event(book: BookTop, ev: MarkedEvent) -> BookTop:
    """Book after one event; neutral and demoted events return the book unchanged."""
    if ev.jump is None:
        return book
    move = ev.jump * book.tick
    etype = ev.etype
    if etype in (EventType.LIMIT_BUY_AGG, EventType.LIMIT_SELL_AGG) and ev.jump >= book.spread_ticks:
        raise ContractViolationError(
            f"{etype.label} jump {ev.jump} >= spread {book.spread_ticks} ticks"
        )
    if etype is EventType.MARKET_BUY_AGG:
        return replace(book, ask=book.ask + move)
    if etype is EventType.MARKET_SELL_AGG:
        return replace(book, bid=book.bid - move)
    if etype is EventType.LIMIT_BUY_AGG:
        return replace(book, bid=book.bid + move)
    if etype is EventType.LIMIT_SELL_AGG:
        return replace(book, ask=book.ask - move)
    if etype is EventType.CANCEL_BUY_AGG:
        return replace(book, bid=book.bid - move)
    return replace(book, ask=book.ask + move)


def mid_from_log(book0: BookTop, event_log: Iterable[MarkedEvent]) -> float:
    """Closed-form mid: P_0 + (sum of increasing jumps - sum of decreasing jumps) * tick / 2."""
    net = math.fsum(ev.signed_jump for ev in event_log)
    return book0.mid + net * book0.tick / 2.0


def mid_price_identity_check(
    event_log: Iterable[MarkedEvent], book0: BookTop, book_t: BookTop
) -> bool:
    return abs(book_t.mid - mid_from_log(book0, event_log)) <= MID_IDENTITY_TOL
