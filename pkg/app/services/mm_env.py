"""
Market-making environment on top of the Hawkes-driven order book.

One step of length dt runs, in order:
  1. cancel the agent's outstanding quotes (aggressive with prob. z2 when at the best)
  2. quantize and filter the requested offsets (quoted spread, inventory limit)
  3. crossing quotes become market orders (aggressive with prob. z1)
  4. quotes inside the spread improve the best price
  5. market events on [t, t + dt) are applied one by one and tested for fills
  6. reward = change in marked-to-mid wealth - phi * integral of |I| dt

Each episode seed is split into a market stream (event times, types, marks)
and an agent stream (all draws conditioned on the agent's orders), so with
agent_feedback off every controller sees the same market on the same seed.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from app.exceptions import (
    CalibrationError,
    ConfigurationError,
    DegenerateSupportError,
    EpisodeFinishedError,
)
from app.schemas import EnvConfig, HawkesParams, NormStats
from app.services.hawkes import EventSource, HawkesSimulator, branching_spectral_radius
from app.services.lob import (
    BookTop,
    EventType,
    MarkedEvent,
    apply_event,
    quantize_ticks,
    sample_jump,
)

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["t", "I", "X", "bid", "ask", "off_a", "off_b", "fills", "reward"]
EVENT_COLUMNS = ["time", "etype", "jump_ticks", "source", "bid", "ask"]


class Side(str, Enum):
    BID = "bid"
    ASK = "ask"


@dataclass
class Quote:
    side: Side
    price: float
    active: bool = True
    # the quote alone makes the best price (it improved the book)
    sole: bool = False


@dataclass(frozen=True)
class Fill:
    """One agent execution. quantity is +1 for a buy, -1 for a sell."""

    time: float
    side: Side
    kind: str
    price: float
    quantity: int
    cash_flow: float
    mid: float

    @property
    def edge(self) -> float:
        """Wealth change at the moment of the fill, marking the unit at mid."""
        return self.cash_flow + self.quantity * self.mid


class RunningMoments:
    """Welford one-pass mean / variance."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self._m2 = 0.0

    def update(self, x: float) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self._m2 += delta * (x - self.mean)

    @property
    def variance(self) -> float:
        return self._m2 / self.n if self.n else 0.0

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


def trend_alpha(intensity: np.ndarray) -> float:
    """Buy-side minus sell-side market order intensity."""
    return float(
        intensity[EventType.MARKET_BUY_AGG]
        + intensity[EventType.MARKET_BUY]
        - intensity[EventType.MARKET_SELL_AGG]
        - intensity[EventType.MARKET_SELL]
    )


def normalize(raw: Tuple[float, float, float], inventory_limit: int, norm: NormStats) -> np.ndarray:
    """Map raw (inventory, spread ticks, trend) to the policy input."""
    inventory, spread, trend = raw
    if not (norm.std_spread > 0 and norm.std_trend > 0):
        raise CalibrationError("normalization std must be > 0")
    return np.array(
        [
            inventory / inventory_limit,
            (spread - norm.mean_spread) / norm.std_spread,
            (trend - norm.mean_trend) / norm.std_trend,
        ]
    )


class MarketMakingEnv(gym.Env):
    """Gymnasium environment; actions are (ask offset, bid offset) in ticks."""

    metadata = {"render_modes": []}

    def __init__(
        self,
        config: EnvConfig,
        hawkes: HawkesParams,
        norm: Optional[NormStats] = None,
        record_trace: bool = False,
    ):
        super().__init__()
        radius = branching_spectral_radius(hawkes)
        if radius >= 1.0:
            raise ConfigurationError(f"spectral radius {radius:.6g} >= 1", key_path="hawkes.alpha")
        if hawkes.dim != len(EventType):
            raise ConfigurationError(f"need {len(EventType)} dimensions, got {hawkes.dim}", "hawkes.mu")
        self.config = config
        self.hawkes_params = hawkes
        self.norm = norm or NormStats.identity()
        self.record_trace = record_trace
        self._tol = 1e-6 * config.tick_size

        limit = float(config.max_offset_ticks)
        self.action_space = spaces.Box(low=-limit, high=limit, shape=(2,), dtype=np.float64)
        self.observation_space = spaces.Box(low=-np.inf, high=np.inf, shape=(3,), dtype=np.float64)
        self.done = True

    # ------------------------------------------------------------------ state

    @property
    def mid(self) -> float:
        return self.book.mid

    @property
    def wealth(self) -> float:
        return self.inventory * self.book.mid + self.cash

    @property
    def trend(self) -> float:
        return trend_alpha(self.hawkes.intensity())

    def raw_observation(self) -> Tuple[float, float, float]:
        return float(self.inventory), self.book.spread_ticks, self.trend

    def observation(self) -> np.ndarray:
        return normalize(self.raw_observation(), self.config.inventory_limit, self.norm)

    def _info(self) -> Dict:
        inventory, spread, trend = self.raw_observation()
        return {
            "t": self.t,
            "inventory": self.inventory,
            "cash": self.cash,
            "wealth": self.wealth,
            "bid": self.book.bid,
            "ask": self.book.ask,
            "mid": self.book.mid,
            "spread_ticks": spread,
            "trend": trend,
            "n_trades": len(self.fills),
        }

    # ---------------------------------------------------------------- episode

    def reset(self, *, seed: Optional[int] = None, options: Optional[dict] = None):
        super().reset(seed=seed)
        market_seq, agent_seq = np.random.SeedSequence(seed).spawn(2)
        self.market_rng = np.random.default_rng(market_seq)
        self.agent_rng = np.random.default_rng(agent_seq)

        cfg = self.config
        self.hawkes = HawkesSimulator(self.hawkes_params)
        self.book0 = BookTop.centered(cfg.initial_price, cfg.initial_spread_ticks, cfg.tick_size)
        self.book = self.book0
        self.t = 0.0
        self.step_index = 0
        self.inventory = 0
        self.cash = 0.0
        self.quotes: Dict[Side, Optional[Quote]] = {Side.BID: None, Side.ASK: None}
        self.counts = {"bid": 0, "ask": 0, "market_buy": 0, "market_sell": 0}
        self.event_log: List[MarkedEvent] = []
        self.fills: List[Fill] = []
        self.penalty_total = 0.0
        self.abs_inventory_sum = 0.0
        self.wealth_path: List[float] = []
        self.trace: List[Dict] = []
        self._last_wealth = self.wealth
        self._area = 0.0
        self._area_clock = 0.0
        self.done = False
        return self.observation(), self._info()

    def step(self, action):
        if self.done:
            raise EpisodeFinishedError("episode is done; call reset()")
        offsets = np.asarray(action, dtype=float).reshape(2)
        if not np.all(np.isfinite(offsets)):
            raise ValueError(f"offsets must be finite, got {offsets}")
        cfg = self.config
        limit = cfg.max_offset_ticks
        off_a, off_b = (int(x) for x in np.clip(quantize_ticks(offsets), -limit, limit))

        t_start = self.step_index * cfg.dt
        t_end = (self.step_index + 1) * cfg.dt
        n_fills = len(self.fills)
        self._area = 0.0
        self._area_clock = t_start

        self._cancel_quotes(t_start)
        self._post_quotes(off_a, off_b, t_start)
        self._run_market(t_end)
        self._accrue(t_end)

        self.t = t_end
        self.step_index += 1
        penalty = cfg.inventory_penalty * self._area
        wealth = self.wealth
        reward = wealth - self._last_wealth - penalty
        self._last_wealth = wealth
        self.penalty_total += penalty
        self.abs_inventory_sum += abs(self.inventory)
        self.wealth_path.append(wealth)
        self.done = self.step_index >= cfg.n_steps

        info = self._info()
        info["fills"] = len(self.fills) - n_fills
        info["penalty"] = penalty
        if self.record_trace:
            self.trace.append(
                {
                    "t": self.t,
                    "I": self.inventory,
                    "X": self.cash,
                    "bid": self.book.bid,
                    "ask": self.book.ask,
                    "off_a": off_a,
                    "off_b": off_b,
                    "fills": info["fills"],
                    "reward": reward,
                }
            )
        return self.observation(), reward, self.done, False, info

    # ------------------------------------------------------------- mechanics

    def _accrue(self, time: float) -> None:
        self._area += abs(self.inventory) * (time - self._area_clock)
        self._area_clock = time

    def _at_best(self, price: float, side: Side) -> bool:
        best = self.book.bid if side is Side.BID else self.book.ask
        return abs(price - best) <= self._tol

    def _record(self, ev: MarkedEvent) -> None:
        self.book = apply_event(self.book, ev)
        self.event_log.append(ev)
        if ev.source is EventSource.AGENT and self.config.agent_feedback:
            self.hawkes.inject_event(int(ev.etype), ev.time)

    def _agent_event(self, etype: EventType, time: float, upper_bound: Optional[float]) -> None:
        self._record(MarkedEvent(etype, time, self._draw_jump(self.agent_rng, upper_bound), EventSource.AGENT))

    def _draw_jump(self, rng: np.random.Generator, upper_bound: Optional[float]) -> Optional[float]:
        try:
            return sample_jump(rng, self.config.marks, upper_bound, self.config.round_jumps)
        except DegenerateSupportError:
            return None

    def _cancel_bound(self) -> Optional[float]:
        return self.book.spread_ticks if self.config.cancel_truncation == "spread" else None

    def _cancel_quotes(self, time: float) -> None:
        for side in (Side.BID, Side.ASK):
            quote = self.quotes[side]
            self.quotes[side] = None
            if quote is None or not quote.active:
                continue
            if self._at_best(quote.price, side) and self.agent_rng.random() < self.config.z2:
                etype = EventType.CANCEL_BUY_AGG if side is Side.BID else EventType.CANCEL_SELL_AGG
                self._agent_event(etype, time, self._cancel_bound())

    def _post_quotes(self, off_a: int, off_b: int, time: float) -> None:
        cfg = self.config
        ask_price = self.book.ask + off_a * cfg.tick_size
        bid_price = self.book.bid - off_b * cfg.tick_size
        if ask_price - bid_price <= self._tol:
            return
        post_bid = self.inventory < cfg.inventory_limit
        post_ask = self.inventory > -cfg.inventory_limit

        if post_bid and bid_price >= self.book.ask - self._tol:
            self._market_order(Side.BID, time)
            post_bid = False
        if post_ask and ask_price <= self.book.bid + self._tol:
            self._market_order(Side.ASK, time)
            post_ask = False

        if post_bid:
            improves = bid_price > self.book.bid + self._tol
            if improves:
                jump = (bid_price - self.book.bid) / cfg.tick_size
                self._record(MarkedEvent(EventType.LIMIT_BUY_AGG, time, jump, EventSource.AGENT))
                bid_price = self.book.bid
            self.quotes[Side.BID] = Quote(Side.BID, bid_price, sole=improves)
        if post_ask:
            improves = ask_price < self.book.ask - self._tol
            if improves:
                jump = (self.book.ask - ask_price) / cfg.tick_size
                self._record(MarkedEvent(EventType.LIMIT_SELL_AGG, time, jump, EventSource.AGENT))
                ask_price = self.book.ask
            self.quotes[Side.ASK] = Quote(Side.ASK, ask_price, sole=improves)

    def _market_order(self, side: Side, time: float) -> None:
        cfg = self.config
        if side is Side.BID:
            price = self.book.ask
            cash_flow = -(price + cfg.taker_fee * price)
            quantity = 1
            self.counts["market_buy"] += 1
            aggressive, neutral = EventType.MARKET_BUY_AGG, EventType.MARKET_BUY
        else:
            price = self.book.bid
            cash_flow = price - cfg.taker_fee * price
            quantity = -1
            self.counts["market_sell"] += 1
            aggressive, neutral = EventType.MARKET_SELL_AGG, EventType.MARKET_SELL
        self._execute(Fill(time, side, "market", price, quantity, cash_flow, self.book.mid))
        if self.agent_rng.random() < cfg.z1:
            self._agent_event(aggressive, time, None)
        else:
            self._record(MarkedEvent(neutral, time, None, EventSource.AGENT))

    def _execute(self, fill: Fill) -> None:
        self._accrue(fill.time)
        self.cash += fill.cash_flow
        self.inventory += fill.quantity
        self.fills.append(fill)

    def _fill_quote(self, side: Side, time: float) -> None:
        quote = self.quotes[side]
        fee = self.config.maker_fee
        if side is Side.BID:
            fill = Fill(time, side, "limit", quote.price, 1, -quote.price * (1 + fee), self.book.mid)
            self.counts["bid"] += 1
        else:
            fill = Fill(time, side, "limit", quote.price, -1, quote.price * (1 - fee), self.book.mid)
            self.counts["ask"] += 1
        self._execute(fill)
        quote.active = False

    def _active(self, side: Side) -> Optional[Quote]:
        quote = self.quotes[side]
        return quote if quote is not None and quote.active else None

    def _settle_quotes(self) -> None:
        """A market cancel that empties a shared best level takes the agent's quote with it."""
        for side in (Side.BID, Side.ASK):
            quote = self._active(side)
            if quote is None:
                continue
            if not self._at_best(quote.price, side):
                quote.sole = False
            if side is Side.BID:
                ahead = quote.price > self.book.bid + self._tol
            else:
                ahead = quote.price < self.book.ask - self._tol
            if ahead:
                quote.active = False

    def _sole_at_best(self, side: Side) -> bool:
        """Market cancels cannot remove a level held only by the agent."""
        quote = self._active(side)
        return quote is not None and quote.sole and self._at_best(quote.price, side)

    def _run_market(self, t_end: float) -> None:
        tick = self.config.tick_size
        while True:
            raw = self.hawkes.next_event(self.market_rng, t_end)
            if raw is None:
                return
            etype = EventType(raw.dim_index)
            jump = None
            if etype.is_aggressive:
                if etype in (EventType.LIMIT_BUY_AGG, EventType.LIMIT_SELL_AGG):
                    bound = self.book.spread_ticks
                elif etype in (EventType.CANCEL_BUY_AGG, EventType.CANCEL_SELL_AGG):
                    bound = self._cancel_bound()
                else:
                    bound = None
                jump = self._draw_jump(self.market_rng, bound)
            if etype is EventType.CANCEL_BUY_AGG and self._sole_at_best(Side.BID):
                jump = None
            elif etype is EventType.CANCEL_SELL_AGG and self._sole_at_best(Side.ASK):
                jump = None

            if etype is EventType.MARKET_SELL_AGG and (quote := self._active(Side.BID)):
                if self.book.bid - jump * tick < quote.price <= self.book.bid + self._tol:
                    self._fill_quote(Side.BID, raw.time)
            elif etype is EventType.MARKET_BUY_AGG and (quote := self._active(Side.ASK)):
                if self.book.ask - self._tol <= quote.price < self.book.ask + jump * tick:
                    self._fill_quote(Side.ASK, raw.time)
            elif etype is EventType.MARKET_SELL and (quote := self._active(Side.BID)):
                if self._at_best(quote.price, Side.BID) and self.agent_rng.random() < self.config.z3:
                    self._fill_quote(Side.BID, raw.time)
            elif etype is EventType.MARKET_BUY and (quote := self._active(Side.ASK)):
                if self._at_best(quote.price, Side.ASK) and self.agent_rng.random() < self.config.z3:
                    self._fill_quote(Side.ASK, raw.time)

            ev = MarkedEvent(etype, raw.time, jump, EventSource.MARKET)
            self.book = apply_event(self.book, ev)
            self.event_log.append(ev)
            self._settle_quotes()

    # --------------------------------------------------------------- results

    def inventory_identity_holds(self) -> bool:
        c = self.counts
        return self.inventory == c["bid"] - c["ask"] + c["market_buy"] - c["market_sell"]

    def episode_summary(self) -> Dict:
        n = max(self.step_index, 1)
        return {
            "pnl": self.wealth,
            "penalty": self.penalty_total,
            "terminal_inventory": self.inventory,
            "map": self.abs_inventory_sum / n,
            "n_trades": len(self.fills),
        }

    def event_log_rows(self) -> List[Dict]:
        """Replay the log against the initial book for the event CSV."""
        rows = []
        book = self.book0
        for ev in self.event_log:
            book = apply_event(book, ev)
            rows.append(
                {
                    "time": ev.time,
                    "etype": ev.etype.label,
                    "jump_ticks": ev.jump if ev.jump is not None else 0.0,
                    "source": ev.source.value,
                    "bid": book.bid,
                    "ask": book.ask,
                }
            )
        return rows


@dataclass(frozen=True)
class EnvFactory:
    """Picklable recipe for fresh environments (used by worker processes)."""

    env: EnvConfig = field(default_factory=EnvConfig)
    hawkes: HawkesParams = field(default_factory=HawkesParams)
    norm: Optional[NormStats] = None
    record_trace: bool = False

    def __call__(self) -> MarketMakingEnv:
        return MarketMakingEnv(self.env, self.hawkes, self.norm, self.record_trace)

    def for_episode(self, seed: int) -> "EnvFactory":
        return self

    def with_norm(self, norm: Optional[NormStats]) -> "EnvFactory":
        return replace(self, norm=norm)

    def with_maker_fee(self, fee: float) -> "EnvFactory":
        return replace(self, env=self.env.model_copy(update={"maker_fee": fee}))


def calibrate_normalization(
    factory: EnvFactory,
    seed: int,
    n_steps: int = 100_000,
    path: Optional[Path] = None,
    config_hash: str = "",
    master_seed: Optional[int] = None,
) -> NormStats:
    """Spread / trend moments under a uniformly random controller.

    Samples are the observations the controller acts on, one per step,
    across as many episodes as needed.
    """
    from app.services.neural_policy import map_action

    rng = np.random.default_rng(seed)
    env = factory.with_norm(None)()
    spread, trend = RunningMoments(), RunningMoments()
    limit = factory.env.max_offset_ticks
    done = True
    for _ in range(n_steps):
        if done:
            env.reset(seed=int(rng.integers(0, 2**31 - 1)))
        _, raw_spread, raw_trend = env.raw_observation()
        spread.update(raw_spread)
        trend.update(raw_trend)
        action = map_action(rng.uniform(-1.0, 1.0, size=2), limit)
        _, _, done, _, _ = env.step(action)

    if not (spread.std > 0 and trend.std > 0):
        raise CalibrationError(
            f"degenerate feature variance (spread std={spread.std}, trend std={trend.std})"
        )
    stats = NormStats(
        mean_spread=spread.mean,
        std_spread=spread.std,
        mean_trend=trend.mean,
        std_trend=trend.std,
        n_steps=n_steps,
        seed=seed,
        config_hash=config_hash,
        master_seed=master_seed,
    )
    logger.info(
        "calibrated normalization over %d steps: spread %.4f +/- %.4f, trend %.4f +/- %.4f",
        n_steps, stats.mean_spread, stats.std_spread, stats.mean_trend, stats.std_trend,
    )
    if path is not None:
        save_norm_stats(stats, path)
    return stats


def save_norm_stats(stats: NormStats, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(stats.model_dump_json(indent=2) + "\n")


def load_norm_stats(path: Path) -> NormStats:
    path = Path(path)
    if not path.exists():
        raise CalibrationError(f"normalization file {path} not found; run calibrate-norm first")
    return NormStats.model_validate_json(path.read_text())
