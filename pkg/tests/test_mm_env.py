import json
import math

import numpy as np
import pytest

from app.exceptions import CalibrationError, ConfigurationError, EpisodeFinishedError
from app.schemas import EnvConfig, HawkesParams, LinParams, NormStats
from app.services.hawkes import EventSource, RawEvent
from app.services.lob import EventType, mid_price_identity_check
from app.services.mm_env import (
    EnvFactory,
    MarketMakingEnv,
    RunningMoments,
    Side,
    calibrate_normalization,
    load_norm_stats,
    normalize,
    trend_alpha,
)
from app.services.strategies import LinearInventoryStrategy, SymmetricStrategy

NO_QUOTES = (-5, -5)


class ScriptedHawkes:
    """Replays fixed market events; agent injections are ignored."""

    def __init__(self, events):
        self.events = list(events)

    def next_event(self, rng, t_max):
        if self.events and self.events[0].time < t_max:
            return self.events.pop(0)
        return None

    def inject_event(self, dim_index, time):
        pass

    def intensity(self, state=None):
        return np.zeros(8)


def scripted_env(events, jump=1.5, **env_overrides):
    config = EnvConfig(**{"agent_feedback": False, **env_overrides})
    env = MarketMakingEnv(config, HawkesParams(mu=[0.0] * 8))
    env.reset(seed=0)
    env.hawkes = ScriptedHawkes(RawEvent(t, int(e)) for t, e in events)
    env._draw_jump = lambda rng, bound: jump
    return env


def quiet_env(**env_overrides):
    config = EnvConfig(**{"agent_feedback": False, "z1": 0.0, **env_overrides})
    env = MarketMakingEnv(config, HawkesParams(mu=[0.0] * 8))
    env.reset(seed=0)
    return env


def test_reset_state(factory):
    env = factory()
    obs, info = env.reset(seed=3)
    assert obs.shape == (3,)
    assert obs[0] == 0.0
    assert env.wealth == 0.0
    assert info["inventory"] == 0
    assert info["spread_ticks"] == pytest.approx(2.0)
    assert env.observation_space.contains(obs)


def test_reset_is_deterministic(factory):
    env = factory()
    first, _ = env.reset(seed=11)
    env.step((0, 0))
    second, _ = env.reset(seed=11)
    np.testing.assert_array_equal(first, second)


def test_unstable_hawkes_rejected(env_config):
    params = HawkesParams.model_construct(mu=[0.1] * 8, alpha=[[0.5] * 8 for _ in range(8)], beta=[[1.0] * 8 for _ in range(8)])
    with pytest.raises(ConfigurationError):
        MarketMakingEnv(env_config, params)


def test_episode_length_and_done(factory):
    env = factory()
    env.reset(seed=1)
    steps = 0
    done = False
    while not done:
        _, _, done, truncated, _ = env.step((1, 1))
        assert truncated is False
        steps += 1
    assert steps == env.config.n_steps == 100
    with pytest.raises(EpisodeFinishedError):
        env.step((0, 0))


def test_non_finite_action_rejected(factory):
    env = factory()
    env.reset(seed=1)
    with pytest.raises(ValueError):
        env.step((math.nan, 0))


def test_crossing_bid_is_market_buy():
    env = quiet_env()
    ask = env.book.ask
    env.step((5, -2))
    assert env.inventory == 1
    assert env.cash == pytest.approx(-ask * 1.002)
    assert env.counts["market_buy"] == 1
    assert env.fills[0].kind == "market"
    # the neutral agent order leaves the book alone
    assert env.book.ask == ask


def test_penalty_only_step_reward():
    """I = 2 held for one step with nothing posted: R = -phi * 2 * dt."""
    env = quiet_env()
    env.step((5, -2))
    env.step((5, -2))
    assert env.inventory == 2
    _, reward, _, _, info = env.step(NO_QUOTES)
    assert reward == pytest.approx(-0.02, abs=1e-12)
    assert info["fills"] == 0


def test_inventory_limit_drops_bid_side():
    env = quiet_env()
    for _ in range(3):
        env.step((5, -2))
    assert env.inventory == 3
    env.step((1, 1))
    assert env.quotes[Side.BID] is None
    assert env.quotes[Side.ASK] is not None and env.quotes[Side.ASK].active


def test_negative_quoted_spread_posts_nothing():
    env = quiet_env()
    env.step((-2, -2))
    assert env.quotes == {Side.BID: None, Side.ASK: None}
    assert env.fills == []


def test_quote_inside_spread_improves_best():
    env = quiet_env()
    env.step((5, -1))
    assert env.book.bid == pytest.approx(100.0)
    first = env.event_log[0]
    assert first.etype is EventType.LIMIT_BUY_AGG
    assert first.source is EventSource.AGENT
    assert first.jump == pytest.approx(1.0)
    assert env.quotes[Side.BID].price == env.book.bid


def test_agent_events_excite_hawkes(env_config):
    env = MarketMakingEnv(env_config.model_copy(update={"z1": 0.0}), HawkesParams(mu=[0.0] * 8))
    env.reset(seed=0)
    env.step((5, -1))
    assert env.hawkes.state.event_counts[EventType.LIMIT_BUY_AGG] >= 1
    assert env.event_log[0].source is EventSource.AGENT


def test_aggressive_sell_fills_bid_at_best():
    env = scripted_env([(0.5, EventType.MARKET_SELL_AGG)], jump=1.5)
    bid = env.book.bid
    env.step((0, 0))
    assert env.inventory == 1
    assert env.cash == pytest.approx(-bid)
    assert env.quotes[Side.BID].active is False
    assert env.book.bid == pytest.approx(bid - 0.015)


def test_aggressive_sell_sweeps_deeper_bid():
    env = scripted_env([(0.5, EventType.MARKET_SELL_AGG)], jump=1.5)
    env.step((0, 1))
    assert env.inventory == 1
    assert env.fills[0].price == pytest.approx(99.98)


def test_short_sweep_misses_deeper_bid():
    env = scripted_env([(0.5, EventType.MARKET_SELL_AGG)], jump=0.5)
    env.step((0, 1))
    assert env.inventory == 0


def test_aggressive_buy_fills_ask_with_maker_fee():
    env = scripted_env([(0.2, EventType.MARKET_BUY_AGG)], jump=2.0, maker_fee=0.001)
    ask = env.book.ask
    env.step((0, 0))
    assert env.inventory == -1
    assert env.cash == pytest.approx(ask * (1 - 0.001))


@pytest.mark.parametrize("z3, filled", [(1.0, True), (0.0, False)])
def test_neutral_market_order_fills_with_probability_z3(z3, filled):
    env = scripted_env([(0.5, EventType.MARKET_SELL)], z3=z3)
    env.step((0, 0))
    assert (env.inventory == 1) is filled


def test_neutral_market_order_skips_quote_behind_best():
    env = scripted_env([(0.5, EventType.MARKET_SELL)], z3=1.0)
    env.step((0, 1))
    assert env.inventory == 0


def test_filled_quote_is_not_refilled_in_same_step():
    env = scripted_env([(0.2, EventType.MARKET_SELL), (0.4, EventType.MARKET_SELL)], z3=1.0)
    env.step((0, 0))
    assert env.inventory == 1


def feedback_env(jump=0.5, **env_overrides):
    """Agent events reach the Hawkes state; the market itself stays silent."""
    config = EnvConfig(**{"agent_feedback": True, **env_overrides})
    env = MarketMakingEnv(config, HawkesParams(mu=[0.0] * 8, alpha=[[0.0] * 8 for _ in range(8)]))
    env.reset(seed=0)
    bounds = []
    if jump is not None:

        def draw(rng, bound):
            bounds.append(bound)
            return jump

        env._draw_jump = draw
    return env, bounds


def test_aggressive_agent_cancel_moves_both_sides():
    env, bounds = feedback_env(jump=0.5, z2=1.0)
    env.step((0, 0))
    bid, ask = env.book.bid, env.book.ask
    env.step(NO_QUOTES)
    assert env.book.bid == pytest.approx(bid - 0.005)
    assert env.book.ask == pytest.approx(ask + 0.005)
    assert [ev.etype for ev in env.event_log] == [EventType.CANCEL_BUY_AGG, EventType.CANCEL_SELL_AGG]
    assert all(ev.source is EventSource.AGENT for ev in env.event_log)
    counts = env.hawkes.state.event_counts
    assert counts[EventType.CANCEL_BUY_AGG] == 1
    assert counts[EventType.CANCEL_SELL_AGG] == 1
    assert counts.sum() == 2
    # truncated at the spread in force when each cancel is drawn
    assert bounds == pytest.approx([2.0, 2.5])


def test_agent_cancel_behind_best_leaves_book_alone():
    env, _ = feedback_env(z2=1.0)
    env.step((1, 1))
    bid, ask = env.book.bid, env.book.ask
    env.step(NO_QUOTES)
    assert env.event_log == []
    assert (env.book.bid, env.book.ask) == (bid, ask)
    assert env.hawkes.state.event_counts.sum() == 0


def test_untruncated_agent_cancel_has_no_bound():
    env, bounds = feedback_env(z2=1.0, cancel_truncation="none")
    env.step((0, 0))
    env.step(NO_QUOTES)
    assert bounds == [None, None]


def test_rounded_agent_cancel_is_one_tick_on_two_tick_spread():
    env, _ = feedback_env(jump=None, z2=1.0, round_jumps=True)
    env.step((0, 0))
    bid = env.book.bid
    env.step(NO_QUOTES)
    assert env.event_log[0].etype is EventType.CANCEL_BUY_AGG
    assert env.event_log[0].jump == 1.0
    assert env.book.bid == pytest.approx(bid - 0.01)
    assert float(env.event_log[1].jump).is_integer()


def test_aggressive_agent_market_buy_lifts_ask():
    env, bounds = feedback_env(jump=0.7, z1=1.0)
    ask = env.book.ask
    env.step((5, -2))
    assert env.inventory == 1
    assert env.fills[0].price == pytest.approx(ask)
    assert env.book.ask == pytest.approx(ask + 0.007)
    last = env.event_log[-1]
    assert last.etype is EventType.MARKET_BUY_AGG
    assert last.source is EventSource.AGENT
    assert env.hawkes.state.event_counts[EventType.MARKET_BUY_AGG] == 1
    assert bounds == [None]


def test_aggressive_agent_market_sell_hits_bid():
    env, _ = feedback_env(jump=0.7, z1=1.0)
    bid = env.book.bid
    env.step((-2, 5))
    assert env.inventory == -1
    assert env.fills[0].price == pytest.approx(bid)
    assert env.book.bid == pytest.approx(bid - 0.007)
    last = env.event_log[-1]
    assert last.etype is EventType.MARKET_SELL_AGG
    assert last.source is EventSource.AGENT
    assert env.hawkes.state.event_counts[EventType.MARKET_SELL_AGG] == 1


def test_market_cancel_cannot_empty_agent_only_level():
    env = scripted_env([(0.5, EventType.CANCEL_BUY_AGG), (0.7, EventType.MARKET_SELL_AGG)], jump=1.0, z1=0.0)
    env.step((5, -1))
    cancel = env.event_log[1]
    assert cancel.etype is EventType.CANCEL_BUY_AGG
    assert cancel.source is EventSource.MARKET
    assert cancel.jump is None
    # the improving bid still makes the best and is hit by the sell
    assert env.inventory == 1
    assert env.fills[0].price == pytest.approx(100.0)


def test_market_cancel_of_shared_best_withdraws_quote():
    env = scripted_env([(0.5, EventType.CANCEL_BUY_AGG), (0.7, EventType.MARKET_SELL_AGG)], jump=1.0)
    env.step((0, 0))
    assert env.event_log[0].jump == 1.0
    assert env.quotes[Side.BID].active is False
    assert env.inventory == 0


def test_trend_alpha_signs(hawkes_params):
    env = MarketMakingEnv(EnvConfig(), hawkes_params)
    env.reset(seed=0)
    assert env.trend == pytest.approx(0.0, abs=1e-12)
    env.hawkes.inject_event(int(EventType.MARKET_BUY_AGG), 0.0)
    lam = env.hawkes.intensity()
    assert env.trend > 0
    assert env.trend == pytest.approx(lam[0] + lam[6] - lam[1] - lam[7])
    assert trend_alpha(lam) == env.trend


def test_normalize_examples():
    norm = NormStats(mean_spread=2.0, std_spread=0.5, mean_trend=0.1, std_trend=0.2)
    obs = normalize((-3, 2.0, 0.5), 3, norm)
    np.testing.assert_allclose(obs, [-1.0, 0.0, 2.0])


def test_normalize_rejects_zero_std():
    norm = NormStats.model_construct(mean_spread=0.0, std_spread=0.0, mean_trend=0.0, std_trend=1.0)
    with pytest.raises(CalibrationError):
        normalize((0, 1.0, 0.0), 3, norm)


def test_running_moments_match_numpy(rng):
    x = rng.normal(5.0, 2.0, size=1000)
    moments = RunningMoments()
    for v in x:
        moments.update(v)
    assert moments.mean == pytest.approx(x.mean(), rel=1e-12)
    assert moments.std == pytest.approx(x.std(), rel=1e-10)


def test_calibration_is_deterministic(factory, tmp_path):
    a = calibrate_normalization(factory, seed=5, n_steps=300, path=tmp_path / "a.json")
    b = calibrate_normalization(factory, seed=5, n_steps=300, path=tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert a == b == load_norm_stats(tmp_path / "a.json")
    assert json.loads((tmp_path / "a.json").read_text())["n_steps"] == 300


def test_calibration_degenerate_trend():
    factory = EnvFactory(EnvConfig(agent_feedback=False), HawkesParams(mu=[0.0] * 8))
    with pytest.raises(CalibrationError):
        calibrate_normalization(factory, seed=0, n_steps=200)


def test_missing_norm_file(tmp_path):
    with pytest.raises(CalibrationError):
        load_norm_stats(tmp_path / "absent.json")


def _replay_wealth(env):
    total, inventory, last_mid = 0.0, 0, None
    for fill in env.fills:
        if last_mid is not None:
            total += inventory * (fill.mid - last_mid)
        total += fill.edge
        inventory += fill.quantity
        last_mid = fill.mid
    if last_mid is not None:
        total += inventory * (env.mid - last_mid)
    return total


@pytest.mark.parametrize(
    "controller",
    [SymmetricStrategy(), LinearInventoryStrategy(LinParams(theta0=1.0, theta1=1.0), 3)],
    ids=["sym", "lin"],
)
def test_accounting_identities(factory, controller):
    for seed in range(100):
        env = factory()
        obs, _ = env.reset(seed=seed)
        total_reward = 0.0
        done = False
        while not done:
            obs, reward, done, _, _ = env.step(controller.act(obs))
            total_reward += reward
            assert abs(env.inventory) <= env.config.inventory_limit
            assert env.inventory_identity_holds()
        assert mid_price_identity_check(env.event_log, env.book0, env.book)
        assert env.cash == pytest.approx(math.fsum(f.cash_flow for f in env.fills), abs=1e-9)
        assert env.wealth == pytest.approx(_replay_wealth(env), abs=1e-9)
        assert total_reward == pytest.approx(env.wealth - env.penalty_total, abs=1e-9)


def test_market_randomness_shared_without_feedback(env_config, hawkes_params):
    factory = EnvFactory(env_config.model_copy(update={"agent_feedback": False}), hawkes_params)

    def market_stream(controller):
        env = factory()
        obs, _ = env.reset(seed=42)
        done = False
        while not done:
            obs, _, done, _, _ = env.step(controller.act(obs))
        return [(ev.time, ev.etype) for ev in env.event_log if ev.source is EventSource.MARKET]

    sym = market_stream(SymmetricStrategy())
    lin = market_stream(LinearInventoryStrategy(LinParams(theta0=2.0, theta1=1.0), 3))
    assert sym == lin
    assert len(sym) > 0


def test_trace_and_event_rows(env_config, hawkes_params):
    env = EnvFactory(env_config, hawkes_params, record_trace=True)()
    env.reset(seed=9)
    for _ in range(5):
        env.step((0, 0))
    assert len(env.trace) == 5
    assert set(env.trace[0]) == {"t", "I", "X", "bid", "ask", "off_a", "off_b", "fills", "reward"}
    rows = env.event_log_rows()
    assert len(rows) == len(env.event_log)
    if rows:
        assert rows[-1]["bid"] == pytest.approx(env.book.bid)
