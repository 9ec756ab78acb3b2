import numpy as np
import pytest

from app.schemas import EnvConfig, HawkesParams, LinParams
from app.services.mm_env import EnvFactory
from app.services.strategies import (
    GRID_REPORT_COLUMNS,
    LinearInventoryStrategy,
    SymmetricStrategy,
    grid_search_lin,
    lin_act,
)


def test_symmetric_quotes_at_best():
    sym = SymmetricStrategy()
    np.testing.assert_array_equal(sym.act(np.array([0.7, -1.0, 2.0])), [0, 0])
    assert sym.name == "SYM"
    assert sym.deterministic


@pytest.mark.parametrize(
    "theta0, theta1, inventory, expected",
    [
        (1.0, 1.0, 2, (-1, 3)),
        (1.0, 1.0, -2, (3, -1)),
        (2.0, 0.0, 3, (2, 2)),
        (0.0, 0.5, 1, (-1, 1)),  # +-0.5 rounds away from zero
        (1.0, 0.4, 1, (1, 1)),
    ],
)
def test_lin_offsets(theta0, theta1, inventory, expected):
    assert lin_act(LinParams(theta0=theta0, theta1=theta1), inventory) == expected


def test_lin_reads_inventory_from_observation():
    lin = LinearInventoryStrategy(LinParams(theta0=1.0, theta1=1.0), inventory_limit=3)
    np.testing.assert_array_equal(lin.act(np.array([2 / 3, 0.1, -0.2])), [-1, 3])
    assert lin.name == "LIN(1,1)"


def test_lin_params_reject_negative():
    with pytest.raises(ValueError):
        LinParams(theta0=-1.0, theta1=0.0)


def test_grid_search_rejects_empty_grid(factory):
    with pytest.raises(ValueError):
        grid_search_lin(factory, [], n_episodes=2, seed_base=0, workers=1)


def test_singleton_grid(factory):
    only = LinParams(theta0=1.0, theta1=0.5)
    best, report = grid_search_lin(factory, [only], n_episodes=3, seed_base=0, workers=1)
    assert best == only
    assert list(report.columns) == GRID_REPORT_COLUMNS
    assert len(report) == 1


def test_grid_search_is_deterministic(factory):
    grid = [LinParams(theta0=a, theta1=b) for a in (0.0, 2.0) for b in (0.0, 1.0)]
    first = grid_search_lin(factory, grid, n_episodes=3, seed_base=10, workers=1)
    second = grid_search_lin(factory, list(reversed(grid)), n_episodes=3, seed_base=10, workers=1)
    assert first[0] == second[0]
    assert sorted(first[1]["mean_return"]) == sorted(second[1]["mean_return"])


def test_grid_ties_go_to_smallest_parameters(quiet_factory):
    """Quotes behind the best never trade in a silent market, so every candidate scores 0."""
    grid = [LinParams(theta0=a, theta1=b) for a in (2.0, 1.0) for b in (1.0, 0.0)]
    best, report = grid_search_lin(quiet_factory, grid, n_episodes=2, seed_base=0, workers=1)
    assert (report["mean_return"] == 0).all()
    assert best == LinParams(theta0=1.0, theta1=0.0)


@pytest.mark.parametrize("inventory", [1, 2, 3])
def test_lin_skew_is_antisymmetric(inventory):
    params = LinParams(theta0=2.0, theta1=1.5)
    long_a, long_b = lin_act(params, inventory)
    assert lin_act(params, -inventory) == (long_b, long_a)


@pytest.mark.parametrize(
    "phi, expected",
    [(0.0, LinParams(theta0=0.0, theta1=0.0)), (1.0, LinParams(theta0=5.0, theta1=5.0))],
    ids=["spread-capture", "heavy-penalty"],
)
def test_grid_search_picks_best_scoring_candidate(phi, expected):
    """Neutral flow never moves the mid, so quoting at the best earns half a spread per fill.

    Without a penalty that edge beats standing aside; a heavy penalty flips the choice.
    """
    flow = HawkesParams(mu=[0.0] * 6 + [0.5, 0.5], alpha=[[0.0] * 8 for _ in range(8)])
    config = EnvConfig(z2=0.0, z3=1.0, inventory_penalty=phi, horizon=50.0)
    grid = [LinParams(theta0=5.0, theta1=5.0), LinParams(theta0=0.0, theta1=0.0)]
    best, report = grid_search_lin(EnvFactory(config, flow), grid, n_episodes=3, seed_base=0, workers=1)
    assert best == expected
    by_theta = report.set_index("theta0")["mean_return"]
    assert by_theta[5.0] == 0.0
    if phi == 0.0:
        assert by_theta[0.0] > 0.0
    else:
        assert by_theta[0.0] < 0.0
