"""
Benchmark quoting rules and the controller interface shared with the neural policy.

SYM quotes at the best bid and ask. LIN skews both offsets linearly in
inventory; the best member of a (theta0, theta1) grid is picked by Monte
Carlo evaluation on a shared seed set.
"""

import logging
from abc import ABC, abstractmethod
from typing import TYPE_CHECKING, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from app.schemas import LinParams
from app.services.lob import quantize_ticks

if TYPE_CHECKING:
    from app.services.mm_env import EnvFactory

logger = logging.getLogger(__name__)

GRID_REPORT_COLUMNS = ["theta0", "theta1", "mean_return", "mean_pnl", "std_pnl", "sharpe", "map"]


class Controller(ABC):
    """Maps a normalized observation to (ask offset, bid offset) in ticks."""

    deterministic: bool = True

    @abstractmethod
    def act(self, obs: np.ndarray) -> np.ndarray:
        ...

    @property
    def name(self) -> str:
        return type(self).__name__


class SymmetricStrategy(Controller):
    def act(self, obs: np.ndarray) -> np.ndarray:
        return np.zeros(2, dtype=np.int64)

    @property
    def name(self) -> str:
        return "SYM"


def lin_act(params: LinParams, inventory: int) -> Tuple[int, int]:
    """(off_a, off_b): a long position deepens the bid and tightens the ask."""
    off_a = quantize_ticks(params.theta0 - params.theta1 * inventory)
    off_b = quantize_ticks(params.theta0 + params.theta1 * inventory)
    return int(off_a), int(off_b)


class LinearInventoryStrategy(Controller):
    def __init__(self, params: LinParams, inventory_limit: int):
        self.params = params
        self.inventory_limit = inventory_limit

    def act(self, obs: np.ndarray) -> np.ndarray:
        # obs[0] is I / c
        inventory = int(round(float(obs[0]) * self.inventory_limit))
        return np.array(lin_act(self.params, inventory), dtype=np.int64)

    @property
    def name(self) -> str:
        return f"LIN({self.params.theta0:g},{self.params.theta1:g})"


def _score(row: dict, metric: str) -> float:
    value = row[metric]
    return value if np.isfinite(value) else -np.inf


def grid_search_lin(
    factory: "EnvFactory",
    grid: Iterable[LinParams],
    n_episodes: int,
    seed_base: int,
    metric: str = "mean_return",
    workers: Optional[int] = None,
) -> Tuple[LinParams, pd.DataFrame]:
    """Evaluate every candidate on seeds seed_base..seed_base+n-1 and keep the best.

    Ties go to the smaller theta0, then the smaller theta1, so the result
    does not depend on the order of the grid.
    """
    from app.services.backtest import run_monte_carlo, summarize

    candidates: List[LinParams] = list(grid)
    if not candidates:
        raise ValueError("LIN grid is empty")
    rows = []
    for params in candidates:
        controller = LinearInventoryStrategy(params, factory.env.inventory_limit)
        summary = summarize(run_monte_carlo(factory, controller, n_episodes, seed_base, workers=workers))
        rows.append(
            {
                "theta0": params.theta0,
                "theta1": params.theta1,
                "mean_return": summary.mean_return,
                "mean_pnl": summary.pnl.mean,
                "std_pnl": summary.pnl.std,
                "sharpe": summary.sharpe,
                "map": summary.map,
                "pnl_to_map": summary.pnl_to_map,
            }
        )
        logger.info("LIN %s: %s = %.6g", controller.name, metric, rows[-1][metric])

    best = min(rows, key=lambda r: (-_score(r, metric), r["theta0"], r["theta1"]))
    chosen = LinParams(theta0=best["theta0"], theta1=best["theta1"])
    report = pd.DataFrame(rows)[GRID_REPORT_COLUMNS]
    logger.info("selected LIN theta0=%g theta1=%g", chosen.theta0, chosen.theta1)
    return chosen, report
