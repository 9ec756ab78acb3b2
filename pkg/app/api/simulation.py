"""
Simulation API endpoints

Small, synchronous entry points over the simulator:
- Inspect the active run configuration
- Run one episode with a benchmark controller
- Run a short Monte Carlo backtest and return the metric summary
"""

from functools import lru_cache

from fastapi import APIRouter, Depends

from app.config import load_config, settings
from app.schemas import (
    BacktestRequest,
    EpisodeRecord,
    EpisodeRequest,
    LinParams,
    MetricsSummary,
    RunConfig,
)
from app.services.backtest import run_episode, run_monte_carlo, summarize
from app.services.mm_env import EnvFactory
from app.services.strategies import Controller, LinearInventoryStrategy, SymmetricStrategy

router = APIRouter()


@lru_cache(maxsize=1)
def get_run_config() -> RunConfig:
    return load_config(settings.config_path)


def _controller(name: str, theta0: float, theta1: float, config: RunConfig) -> Controller:
    if name == "lin":
        return LinearInventoryStrategy(LinParams(theta0=theta0, theta1=theta1), config.env.inventory_limit)
    return SymmetricStrategy()


@router.get("/config")
def get_config(config: RunConfig = Depends(get_run_config)):
    """
    Active run configuration and its hash.
    """
    return {"config_hash": config.config_hash(), "config": config.model_dump()}


@router.post("/episode", response_model=EpisodeRecord)
def simulate_episode(request: EpisodeRequest, config: RunConfig = Depends(get_run_config)):
    """
    Run one episode and return its record, including the per-step wealth path.
    """
    controller = _controller(request.controller, request.theta0, request.theta1, config)
    return run_episode(EnvFactory(config.env, config.hawkes), controller, request.seed, keep_path=True)


@router.post("/backtest", response_model=MetricsSummary)
def run_backtest(request: BacktestRequest, config: RunConfig = Depends(get_run_config)):
    """
    Monte Carlo backtest on seeds seed_base .. seed_base + episodes - 1.
    """
    controller = _controller(request.controller, request.theta0, request.theta1, config)
    records = run_monte_carlo(
        EnvFactory(config.env, config.hawkes), controller, request.episodes, request.seed_base, workers=1
    )
    return summarize(records)
