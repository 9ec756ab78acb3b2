"""
Monte Carlo evaluation of a controller and the metric battery used to compare them.

Episode i runs on seed seed_base + i, so two controllers evaluated with the
same seed_base face the same market randomness. Episodes are independent and
fan out over worker processes when more than one worker is configured.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from app.config import resolve_workers
from app.exceptions import InsufficientDataError
from app.schemas import DistributionStats, EnvConfig, EpisodeRecord, HawkesParams, MetricsSummary
from app.services.mm_env import EnvFactory
from app.services.strategies import Controller

logger = logging.getLogger(__name__)

PERCENTILES = (10, 20, 80, 90)
CI_Z = 1.959963984540054


def run_episode(
    factory: EnvFactory, controller: Controller, seed: int, keep_path: bool = False
) -> EpisodeRecord:
    env = factory.for_episode(seed)()
    obs, _ = env.reset(seed=seed)
    total_return = 0.0
    done = False
    while not done:
        obs, reward, done, _, _ = env.step(controller.act(obs))
        total_return += reward
    summary = env.episode_summary()
    return EpisodeRecord(
        seed=seed,
        pnl=summary["pnl"],
        episode_return=total_return,
        penalty=summary["penalty"],
        terminal_inventory=summary["terminal_inventory"],
        map=summary["map"],
        n_trades=summary["n_trades"],
        wealth_path=list(env.wealth_path) if keep_path else None,
    )


def _run_chunk(args) -> List[EpisodeRecord]:
    factory, controller, seeds, keep_paths = args
    return [run_episode(factory, controller, s, keep_paths) for s in seeds]


def run_monte_carlo(
    factory: EnvFactory,
    controller: Controller,
    n_episodes: int = 1000,
    seed_base: int = 0,
    workers: Optional[int] = None,
    keep_paths: bool = False,
) -> List[EpisodeRecord]:
    """Records for seeds seed_base .. seed_base + n_episodes - 1, in seed order."""
    seeds = list(range(seed_base, seed_base + n_episodes))
    if not seeds:
        return []
    n_workers = min(resolve_workers(workers), len(seeds))
    if n_workers <= 1:
        return _run_chunk((factory, controller, seeds, keep_paths))
    chunks = [seeds[i::n_workers] for i in range(n_workers)]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        results = pool.map(_run_chunk, [(factory, controller, c, keep_paths) for c in chunks])
        records = [r for chunk in results for r in chunk]
    logger.debug("ran %d episodes on %d workers", len(records), n_workers)
    return sorted(records, key=lambda r: r.seed)


def jarque_bera_from_moments(n: int, skewness: float, kurtosis: float) -> Tuple[float, float]:
    """JB = n/6 (S^2 + K^2/4) with K the excess kurtosis; p from chi-square(2)."""
    jb = n / 6.0 * (skewness**2 + kurtosis**2 / 4.0)
    return float(jb), float(stats.chi2.sf(jb, df=2))


def _moments(x: np.ndarray) -> Tuple[float, float]:
    # Biased sample skewness and excess kurtosis; a constant sample has neither.
    if np.ptp(x) == 0:
        return 0.0, 0.0
    return float(stats.skew(x, bias=True)), float(stats.kurtosis(x, fisher=True, bias=True))


def jarque_bera(samples: Sequence[float]) -> Tuple[float, float]:
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise InsufficientDataError(f"Jarque-Bera needs >= 2 samples, got {x.size}")
    return jarque_bera_from_moments(x.size, *_moments(x))


def distribution_stats(samples: Sequence[float]) -> DistributionStats:
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise InsufficientDataError(f"need >= 2 samples, got {x.size}")
    skewness, kurtosis = _moments(x)
    jb, p = jarque_bera_from_moments(x.size, skewness, kurtosis)
    p10, p20, p80, p90 = np.percentile(x, PERCENTILES, method="linear")
    return DistributionStats(
        mean=float(np.mean(x)),
        std=float(np.std(x, ddof=1)),
        skewness=skewness,
        kurtosis=kurtosis,
        jarque_bera=jb,
        jarque_bera_pvalue=p,
        p10=float(p10),
        p20=float(p20),
        p80=float(p80),
        p90=float(p90),
    )


def ratio(numerator: float, denominator: float) -> float:
    """numerator / denominator, NaN when the denominator is zero."""
    return numerator / denominator if denominator != 0 else math.nan


def summarize(records: Sequence[EpisodeRecord]) -> MetricsSummary:
    if len(records) < 2:
        raise InsufficientDataError(f"summarize needs >= 2 episodes, got {len(records)}")
    # Seed order makes the reduction independent of the input order.
    ordered = sorted(records, key=lambda r: r.seed)
    pnl = distribution_stats([r.pnl for r in ordered])
    inventory = distribution_stats([r.terminal_inventory for r in ordered])
    mean_map = float(np.mean([r.map for r in ordered]))
    return MetricsSummary(
        n_episodes=len(ordered),
        mean_return=float(np.mean([r.episode_return for r in ordered])),
        pnl=pnl,
        inventory=inventory,
        abs_mean_terminal_inventory=float(np.mean([abs(r.terminal_inventory) for r in ordered])),
        sharpe=ratio(pnl.mean, pnl.std),
        map=mean_map,
        pnl_to_map=ratio(pnl.mean, mean_map),
        mean_trades=float(np.mean([r.n_trades for r in ordered])),
    )


def wealth_curve(records: Sequence[EpisodeRecord]) -> pd.DataFrame:
    """Per-step mean wealth across episodes with a 95% normal confidence band."""
    paths = [r.wealth_path for r in records]
    if len(paths) < 2 or any(p is None for p in paths):
        raise InsufficientDataError("wealth curve needs >= 2 episodes run with keep_paths=True")
    matrix = np.asarray(paths, dtype=float)
    mean = matrix.mean(axis=0)
    half = CI_Z * matrix.std(axis=0, ddof=1) / math.sqrt(matrix.shape[0])
    return pd.DataFrame(
        {
            "step": np.arange(1, matrix.shape[1] + 1),
            "mean_wealth": mean,
            "ci_low": mean - half,
            "ci_high": mean + half,
        }
    )


@dataclass(frozen=True)
class NoisyEnvFactory:
    """Perturbs the baseline intensities once per episode: mu + N(0, variance), floored at 0."""

    base: EnvFactory
    variance: float
    noise_seed: int = 0

    @property
    def env(self) -> EnvConfig:
        return self.base.env

    def perturbed_hawkes(self, seed: int) -> HawkesParams:
        params = self.base.hawkes
        if self.variance == 0:
            return params
        rng = np.random.default_rng([self.noise_seed, seed])
        mu = np.asarray(params.mu) + rng.normal(0.0, math.sqrt(self.variance), size=params.dim)
        # Kernels are unchanged, so revalidation only confirms stability.
        return HawkesParams(mu=np.maximum(mu, 0.0).tolist(), alpha=params.alpha, beta=params.beta)

    def for_episode(self, seed: int) -> EnvFactory:
        return replace(self.base, hawkes=self.perturbed_hawkes(seed))

    def __call__(self):
        return self.base()


def summary_row(summary: MetricsSummary, **labels) -> Dict:
    return {
        **labels,
        "mean_return": summary.mean_return,
        "mean_pnl": summary.pnl.mean,
        "std_pnl": summary.pnl.std,
        "sharpe": summary.sharpe,
        "map": summary.map,
        "pnl_to_map": summary.pnl_to_map,
        "mean_trades": summary.mean_trades,
    }


def sweep_noise(
    factory: EnvFactory,
    controller: Controller,
    variances: Sequence[float] = (0.1, 0.2, 0.3),
    n_episodes: int = 1000,
    seed_base: int = 0,
    noise_seed: int = 0,
    workers: Optional[int] = None,
) -> Tuple[pd.DataFrame, Dict[float, MetricsSummary]]:
    """Fixed controller under Gaussian perturbations of the baseline intensities."""
    summaries = {}
    for variance in variances:
        noisy = NoisyEnvFactory(factory, float(variance), noise_seed)
        summaries[variance] = summarize(
            run_monte_carlo(noisy, controller, n_episodes, seed_base, workers=workers)
        )
        logger.info("noise variance %g: sharpe %.4f", variance, summaries[variance].sharpe)
    table = pd.DataFrame([summary_row(s, variance=v) for v, s in summaries.items()])
    return table, summaries


Retrainer = Callable[[EnvFactory, float], Controller]


def sweep_fees(
    factory: EnvFactory,
    controllers: Dict[str, Controller],
    maker_fees: Sequence[float] = (0.0, 0.002, 0.004, 0.006),
    n_episodes: int = 1000,
    seed_base: int = 0,
    retrain: Optional[Retrainer] = None,
    retrained_name: str = "DRL",
    workers: Optional[int] = None,
) -> pd.DataFrame:
    """Every controller under every maker fee.

    With `retrain`, a fresh controller is trained per fee level and reported
    under `retrained_name` in place of any fixed controller of that name.
    """
    rows = []
    for fee in maker_fees:
        fee_factory = factory.with_maker_fee(float(fee))
        lineup = dict(controllers)
        if retrain is not None:
            lineup[retrained_name] = retrain(fee_factory, float(fee))
        for name, controller in lineup.items():
            summary = summarize(run_monte_carlo(fee_factory, controller, n_episodes, seed_base, workers=workers))
            rows.append(summary_row(summary, controller=name, maker_fee=float(fee)))
            logger.info(
                "fee %g %s: sharpe %.4f, mean trades %.2f", fee, name, summary.sharpe, summary.mean_trades
            )
    return pd.DataFrame(rows)
