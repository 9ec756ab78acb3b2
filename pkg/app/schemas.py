import hashlib
import json
import math
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# Dimension order of the 8-variate process:
# M_b^a, M_s^a, L_b^a, L_s^a, C_b^a, C_s^a, M_b^n, M_s^n
DEFAULT_MU = [0.05, 0.05, 0.06, 0.06, 0.05, 0.05, 0.25, 0.25]
DEFAULT_ALPHA = [
    [0.25, 0.00, 0.00, 0.05, 0.00, 0.05, 0.10, 0.00],
    [0.00, 0.25, 0.05, 0.00, 0.05, 0.00, 0.00, 0.10],
    [0.00, 0.15, 0.20, 0.00, 0.15, 0.00, 0.00, 0.00],
    [0.15, 0.00, 0.00, 0.20, 0.00, 0.15, 0.00, 0.00],
    [0.00, 0.05, 0.10, 0.00, 0.20, 0.00, 0.00, 0.00],
    [0.05, 0.00, 0.00, 0.10, 0.00, 0.20, 0.00, 0.00],
    [0.05, 0.00, 0.00, 0.00, 0.00, 0.00, 0.30, 0.05],
    [0.00, 0.05, 0.00, 0.00, 0.00, 0.00, 0.05, 0.30],
]
DEFAULT_BETA = [[1.0] * 8 for _ in range(8)]


def _square(matrix: List[List[float]], dim: int, name: str) -> np.ndarray:
    arr = np.asarray(matrix, dtype=float)
    if arr.shape != (dim, dim):
        raise ValueError(f"{name} must be a {dim}x{dim} matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must contain only finite values")
    return arr


class HawkesParams(BaseModel):
    """Baseline intensities and exponential-kernel parameters.

    Defaults are a stability-checked illustrative set (spectral radius 0.5),
    not calibrated to any market.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    mu: List[float] = Field(default_factory=lambda: list(DEFAULT_MU))
    beta: List[List[float]] = Field(default_factory=lambda: [list(r) for r in DEFAULT_BETA])
    alpha: List[List[float]] = Field(default_factory=lambda: [list(r) for r in DEFAULT_ALPHA])

    @field_validator("mu")
    @classmethod
    def mu_non_negative(cls, v):
        if not v:
            raise ValueError("mu must not be empty")
        if any(not math.isfinite(x) or x < 0 for x in v):
            raise ValueError("baseline intensities must be finite and >= 0")
        return v

    @field_validator("beta")
    @classmethod
    def beta_shape(cls, v, info):
        if "mu" in info.data:
            beta = _square(v, len(info.data["mu"]), "beta")
            if np.any(beta < 0):
                raise ValueError("decay rates must be >= 0")
        return v

    @field_validator("alpha")
    @classmethod
    def alpha_stable(cls, v, info):
        if "mu" not in info.data or "beta" not in info.data:
            return v
        dim = len(info.data["mu"])
        alpha = _square(v, dim, "alpha")
        beta = np.asarray(info.data["beta"], dtype=float)
        if np.any(alpha < 0):
            raise ValueError("excitation jumps must be >= 0")
        if np.any((alpha > 0) & (beta <= 0)):
            raise ValueError("beta must be > 0 wherever alpha > 0")

        from app.services.hawkes import spectral_radius

        radius = spectral_radius(_branching(alpha, beta))
        if radius >= 1.0:
            raise ValueError(f"branching matrix spectral radius {radius:.6g} >= 1 (non-stationary)")
        return v

    @property
    def dim(self) -> int:
        return len(self.mu)

    def arrays(self):
        """Return (mu, alpha, beta) as float arrays."""
        return (
            np.asarray(self.mu, dtype=float),
            np.asarray(self.alpha, dtype=float),
            np.asarray(self.beta, dtype=float),
        )

    def branching_matrix(self) -> np.ndarray:
        _, alpha, beta = self.arrays()
        return _branching(alpha, beta)


def _branching(alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    out = np.zeros_like(alpha)
    mask = alpha > 0
    out[mask] = alpha[mask] / beta[mask]
    return out


class MarkParams(BaseModel):
    """Shifted-exponential jump size distribution, in ticks."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    loc: float = Field(0.01, gt=0, description="Location (minimum jump), ticks")
    scale: float = Field(0.08, gt=0, description="Scale, ticks")


class EnvConfig(BaseModel):
    """Market-making procedure constants."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    dt: float = Field(1.0, gt=0, description="Time-step length")
    horizon: float = Field(100.0, gt=0, description="Terminal time T")
    tick_size: float = Field(0.01, gt=0)
    inventory_penalty: float = Field(0.01, ge=0, description="phi, per unit inventory per unit time")
    inventory_limit: int = Field(3, ge=1, description="c")
    z1: float = Field(8 / 30, ge=0, le=1, description="P(agent market order is aggressive)")
    z2: float = Field(0.25, ge=0, le=1, description="P(agent cancellation at best is aggressive)")
    z3: float = Field(0.25, ge=0, le=1, description="P(non-aggressive market order fills quote at best)")
    maker_fee: float = Field(0.0, ge=0)
    taker_fee: float = Field(0.002, ge=0)
    initial_price: float = Field(100.0, gt=0)
    initial_spread_ticks: int = Field(2, ge=1)
    max_offset_ticks: int = Field(5, ge=1)
    marks: MarkParams = Field(default_factory=MarkParams)
    cancel_truncation: Literal["spread", "none"] = "spread"
    round_jumps: bool = False
    agent_feedback: bool = True

    @model_validator(mode="after")
    def horizon_is_multiple_of_dt(self):
        ratio = self.horizon / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError("horizon must be a positive multiple of dt")
        return self

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


class NormStats(BaseModel):
    """z-score statistics of the raw spread and trend features."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    mean_spread: float
    std_spread: float = Field(..., gt=0)
    mean_trend: float
    std_trend: float = Field(..., gt=0)
    n_steps: int = 0
    seed: Optional[int] = None
    config_hash: str = ""
    master_seed: Optional[int] = None

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(mean_spread=0.0, std_spread=1.0, mean_trend=0.0, std_trend=1.0)

    def fingerprint(self) -> str:
        payload = json.dumps(
            [self.mean_spread, self.std_spread, self.mean_trend, self.std_trend]
        ).encode()
        return hashlib.sha256(payload).hexdigest()


class LinParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    theta0: float = Field(..., ge=0, allow_inf_nan=False, description="Base offset, ticks")
    theta1: float = Field(..., ge=0, allow_inf_nan=False, description="Inventory skew, ticks per unit")


class LinGridConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    theta0: List[float] = Field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0, 4.0])
    theta1: List[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0])
    n_episodes: int = Field(200, ge=2)
    metric: Literal["mean_return", "mean_pnl", "sharpe", "pnl_to_map"] = "mean_return"

    @field_validator("theta0", "theta1")
    @classmethod
    def non_empty_non_negative(cls, v):
        if not v:
            raise ValueError("grid axis must not be empty")
        if any(not math.isfinite(x) or x < 0 for x in v):
            raise ValueError("grid values must be finite and >= 0")
        return v

    def candidates(self) -> List[LinParams]:
        return [LinParams(theta0=a, theta1=b) for a in self.theta0 for b in self.theta1]


class SACConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    gamma: float = Field(1.0, ge=0, le=1)
    batch_size: int = Field(512, ge=1)
    buffer_capacity: int = Field(100_000, ge=1)
    learning_rate: float = Field(3e-4, gt=0)
    learning_starts: int = Field(100, ge=0)
    ent_coef: Union[Literal["auto"], float] = "auto"
    target_entropy: float = -2.0
    init_log_alpha: float = 0.0
    target_update_interval: int = Field(1, ge=1)
    gradient_steps: int = Field(1, ge=1)
    train_freq: int = Field(1, ge=1)
    tau: float = Field(0.005, gt=0, le=1)
    total_steps: int = Field(1_000_000, ge=0)
    eval_interval: int = Field(10_000, ge=1)
    eval_episodes: int = Field(20, ge=1)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)

    @field_validator("ent_coef")
    @classmethod
    def fixed_coef_positive(cls, v):
        if v != "auto" and not v > 0:
            raise ValueError("a fixed entropy coefficient must be > 0")
        return v


class BacktestConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_episodes: int = Field(1000, ge=0)
    noise_variances: List[float] = Field(default_factory=lambda: [0.1, 0.2, 0.3])
    maker_fees: List[float] = Field(default_factory=lambda: [0.0, 0.002, 0.004, 0.006])
    calibration_steps: int = Field(100_000, ge=1)

    @field_validator("noise_variances", "maker_fees")
    @classmethod
    def non_negative(cls, v):
        if any(not math.isfinite(x) or x < 0 for x in v):
            raise ValueError("values must be finite and >= 0")
        return v


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    norm_stats: str = "outputs/norm_stats.json"
    checkpoints: str = "outputs/checkpoints"
    outputs: str = "outputs"


class RunConfig(BaseModel):
    """Complete, validated configuration of a run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    env: EnvConfig = Field(default_factory=EnvConfig)
    hawkes: HawkesParams = Field(default_factory=HawkesParams)
    sac: SACConfig = Field(default_factory=SACConfig)
    lin_grid: LinGridConfig = Field(default_factory=LinGridConfig)
    backtest: BacktestConfig = Field(default_factory=BacktestConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    master_seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def hawkes_is_eight_variate(self):
        if self.hawkes.dim != 8:
            raise ValueError("the order-book process needs exactly 8 Hawkes dimensions")
        return self

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


class EpisodeRecord(BaseModel):
    """Outcome of one Monte Carlo episode."""

    seed: int
    pnl: float = Field(..., description="Terminal wealth W_T")
    episode_return: float
    penalty: float = Field(..., ge=0, description="phi times the integral of |I| dt")
    terminal_inventory: int
    map: float = Field(..., ge=0, description="Mean absolute position")
    n_trades: int = Field(..., ge=0)
    wealth_path: Optional[List[float]] = None

    @model_validator(mode="after")
    def return_telescopes(self):
        expected = self.pnl - self.penalty
        if abs(self.episode_return - expected) > 1e-9 * max(1.0, abs(self.pnl), self.penalty):
            raise ValueError(
                f"episode return {self.episode_return!r} != pnl - penalty {expected!r}"
            )
        return self


class DistributionStats(BaseModel):
    mean: float
    std: float
    skewness: float
    kurtosis: float
    jarque_bera: float
    jarque_bera_pvalue: float
    p10: float
    p20: float
    p80: float
    p90: float


class MetricsSummary(BaseModel):
    # Undefined ratios (zero denominator) are NaN and serialize as null.
    model_config = ConfigDict(ser_json_inf_nan="null")

    n_episodes: int
    mean_return: float
    pnl: DistributionStats
    inventory: DistributionStats
    abs_mean_terminal_inventory: float
    sharpe: float
    map: float
    pnl_to_map: float
    mean_trades: float


class EpisodeRequest(BaseModel):
    """Schema for a single-episode simulation request."""

    controller: Literal["sym", "lin"] = "sym"
    seed: int = Field(0, ge=0)
    theta0: float = Field(1.0, ge=0)
    theta1: float = Field(1.0, ge=0)


class BacktestRequest(BaseModel):
    """Schema for a small Monte Carlo backtest request."""

    controller: Literal["sym", "lin"] = "sym"
    episodes: int = Field(20, ge=2, le=200)
    seed_base: int = Field(0, ge=0)
    theta0: float = Field(1.0, ge=0)
    theta1: float = Field(1.0, ge=0)
