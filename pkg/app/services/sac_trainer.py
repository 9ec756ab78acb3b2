"""
Soft Actor-Critic on the market-making environment, in plain numpy.

One update, in order: temperature, twin critics, actor, polyak averaging of
the target critics. Updates are gated until the buffer holds a full batch and
learning_starts environment steps have been taken.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np
import pandas as pd

from app.exceptions import TrainingDivergedError
from app.schemas import NormStats, SACConfig
from app.services.backtest import run_monte_carlo
from app.services.mm_env import EnvFactory
from app.services.neural_policy import (
    ACTION_DIM,
    ACTOR_SIZES,
    CRITIC_SIZES,
    MLP,
    OBS_DIM,
    UNSTAMPED_HASH,
    NeuralController,
    PolicyCheckpoint,
    actor_forward,
    actor_loss_grad,
    critic_loss_grad,
    entropy_loss_grad,
    map_action,
    sample_squashed,
    save_checkpoint,
    squashed_log_prob,
)
from app.services.reporting import RunStamp

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["env_step", "mean_eval_return", "mean_eval_pnl", "q1_loss", "actor_loss", "alpha"]


class Batch(NamedTuple):
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, capacity: int, obs_dim: int = OBS_DIM, action_dim: int = ACTION_DIM):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.dones = np.zeros(capacity)
        self._pos = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, obs, action, reward: float, next_obs, done: bool) -> None:
        i = self._pos
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.dones[i] = float(done)
        self._pos = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def take(self, idx: np.ndarray) -> Batch:
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx])

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        if batch_size > self._size:
            raise ValueError(f"cannot sample {batch_size} from {self._size} transitions")
        return self.take(rng.choice(self._size, size=batch_size, replace=False))


class Adam:
    """Adam over a list of arrays updated in place."""

    def __init__(self, params: List[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: List[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def polyak_update(target: MLP, source: MLP, tau: float) -> None:
    """target <- tau * source + (1 - tau) * target, in place."""
    for t, s in zip(target.parameters(), source.parameters()):
        t *= 1.0 - tau
        t += tau * s


def _flat_pairs(grads) -> List[np.ndarray]:
    return [a for pair in grads for a in pair]


@dataclass
class UpdateLosses:
    q1: float
    q2: float
    actor: float
    alpha: float
    alpha_loss: float = 0.0

    def finite(self) -> bool:
        return all(math.isfinite(x) for x in (self.q1, self.q2, self.actor, self.alpha, self.alpha_loss))


class SACTrainer:
    def __init__(
        self, config: SACConfig, seed: int, norm_fingerprint: str = UNSTAMPED_HASH, stamp: Optional[RunStamp] = None
    ):
        self.config = config
        self.norm_fingerprint = norm_fingerprint
        self.stamp = stamp or RunStamp(UNSTAMPED_HASH, 0)
        init_seq, update_seq = np.random.SeedSequence(seed).spawn(2)
        init_rng = np.random.default_rng(init_seq)
        self.rng = np.random.default_rng(update_seq)

        self.actor = MLP.init(ACTOR_SIZES, init_rng)
        self.q1 = MLP.init(CRITIC_SIZES, init_rng)
        self.q2 = MLP.init(CRITIC_SIZES, init_rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()

        self.auto_entropy = config.ent_coef == "auto"
        initial = config.init_log_alpha if self.auto_entropy else math.log(config.ent_coef)
        self.log_alpha = np.array(initial, dtype=np.float64)

        def adam(params):
            return Adam(params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)

        self.actor_opt = adam(self.actor.parameters())
        self.q1_opt = adam(self.q1.parameters())
        self.q2_opt = adam(self.q2.parameters())
        self.alpha_opt = adam([self.log_alpha])

        self.buffer = ReplayBuffer(config.buffer_capacity)
        self.env_step_count = 0
        self.update_count = 0
        self.last_losses: Optional[UpdateLosses] = None

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    def can_update(self) -> bool:
        return len(self.buffer) >= self.config.batch_size and self.env_step_count >= self.config.learning_starts

    def act(self, obs: np.ndarray, deterministic: bool = False) -> np.ndarray:
        mean, log_std = actor_forward(self.actor, obs)
        return sample_squashed(self.rng, mean, log_std, deterministic).action

    def critic_target(self, batch: Batch, alpha: float) -> np.ndarray:
        """y = r + gamma (1 - done) (min target Q(s', a') - alpha log pi(a'|s'))."""
        next_mean, next_log_std = actor_forward(self.actor, batch.next_obs)
        nxt = sample_squashed(self.rng, next_mean, next_log_std)
        x = np.concatenate([batch.next_obs, nxt.action], axis=1)
        q_next = np.minimum(self.q1_target(x), self.q2_target(x))[:, 0]
        return batch.rewards + self.config.gamma * (1.0 - batch.dones) * (q_next - alpha * nxt.log_prob)

    def update(self, batch: Optional[Batch] = None) -> Optional[UpdateLosses]:
        cfg = self.config
        if batch is None:
            if not self.can_update():
                logger.warning(
                    "update skipped: buffer %d/%d, env steps %d/%d",
                    len(self.buffer), cfg.batch_size, self.env_step_count, cfg.learning_starts,
                )
                return None
            batch = self.buffer.sample(self.rng, cfg.batch_size)

        mean, log_std = actor_forward(self.actor, batch.obs)
        noise = self.rng.standard_normal(mean.shape)
        _, log_prob, _ = squashed_log_prob(mean, log_std, noise)
        alpha = self.alpha
        alpha_loss = 0.0
        if self.auto_entropy:
            alpha_loss, g_log_alpha = entropy_loss_grad(float(self.log_alpha), log_prob, cfg.target_entropy)
            self.alpha_opt.step([np.array(g_log_alpha)])

        target = self.critic_target(batch, alpha)
        q1_loss, g1 = critic_loss_grad(self.q1, batch.obs, batch.actions, target)
        q2_loss, g2 = critic_loss_grad(self.q2, batch.obs, batch.actions, target)
        self.q1_opt.step(_flat_pairs(g1))
        self.q2_opt.step(_flat_pairs(g2))

        actor_loss, g_actor, _ = actor_loss_grad(self.actor, self.q1, self.q2, batch.obs, noise, alpha)
        self.actor_opt.step(_flat_pairs(g_actor))

        self.update_count += 1
        if self.update_count % cfg.target_update_interval == 0:
            polyak_update(self.q1_target, self.q1, cfg.tau)
            polyak_update(self.q2_target, self.q2, cfg.tau)

        losses = UpdateLosses(q1_loss, q2_loss, actor_loss, self.alpha, alpha_loss)
        if not losses.finite():
            raise TrainingDivergedError(f"non-finite loss at update {self.update_count}: {losses}")
        self.last_losses = losses
        return losses

    def checkpoint(self) -> PolicyCheckpoint:
        nets = {
            "actor": self.actor.copy(),
            "q1": self.q1.copy(),
            "q2": self.q2.copy(),
            "q1_target": self.q1_target.copy(),
            "q2_target": self.q2_target.copy(),
        }
        return PolicyCheckpoint(nets, float(self.log_alpha), self.norm_fingerprint, self.stamp)


@dataclass
class TrainResult:
    final: PolicyCheckpoint
    best: PolicyCheckpoint
    best_eval_return: float
    curve: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=CURVE_COLUMNS))


def evaluate(
    factory: EnvFactory, actor: MLP, n_episodes: int, seed_base: int
) -> tuple:
    """Mean return and mean PnL of the deterministic policy."""
    controller = NeuralController(actor.copy(), factory.env.max_offset_ticks)
    records = run_monte_carlo(factory, controller, n_episodes, seed_base, workers=1)
    return (
        float(np.mean([r.episode_return for r in records])),
        float(np.mean([r.pnl for r in records])),
    )


def train(
    factory: EnvFactory,
    config: SACConfig,
    norm: NormStats,
    seed: int,
    checkpoint_dir: Optional[Path] = None,
    eval_seed_base: Optional[int] = None,
    stamp: Optional[RunStamp] = None,
) -> TrainResult:
    """Train from scratch; writes final/best checkpoints when checkpoint_dir is given.

    Every checkpoint carries `stamp` (config hash, master seed) in its header.
    """
    factory = factory.with_norm(norm)
    env = factory()
    max_offset = factory.env.max_offset_ticks
    trainer = SACTrainer(config, seed, norm.fingerprint(), stamp)
    episode_rng = np.random.default_rng([seed, 1])
    if eval_seed_base is None:
        eval_seed_base = int(np.random.default_rng([seed, 2]).integers(0, 2**31 - 1_000_000))

    best = trainer.checkpoint()
    best_return = -math.inf
    rows = []
    obs, _ = env.reset(seed=int(episode_rng.integers(0, 2**31 - 1)))
    try:
        for _ in range(config.total_steps):
            if trainer.env_step_count < config.learning_starts:
                action = trainer.rng.uniform(-1.0, 1.0, size=ACTION_DIM)
            else:
                action = trainer.act(obs)
            next_obs, reward, done, _, _ = env.step(map_action(action, max_offset))
            trainer.buffer.push(obs, action, reward, next_obs, done)
            trainer.env_step_count += 1
            obs = next_obs
            if done:
                obs, _ = env.reset(seed=int(episode_rng.integers(0, 2**31 - 1)))

            if trainer.env_step_count % config.train_freq == 0 and trainer.can_update():
                for _ in range(config.gradient_steps):
                    trainer.update()

            if trainer.env_step_count % config.eval_interval == 0:
                mean_return, mean_pnl = evaluate(factory, trainer.actor, config.eval_episodes, eval_seed_base)
                losses = trainer.last_losses
                rows.append(
                    {
                        "env_step": trainer.env_step_count,
                        "mean_eval_return": mean_return,
                        "mean_eval_pnl": mean_pnl,
                        "q1_loss": losses.q1 if losses else math.nan,
                        "actor_loss": losses.actor if losses else math.nan,
                        "alpha": trainer.alpha,
                    }
                )
                logger.info(
                    "step %d: eval return %.4f, pnl %.4f, alpha %.4g",
                    trainer.env_step_count, mean_return, mean_pnl, trainer.alpha,
                )
                if mean_return > best_return:
                    best_return = mean_return
                    best = trainer.checkpoint()
                    if checkpoint_dir is not None:
                        save_checkpoint(Path(checkpoint_dir) / "best.ckpt", best)
    except TrainingDivergedError:
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / "diverged.ckpt", trainer.checkpoint())
            logger.error("training diverged; diagnostic checkpoint written to %s", checkpoint_dir)
        raise

    final = trainer.checkpoint()
    if not rows:
        best = final
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / "final.ckpt", final)
        if not rows:
            save_checkpoint(Path(checkpoint_dir) / "best.ckpt", best)
    curve = pd.DataFrame(rows, columns=CURVE_COLUMNS)
    return TrainResult(final=final, best=best, best_eval_return=best_return, curve=curve)
