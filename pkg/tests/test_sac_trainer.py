import numpy as np
import pytest

from app.exceptions import TrainingDivergedError
from app.schemas import EnvConfig, NormStats, SACConfig
from app.services.mm_env import EnvFactory
from app.services.neural_policy import CRITIC_SIZES, MLP, load_checkpoint
from app.services.reporting import RunStamp
from app.services.sac_trainer import (
    CURVE_COLUMNS,
    Adam,
    Batch,
    ReplayBuffer,
    SACTrainer,
    polyak_update,
    train,
)


@pytest.fixture
def sac_config():
    return SACConfig(batch_size=8, learning_starts=10, total_steps=40, eval_interval=20, eval_episodes=2)


@pytest.fixture
def short_factory(hawkes_params):
    return EnvFactory(EnvConfig(horizon=20.0), hawkes_params)


def fill_buffer(trainer, rng, n):
    for _ in range(n):
        trainer.buffer.push(rng.normal(size=3), rng.uniform(-1, 1, 2), rng.normal(), rng.normal(size=3), False)
        trainer.env_step_count += 1


def test_replay_buffer_is_fifo():
    buffer = ReplayBuffer(3)
    for i in range(5):
        buffer.push(np.full(3, i), np.zeros(2), float(i), np.zeros(3), False)
    assert len(buffer) == 3
    # the two oldest transitions were overwritten in place
    np.testing.assert_array_equal(buffer.rewards, [3.0, 4.0, 2.0])
    np.testing.assert_array_equal(buffer.obs[:, 0], [3.0, 4.0, 2.0])


def test_replay_buffer_sampling(rng):
    buffer = ReplayBuffer(10)
    for i in range(6):
        buffer.push(np.zeros(3), np.zeros(2), float(i), np.zeros(3), i == 5)
    batch = buffer.sample(rng, 6)
    assert sorted(batch.rewards) == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
    with pytest.raises(ValueError):
        buffer.sample(rng, 7)


def test_polyak_update():
    target, source = MLP.zeros(CRITIC_SIZES), MLP.zeros(CRITIC_SIZES)
    source.set_flat(np.ones_like(source.flat()))
    polyak_update(target, source, 0.005)
    np.testing.assert_allclose(target.flat(), 0.005)
    np.testing.assert_array_equal(source.flat(), 1.0)


def test_adam_first_step_moves_by_learning_rate():
    p = np.array([1.0, -2.0, 0.5])
    Adam([p], lr=0.01).step([np.array([3.0, -0.1, 0.0])])
    np.testing.assert_allclose(p, [0.99, -1.99, 0.5], atol=1e-6)


def test_update_is_gated(sac_config, rng):
    trainer = SACTrainer(sac_config, seed=0)
    assert trainer.update() is None
    fill_buffer(trainer, rng, 8)
    assert not trainer.can_update()
    assert trainer.update() is None
    fill_buffer(trainer, rng, 2)
    assert trainer.can_update()
    losses = trainer.update()
    assert losses.finite()
    assert trainer.update_count == 1


def test_terminal_target_is_reward(sac_config):
    trainer = SACTrainer(sac_config, seed=1)
    rewards = np.array([0.5, -1.0, 2.0])
    batch = Batch(np.zeros((3, 3)), np.zeros((3, 2)), rewards, np.ones((3, 3)), np.ones(3))
    np.testing.assert_array_equal(trainer.critic_target(batch, trainer.alpha), rewards)


def test_alpha_stays_positive(sac_config, rng):
    trainer = SACTrainer(sac_config, seed=2)
    fill_buffer(trainer, rng, 20)
    for _ in range(25):
        trainer.update()
        assert trainer.alpha > 0
    assert trainer.alpha != 1.0


def test_fixed_entropy_coefficient(rng):
    trainer = SACTrainer(SACConfig(batch_size=4, learning_starts=0, ent_coef=0.1), seed=3)
    fill_buffer(trainer, rng, 6)
    trainer.update()
    assert trainer.alpha == pytest.approx(0.1)


def test_target_critics_trail_online(sac_config, rng):
    trainer = SACTrainer(sac_config, seed=4)
    fill_buffer(trainer, rng, 12)
    before = trainer.q1_target.flat()
    trainer.update()
    online = trainer.q1.flat()
    expected = 0.995 * before + 0.005 * online
    np.testing.assert_allclose(trainer.q1_target.flat(), expected, rtol=1e-12)


def test_updates_are_deterministic(sac_config):
    def run():
        trainer = SACTrainer(sac_config, seed=5)
        fill_buffer(trainer, np.random.default_rng(9), 16)
        for _ in range(5):
            trainer.update()
        return trainer.actor.flat(), trainer.q2.flat(), trainer.alpha

    first, second = run(), run()
    np.testing.assert_array_equal(first[0], second[0])
    np.testing.assert_array_equal(first[1], second[1])
    assert first[2] == second[2]


def test_non_finite_loss_raises(sac_config):
    trainer = SACTrainer(sac_config, seed=6)
    batch = Batch(np.zeros((4, 3)), np.zeros((4, 2)), np.full(4, np.nan), np.zeros((4, 3)), np.zeros(4))
    with pytest.raises(TrainingDivergedError):
        trainer.update(batch)


def test_zero_steps_returns_initial_policy(short_factory, sac_config, tmp_path):
    config = sac_config.model_copy(update={"total_steps": 0})
    stamp = RunStamp("cd" * 32, 3)
    result = train(short_factory, config, NormStats.identity(), seed=7, checkpoint_dir=tmp_path, stamp=stamp)
    initial = SACTrainer(config, seed=7).actor
    np.testing.assert_array_equal(result.final.actor.flat(), initial.flat())
    assert result.best is result.final
    assert result.curve.empty
    for name in ("final.ckpt", "best.ckpt"):
        assert load_checkpoint(tmp_path / name).stamp.as_dict() == stamp.as_dict()


def test_short_training_run(short_factory, sac_config, tmp_path):
    norm = NormStats(mean_spread=2.0, std_spread=1.0, mean_trend=0.0, std_trend=0.5)
    result = train(short_factory, sac_config, norm, seed=8, checkpoint_dir=tmp_path / "a")
    assert list(result.curve.columns) == CURVE_COLUMNS
    assert list(result.curve["env_step"]) == [20, 40]
    assert result.best_eval_return == result.curve["mean_eval_return"].max()
    assert load_checkpoint(tmp_path / "a" / "best.ckpt").norm_fingerprint == norm.fingerprint()

    train(short_factory, sac_config, norm, seed=8, checkpoint_dir=tmp_path / "b")
    for name in ("best.ckpt", "final.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_replay_sampling_is_uniform():
    buffer = ReplayBuffer(10)
    for i in range(10):
        buffer.push(np.zeros(3), np.zeros(2), float(i), np.zeros(3), False)
    rng = np.random.default_rng(0)
    counts = np.zeros(10)
    n_draws = 5000
    for _ in range(n_draws):
        counts[buffer.sample(rng, 4).rewards.astype(int)] += 1
    expected = n_draws * 4 / 10
    sd = np.sqrt(n_draws * 0.4 * 0.6)
    assert np.all(np.abs(counts - expected) < 4 * sd)
