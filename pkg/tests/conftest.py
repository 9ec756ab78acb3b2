from pathlib import Path

import numpy as np
import pytest
import yaml

from app.schemas import EnvConfig, HawkesParams
from app.services.mm_env import EnvFactory

DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "config" / "default.yaml"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical checks")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def hawkes_params():
    return HawkesParams()


@pytest.fixture
def quiet_hawkes():
    """No baseline activity: only agent events can excite the process."""
    return HawkesParams(mu=[0.0] * 8)


@pytest.fixture
def env_config():
    return EnvConfig()


@pytest.fixture
def factory(env_config, hawkes_params):
    return EnvFactory(env_config, hawkes_params)


@pytest.fixture
def quiet_factory(env_config, quiet_hawkes):
    return EnvFactory(env_config, quiet_hawkes)


@pytest.fixture
def raw_config():
    return yaml.safe_load(DEFAULT_CONFIG.read_text())


@pytest.fixture
def config_file(tmp_path, raw_config):
    """Default config shrunk for fast runs, with every path under tmp_path."""
    raw_config["paths"] = {
        "norm_stats": str(tmp_path / "norm_stats.json"),
        "checkpoints": str(tmp_path / "checkpoints"),
        "outputs": str(tmp_path / "out"),
    }
    raw_config["env"]["horizon"] = 10.0
    raw_config["lin_grid"].update({"theta0": [0.0, 1.0], "theta1": [0.0, 1.0], "n_episodes": 3})
    raw_config["backtest"].update(
        {"n_episodes": 4, "noise_variances": [0.0, 0.1], "maker_fees": [0.0, 0.002], "calibration_steps": 200}
    )
    raw_config["sac"].update(
        {"batch_size": 8, "learning_starts": 10, "total_steps": 40, "eval_interval": 20, "eval_episodes": 2}
    )
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(raw_config))
    return path
