"""
Numpy MLPs for the SAC actor and critics, with hand-written backpropagation.

Actor:  obs(3) -> 64 -> 64 -> [mean(2), log_std(2)], squashed-Gaussian head
Critic: obs(3) + action(2) -> 64 -> 64 -> Q

Weights are stored (fan_in, fan_out) so a batch forward pass is x @ W + b.
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from app.exceptions import CalibrationError, CheckpointFormatError
from app.schemas import NormStats
from app.services.lob import quantize_ticks
from app.services.reporting import RunStamp
from app.services.strategies import Controller

logger = logging.getLogger(__name__)

OBS_DIM = 3
ACTION_DIM = 2
HIDDEN = (64, 64)
ACTOR_SIZES = (OBS_DIM, *HIDDEN, 2 * ACTION_DIM)
CRITIC_SIZES = (OBS_DIM + ACTION_DIM, *HIDDEN, 1)
LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
SQUASH_EPS = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)

Grads = List[Tuple[np.ndarray, np.ndarray]]


class ForwardCache(NamedTuple):
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]


class MLP:
    """Fully connected ReLU network with a linear output layer."""

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix")
        for w, b in zip(weights, biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"inconsistent layer shapes {w.shape} / {b.shape}")
        for w_in, w_out in zip(weights[1:], weights[:-1]):
            if w_in.shape[0] != w_out.shape[1]:
                raise ValueError("consecutive layers do not chain")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator) -> "MLP":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, sizes: Sequence[int]) -> "MLP":
        return cls(
            [np.zeros((i, o)) for i, o in zip(sizes[:-1], sizes[1:])],
            [np.zeros(o) for o in sizes[1:]],
        )

    @property
    def sizes(self) -> Tuple[int, ...]:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    def parameters(self) -> List[np.ndarray]:
        """Arrays in declared order (W0, b0, W1, b1, ...); views, not copies."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, values: np.ndarray) -> None:
        offset = 0
        for p in self.parameters():
            p[...] = values[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != values.size:
            raise ValueError(f"expected {offset} values, got {values.size}")

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if h.shape[1] != self.sizes[0]:
            raise ValueError(f"input width {h.shape[1]} != {self.sizes[0]}")
        inputs, pre = [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0) if i < last else z
        return h, ForwardCache(inputs, pre)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache, grad_out: np.ndarray) -> Tuple[Grads, np.ndarray]:
        """Gradients of sum(grad_out * output) w.r.t. every layer and the input."""
        g = np.asarray(grad_out, dtype=np.float64)
        last = len(self.weights) - 1
        grads: Grads = [None] * len(self.weights)
        for i in range(last, -1, -1):
            if i < last:
                g = g * (cache.pre_activations[i] > 0)
            grads[i] = (cache.inputs[i].T @ g, g.sum(axis=0))
            g = g @ self.weights[i].T
        return grads, g


def flatten_grads(grads: Grads) -> np.ndarray:
    return np.concatenate([a.ravel() for pair in grads for a in pair])


# ---------------------------------------------------------------- actor head


def actor_forward(actor: MLP, obs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(mean, clamped log_std); a single observation gives 1-D outputs."""
    out = actor(obs)
    mean, log_std = out[:, :ACTION_DIM], np.clip(out[:, ACTION_DIM:], LOG_STD_MIN, LOG_STD_MAX)
    if np.ndim(obs) == 1:
        return mean[0], log_std[0]
    return mean, log_std


class SquashedSample(NamedTuple):
    action: np.ndarray
    log_prob: np.ndarray
    pre_tanh: np.ndarray
    noise: np.ndarray


def squashed_log_prob(mean, log_std, noise) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Action, log-density and pre-tanh value for u = mean + exp(log_std) * noise."""
    u = mean + np.exp(log_std) * noise
    a = np.tanh(u)
    gauss = -0.5 * noise**2 - log_std - 0.5 * _LOG_2PI
    log_prob = np.sum(gauss - np.log(1.0 - a**2 + SQUASH_EPS), axis=-1)
    return a, log_prob, u


def sample_squashed(
    rng: Optional[np.random.Generator],
    mean: np.ndarray,
    log_std: np.ndarray,
    deterministic: bool = False,
) -> SquashedSample:
    mean = np.asarray(mean, dtype=np.float64)
    noise = np.zeros_like(mean) if deterministic else rng.standard_normal(mean.shape)
    a, log_prob, u = squashed_log_prob(mean, np.asarray(log_std, dtype=np.float64), noise)
    return SquashedSample(a, log_prob, u, noise)


def map_action(a: np.ndarray, max_offset: int) -> np.ndarray:
    """(-1, 1)^2 -> integer tick offsets in [-max_offset, max_offset]."""
    offsets = quantize_ticks(np.asarray(a, dtype=np.float64) * max_offset)
    return np.clip(offsets, -max_offset, max_offset).astype(np.int64)


# -------------------------------------------------------------------- losses


def critic_loss_grad(
    q: MLP, obs: np.ndarray, actions: np.ndarray, target: np.ndarray
) -> Tuple[float, Grads]:
    """Mean squared error against a fixed target."""
    x = np.concatenate([obs, actions], axis=1)
    out, cache = q.forward(x)
    err = out[:, 0] - target
    n = len(target)
    grads, _ = q.backward(cache, (2.0 * err / n)[:, None])
    return float(np.mean(err**2)), grads


def _min_q_and_action_grad(q1: MLP, q2: MLP, obs: np.ndarray, actions: np.ndarray):
    x = np.concatenate([obs, actions], axis=1)
    out1, cache1 = q1.forward(x)
    out2, cache2 = q2.forward(x)
    ones = np.ones_like(out1)
    _, dx1 = q1.backward(cache1, ones)
    _, dx2 = q2.backward(cache2, ones)
    use_first = out1[:, 0] <= out2[:, 0]
    q_min = np.where(use_first, out1[:, 0], out2[:, 0])
    da = np.where(use_first[:, None], dx1, dx2)[:, OBS_DIM:]
    return q_min, da


def actor_loss_grad(
    actor: MLP,
    q1: MLP,
    q2: MLP,
    obs: np.ndarray,
    noise: np.ndarray,
    alpha: float,
) -> Tuple[float, Grads, np.ndarray]:
    """mean(alpha * log_pi(a|s) - min(Q1, Q2)(s, a)) with reparameterized a.

    Critics and alpha are held fixed. Returns the loss, actor gradients and
    the sampled log-probabilities (used by the temperature update).
    """
    out, cache = actor.forward(obs)
    mean = out[:, :ACTION_DIM]
    raw_log_std = out[:, ACTION_DIM:]
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    a, log_prob, _ = squashed_log_prob(mean, log_std, noise)
    q_min, dq_da = _min_q_and_action_grad(q1, q2, obs, a)

    n = obs.shape[0]
    one_minus_a2 = 1.0 - a**2
    g_u = (alpha / n) * 2.0 * a * one_minus_a2 / (one_minus_a2 + SQUASH_EPS)
    g_u = g_u - (1.0 / n) * dq_da * one_minus_a2
    g_mean = g_u
    g_log_std = g_u * std * noise - alpha / n
    g_log_std = g_log_std * ((raw_log_std >= LOG_STD_MIN) & (raw_log_std <= LOG_STD_MAX))

    grads, _ = actor.backward(cache, np.concatenate([g_mean, g_log_std], axis=1))
    loss = float(np.mean(alpha * log_prob - q_min))
    return loss, grads, log_prob


def entropy_loss_grad(log_alpha: float, log_prob: np.ndarray, target_entropy: float) -> Tuple[float, float]:
    """-mean(log_alpha * (log_pi + target_entropy)), log_pi held fixed."""
    shifted = np.asarray(log_prob) + target_entropy
    return float(-np.mean(log_alpha * shifted)), float(-np.mean(shifted))


def grad_loss(loss_spec: str, **batch):
    """Dispatch to one of the analytic loss/gradient routines by name."""
    handlers = {
        "critic": critic_loss_grad,
        "actor": actor_loss_grad,
        "entropy": entropy_loss_grad,
    }
    if loss_spec not in handlers:
        raise ValueError(f"unknown loss {loss_spec!r}; expected one of {sorted(handlers)}")
    return handlers[loss_spec](**batch)


# ---------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"MMSACCKP"
CHECKPOINT_VERSION = 2
NET_ORDER = ("actor", "q1", "q2", "q1_target", "q2_target")
# magic, version, norm fingerprint, config hash, master seed, net count, log alpha
_HEADER = struct.Struct("<8sI64s64sQId")
UNSTAMPED_HASH = "0" * 64


@dataclass
class PolicyCheckpoint:
    nets: Dict[str, MLP]
    log_alpha: float = 0.0
    norm_fingerprint: str = field(default=UNSTAMPED_HASH)
    stamp: RunStamp = field(default_factory=lambda: RunStamp(UNSTAMPED_HASH, 0))

    @property
    def actor(self) -> MLP:
        return self.nets["actor"]


def save_checkpoint(path: Path, checkpoint: PolicyCheckpoint) -> None:
    """Header, architecture descriptor, then every parameter as little-endian f8."""
    names = [n for n in NET_ORDER if n in checkpoint.nets]
    fingerprint = checkpoint.norm_fingerprint.encode("ascii")
    config_hash = checkpoint.stamp.config_hash.encode("ascii")
    if len(fingerprint) != 64 or len(config_hash) != 64:
        raise CheckpointFormatError("normalization fingerprint and config hash must be 64 hex characters")
    header = _HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, fingerprint, config_hash,
        checkpoint.stamp.master_seed, len(names), checkpoint.log_alpha,
    )
    chunks = [header]
    for name in names:
        sizes = checkpoint.nets[name].sizes
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes))
    for name in names:
        chunks.append(checkpoint.nets[name].flat().astype("<f8").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path: Path) -> PolicyCheckpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointFormatError(f"checkpoint {path} not found")
    data = path.read_bytes()
    try:
        magic, version, raw_fingerprint, raw_hash, master_seed, n_nets, log_alpha = _HEADER.unpack_from(data, 0)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        fingerprint = raw_fingerprint.decode("ascii")
        stamp = RunStamp(raw_hash.decode("ascii"), int(master_seed))
        offset = _HEADER.size
        layout = []
        for _ in range(n_nets):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode()
            offset += name_len
            (n_sizes,) = struct.unpack_from("<I", data, offset)
            offset += 4
            sizes = struct.unpack_from(f"<{n_sizes}I", data, offset)
            offset += 4 * n_sizes
            layout.append((name, sizes))
        nets = {}
        for name, sizes in layout:
            net = MLP.zeros(sizes)
            count = net.flat().size
            end = offset + 8 * count
            if end > len(data):
                raise CheckpointFormatError(f"{path}: truncated parameters for {name}")
            net.set_flat(np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64))
            offset = end
            nets[name] = net
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"{path}: malformed checkpoint ({exc})") from exc
    if offset != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - offset} trailing bytes")
    if "actor" not in nets:
        raise CheckpointFormatError(f"{path}: no actor network")
    return PolicyCheckpoint(nets, float(log_alpha), fingerprint, stamp)


class NeuralController(Controller):
    """Deterministic (tanh of the mean) or sampling actor policy."""

    def __init__(
        self,
        actor: MLP,
        max_offset: int,
        deterministic: bool = True,
        rng: Optional[np.random.Generator] = None,
    ):
        if not deterministic and rng is None:
            raise ValueError("a stochastic controller needs an rng")
        self.actor = actor
        self.max_offset = max_offset
        self.deterministic = deterministic
        self.rng = rng

    @classmethod
    def from_checkpoint(cls, path: Path, norm: NormStats, max_offset: int) -> "NeuralController":
        checkpoint = load_checkpoint(path)
        if checkpoint.norm_fingerprint != norm.fingerprint():
            raise CalibrationError(
                f"{path} was trained with different normalization statistics; "
                "recalibrate or point paths.norm_stats at the training file"
            )
        return cls(checkpoint.actor, max_offset)

    def act(self, obs: np.ndarray) -> np.ndarray:
        mean, log_std = actor_forward(self.actor, np.asarray(obs, dtype=np.float64))
        sample = sample_squashed(self.rng, mean, log_std, self.deterministic)
        return map_action(sample.action, self.max_offset)
