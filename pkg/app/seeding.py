"""Purpose-scoped random streams derived from one master seed."""

import zlib
from dataclasses import dataclass

import numpy as np

PURPOSES = ("calibration", "training", "evaluation", "validation", "noise", "init")


@dataclass(frozen=True)
class SeedPolicy:
    master_seed: int

    @staticmethod
    def _code(purpose: str) -> int:
        if purpose not in PURPOSES:
            raise ValueError(f"unknown seed purpose {purpose!r}; expected one of {PURPOSES}")
        return zlib.crc32(purpose.encode())

    def sequence(self, purpose: str, *keys: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.master_seed, spawn_key=(self._code(purpose), *keys))

    def stream(self, purpose: str, *keys: int) -> np.random.Generator:
        return np.random.default_rng(self.sequence(purpose, *keys))

    def seed(self, purpose: str, *keys: int) -> int:
        """A plain integer seed, for APIs (env.reset, seed_base) that take one."""
        return int(self.sequence(purpose, *keys).generate_state(1, dtype=np.uint32)[0])

    def seed_base(self, purpose: str) -> int:
        # Leaves room for 10^6 consecutive episode seeds below 2**32.
        return self.seed(purpose) % (2**32 - 1_000_000)
