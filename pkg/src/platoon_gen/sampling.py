"""Scheduled-sampling decay schedules and per-rollout sample masks."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

FAMILIES = ("always_actual", "linear", "exponential", "inverse_sigmoid", "always_generated")


@dataclass(frozen=True)
class DecaySchedule:
    """Probability of feeding the actual state at training epoch ``k``.

    ``w`` is the decay rate and ``c`` the offset; which of them matter
    depends on ``family``.
    """

    family: str = "inverse_sigmoid"
    w: float = 0.25
    c: float = 25.0
    epoch_max: int = 100

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown schedule family {self.family!r}; choose from {FAMILIES}")
        if self.epoch_max < 1:
            raise ValueError("epoch_max must be >= 1")

    @classmethod
    def default(cls, family: str, epoch_max: int = 100) -> "DecaySchedule":
        """Standard parameters for each family at a given horizon."""
        params = {
            "always_actual": (0.0, 1.0),
            "linear": (-2.0 / epoch_max, 1.0),
            "exponential": (0.9, 0.0),
            "inverse_sigmoid": (0.25, epoch_max / 4),
            "always_generated": (0.0, 0.0),
        }[family]
        return cls(family, params[0], params[1], epoch_max)

    def decay(self, k: float) -> float:
        if self.family == "linear":
            return self.w * k + self.c
        if self.family == "exponential":
            return self.w ** k + self.c
        if self.family == "inverse_sigmoid":
            # 1 - 1/(1+e^{-w(k-c)}) written as a logistic in +w(k-c)
            return 1.0 / (1.0 + np.exp(self.w * (k - self.c)))
        if self.family == "always_actual":
            return 1.0
        return 0.0


def epsilon(schedule: DecaySchedule, k: int) -> float:
    if k < 0:
        raise ValueError("epoch index must be non-negative")
    if k > schedule.epoch_max:
        return 0.0
    return float(min(max(schedule.decay(k), 0.0), 1.0))


def rollout_seed(run_seed: int, epoch: int, platoon_id: str, vehicle_index: int) -> np.random.SeedSequence:
    """Seed keyed on the rollout identity, independent of iteration order."""
    return np.random.SeedSequence([int(run_seed), int(epoch),
                                   zlib.crc32(str(platoon_id).encode()), int(vehicle_index)])


def sample_mask(eps: float, length: int, rng_seed) -> np.ndarray:
    """Bernoulli(eps) mask of ``length`` bits; 1 selects the actual state."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    if length < 1:
        raise ValueError("length must be >= 1")
    if eps == 1.0:
        return np.ones(length, dtype=bool)
    if eps == 0.0:
        return np.zeros(length, dtype=bool)
    rng = np.random.default_rng(rng_seed)
    return rng.random(length) < eps
