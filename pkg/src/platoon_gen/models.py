"""Car-following decision blocks.

A model maps (follower state, leader state, memory) to the follower's next
acceleration and an updated memory. Memory is passed in and out explicitly
so one model instance can drive any number of vehicles.
"""

from __future__ import annotations

import abc
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from .core import ObservationFeatures, VehicleState, features, integrate_step

EMERGENCY_DECEL = 8.0  # m/s^2, floor on the IDM output


class CarFollowingModel(abc.ABC):
    """Uniform interface over parametric and learned car-following laws."""

    @abc.abstractmethod
    def initial_memory(self, batch_shape: tuple[int, ...] = ()) -> Any:
        """Zero memory for a vehicle (or a batch of vehicles)."""

    @abc.abstractmethod
    def decide(self, obs: ObservationFeatures, memory: Any) -> tuple[Any, Any]:
        """Return ``(acceleration, new_memory)`` for one decision step."""


@dataclass(frozen=True)
class IdmParams:
    a_max: float = 1.4
    b: float = 2.0
    v0: float = 30.0
    g_jam: float = 2.0
    t_headway: float = 1.5
    delta: float = 4.0

    def __post_init__(self):
        for name, val in asdict(self).items():
            if not val > 0:
                raise ValueError(f"IDM parameter {name} must be positive, got {val}")

    def scaled(self, factors: dict[str, float]) -> "IdmParams":
        vals = asdict(self)
        for name, f in factors.items():
            vals[name] *= f
        return IdmParams(**vals)


def idm_acceleration(obs: ObservationFeatures, p: IdmParams):
    """Intelligent Driver Model acceleration, clamped to [-8, a_max].

    ``obs.dv`` is leader minus follower speed, so the closing speed that
    enters the dynamic gap term is ``-obs.dv``.
    """
    v = obs.v_f
    s_star = p.g_jam + v * p.t_headway + v * (-obs.dv) / (2.0 * np.sqrt(p.a_max * p.b))
    acc = p.a_max * (1.0 - (v / p.v0) ** p.delta - (s_star / obs.dx) ** 2)
    acc = np.clip(acc, -EMERGENCY_DECEL, p.a_max)
    return float(acc) if np.ndim(acc) == 0 else acc


def equilibrium_gap(v: float, p: IdmParams) -> float:
    """Gap at which a follower cruising at ``v`` behind an equal-speed leader has zero acceleration."""
    if not 0 <= v < p.v0:
        raise ValueError("equilibrium speed must lie in [0, v0)")
    return (p.g_jam + v * p.t_headway) / np.sqrt(1.0 - (v / p.v0) ** p.delta)


class IdmModel(CarFollowingModel):
    """Memoryless IDM decision block."""

    def __init__(self, params: IdmParams | None = None):
        self.params = params or IdmParams()

    def initial_memory(self, batch_shape=()):
        return None

    def decide(self, obs, memory):
        return idm_acceleration(obs, self.params), None

    def __repr__(self):
        return f"IdmModel({self.params})"


def step_block(model: CarFollowingModel, s_f: VehicleState, s_l: VehicleState, memory, dt: float):
    """One full decision block: decide, integrate, and hand back the new memory."""
    acc, memory = model.decide(features(s_f, s_l), memory)
    return integrate_step(s_f, acc, dt), memory
