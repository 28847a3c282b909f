"""Vehicle states, trajectories, platoons and the shared kinematic update.

All functions accept either Python floats or numpy arrays for the state
fields, so the same update drives a single vehicle or a batch of platoons.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

DX_MIN = 0.1  # m, lower bound on the observed gap fed to any model


class NumericError(ArithmeticError):
    """Raised when a non-finite value shows up in a kinematic quantity."""


@dataclass(frozen=True)
class VehicleState:
    x: float
    v: float
    a: float = 0.0


@dataclass(frozen=True)
class ObservationFeatures:
    """Inputs of one car-following decision: own speed, speed difference, gap."""

    v_f: float
    dv: float
    dx: float

    def as_array(self) -> np.ndarray:
        """Stack into shape (..., 3) in the order (v_f, dv, dx)."""
        return np.stack(np.broadcast_arrays(self.v_f, self.dv, self.dx), axis=-1).astype(float)


def _check_finite(*values) -> None:
    for val in values:
        if not np.all(np.isfinite(val)):
            raise NumericError("non-finite kinematic value; upstream computation diverged")


def integrate_step(s_f: VehicleState, a_next, dt: float) -> VehicleState:
    """Advance one decision interval with constant acceleration.

    v' = max(0, v + a dt) and x' = x + v' dt. A vehicle whose speed is
    clamped to zero holds its position.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    _check_finite(s_f.x, s_f.v, a_next)
    v_new = np.maximum(0.0, s_f.v + a_next * dt)
    x_new = s_f.x + v_new * dt
    if np.ndim(v_new) == 0:
        v_new, x_new, a_next = float(v_new), float(x_new), float(a_next)
    return VehicleState(x_new, v_new, a_next)


def features(s_f: VehicleState, s_l: VehicleState, dx_min: float = DX_MIN) -> ObservationFeatures:
    dv = s_l.v - s_f.v
    dx = np.maximum(s_l.x - s_f.x, dx_min)
    if np.ndim(dx) == 0:
        return ObservationFeatures(float(s_f.v), float(dv), float(dx))
    return ObservationFeatures(s_f.v, dv, dx)


@dataclass
class Trajectory:
    """Time series of one vehicle at a fixed decision interval.

    States are stored column-wise as arrays; ``states`` and ``state(k)``
    give the per-step :class:`VehicleState` view.
    """

    vehicle_id: str
    t0: float
    dt: float
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not (self.x.ndim == 1 and self.x.shape == self.v.shape == self.a.shape):
            raise ValueError("x, v and a must be 1-D arrays of equal length")
        if len(self.x) == 0:
            raise ValueError("trajectory has no states")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    def state(self, k: int) -> VehicleState:
        return VehicleState(float(self.x[k]), float(self.v[k]), float(self.a[k]))

    @property
    def states(self) -> list[VehicleState]:
        return [self.state(k) for k in range(len(self))]

    @classmethod
    def from_states(cls, vehicle_id: str, t0: float, dt: float,
                    states: Sequence[VehicleState]) -> "Trajectory":
        return cls(vehicle_id, t0, dt,
                   [s.x for s in states], [s.v for s in states], [s.a for s in states])


@dataclass
class Platoon:
    """Ordered vehicles sharing one studied period; index 0 is the first leader."""

    platoon_id: str
    trajectories: list[Trajectory]
    lane: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.trajectories) < 2:
            raise ValueError("a platoon needs at least 2 vehicles")
        first = self.trajectories[0]
        for tr in self.trajectories[1:]:
            if len(tr) != len(first) or tr.dt != first.dt or tr.t0 != first.t0:
                raise ValueError(f"platoon {self.platoon_id}: trajectories must share t0, dt and length")
        x0 = np.array([tr.x[0] for tr in self.trajectories])
        if np.any(np.diff(x0) >= 0):
            raise ValueError(f"platoon {self.platoon_id}: vehicles must be ordered front to back")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    @property
    def dt(self) -> float:
        return self.trajectories[0].dt

    @property
    def t0(self) -> float:
        return self.trajectories[0].t0

    @property
    def n_steps(self) -> int:
        return len(self.trajectories[0])

    def array(self, name: str) -> np.ndarray:
        """Stack one field (``x``, ``v`` or ``a``) into shape (I, T)."""
        return np.stack([getattr(tr, name) for tr in self.trajectories])

    @property
    def positions(self) -> np.ndarray:
        return self.array("x")


def stack_platoons(platoons: Sequence[Platoon]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack platoons of equal shape into (N, I, T) arrays of x, v, a."""
    shapes = {(len(p), p.n_steps) for p in platoons}
    if len(shapes) != 1:
        raise ValueError(f"platoons differ in shape: {sorted(shapes)}")
    return tuple(np.stack([p.array(k) for p in platoons]) for k in "xva")


def platoon_from_arrays(platoon_id: str, t0: float, dt: float, x, v, a,
                        vehicle_ids: Sequence[str] | None = None, lane: int | None = None,
                        meta: dict | None = None) -> Platoon:
    x, v, a = (np.asarray(arr, dtype=float) for arr in (x, v, a))
    ids = vehicle_ids or [str(i + 1) for i in range(x.shape[0])]
    trajs = [Trajectory(str(ids[i]), t0, dt, x[i], v[i], a[i]) for i in range(x.shape[0])]
    return Platoon(platoon_id, trajs, lane=lane, meta=dict(meta or {}))
