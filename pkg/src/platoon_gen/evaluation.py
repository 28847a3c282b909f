"""Platoon trajectory generation and position-error metrics.

Generation rolls each follower forward from its initial state using only
the first leader's actual trajectory: follower ``i`` reacts to the
*generated* trajectory of follower ``i - 1``. Metrics follow the literal
index conventions: time and vehicle sums start at the second element but
are normalised by the full counts ``T`` and ``I``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Platoon, Trajectory, VehicleState, features, integrate_step, platoon_from_arrays, stack_platoons
from .models import CarFollowingModel


@dataclass
class GenerationTask:
    leader: Trajectory
    follower_init: Sequence[tuple[float, float]]  # (position, velocity) per follower, front to back
    model: CarFollowingModel
    dt: float | None = None

    def __post_init__(self):
        if len(self.leader) < 2:
            raise ValueError("leader trajectory needs at least 2 states")
        x0 = [self.leader.x[0]] + [p for p, _ in self.follower_init]
        if np.any(np.diff(x0) >= 0):
            raise ValueError("initial positions must strictly decrease from the leader backwards")
        if self.dt is not None and self.dt != self.leader.dt:
            raise ValueError("task dt differs from the leader trajectory's dt")


def generate_batch(model: CarFollowingModel, leader_x, leader_v, leader_a, init_x, init_v, dt: float):
    """Vectorised rollout over a batch of platoons.

    ``leader_*`` have shape (B, T); ``init_x``/``init_v`` have shape
    (B, I - 1). Returns x, v, a arrays of shape (B, I, T) whose row 0 is
    the leader. Followers start with zero acceleration.
    """
    leader_x, leader_v, leader_a = (np.atleast_2d(np.asarray(a, float)) for a in (leader_x, leader_v, leader_a))
    init_x, init_v = np.atleast_2d(np.asarray(init_x, float)), np.atleast_2d(np.asarray(init_v, float))
    n_batch, n_steps = leader_x.shape
    n_veh = init_x.shape[1] + 1
    X = np.zeros((n_batch, n_veh, n_steps))
    V = np.zeros_like(X)
    A = np.zeros_like(X)
    X[:, 0], V[:, 0], A[:, 0] = leader_x, leader_v, leader_a
    for i in range(1, n_veh):
        X[:, i, 0], V[:, i, 0] = init_x[:, i - 1], init_v[:, i - 1]
        mem = model.initial_memory((n_batch,))
        for t in range(n_steps - 1):
            s_f = VehicleState(X[:, i, t], V[:, i, t], A[:, i, t])
            s_l = VehicleState(X[:, i - 1, t], V[:, i - 1, t], A[:, i - 1, t])
            acc, mem = model.decide(features(s_f, s_l), mem)
            nxt = integrate_step(s_f, np.broadcast_to(acc, (n_batch,)), dt)
            X[:, i, t + 1], V[:, i, t + 1], A[:, i, t + 1] = nxt.x, nxt.v, nxt.a
    return X, V, A


def generate_platoon(task: GenerationTask) -> Platoon:
    lead = task.leader
    init = np.asarray(task.follower_init, dtype=float).reshape(-1, 2)
    X, V, A = generate_batch(task.model, lead.x, lead.v, lead.a, init[:, 0][None], init[:, 1][None], lead.dt)
    ids = [lead.vehicle_id] + [str(i + 2) for i in range(init.shape[0])]
    return platoon_from_arrays("generated", lead.t0, lead.dt, X[0], V[0], A[0], ids)


def generate_platoons(model: CarFollowingModel, platoons: Sequence[Platoon]) -> list[Platoon]:
    """Regenerate every follower of each platoon from its actual initial state."""
    if not platoons:
        return []
    X, V, A = stack_platoons(platoons)
    GX, GV, GA = generate_batch(model, X[:, 0], V[:, 0], A[:, 0], X[:, 1:, 0], V[:, 1:, 0], platoons[0].dt)
    out = []
    for n, p in enumerate(platoons):
        ids = [tr.vehicle_id for tr in p.trajectories]
        out.append(platoon_from_arrays(p.platoon_id, p.t0, p.dt, GX[n], GV[n], GA[n], ids, lane=p.lane))
    return out


# -- metrics -----------------------------------------------------------------

def _positions(platoons) -> np.ndarray:
    if isinstance(platoons, np.ndarray):
        arr = platoons
    elif isinstance(platoons, Platoon):
        arr = platoons.positions
    else:
        arr = np.stack([p.positions if isinstance(p, Platoon) else np.asarray(p, float) for p in platoons])
    arr = np.asarray(arr, dtype=float)
    return arr[None] if arr.ndim == 2 else arr


def _abs_errors(actual, generated) -> np.ndarray:
    """|x - x_hat| over followers i >= 2 and steps t >= 2, shape (N, I-1, T-1)."""
    xa, xg = _positions(actual), _positions(generated)
    if xa.shape != xg.shape:
        raise ValueError(f"shape mismatch: actual {xa.shape} vs generated {xg.shape}")
    return np.abs(xa[:, 1:, 1:] - xg[:, 1:, 1:])


def mae(actual, generated) -> float:
    err = _abs_errors(actual, generated)
    n, i_minus, t_minus = err.shape
    return float(np.sum(err) / (n * (t_minus + 1) * (i_minus + 1)))


def mmaae(actual, generated) -> float:
    return float(np.mean(_abs_errors(actual, generated).max(axis=(1, 2))))


class EmpiricalCdf:
    """Right-continuous step CDF over a finite sample."""

    def __init__(self, samples):
        self.samples = np.sort(np.asarray(samples, dtype=float).ravel())

    def __call__(self, x):
        out = np.searchsorted(self.samples, x, side="right") / len(self.samples)
        return float(out) if np.ndim(out) == 0 else out

    def __len__(self):
        return len(self.samples)


def ae_distribution(actual, generated) -> EmpiricalCdf:
    return EmpiricalCdf(_abs_errors(actual, generated))


def pmaae_distribution(actual, generated) -> EmpiricalCdf:
    return EmpiricalCdf(_abs_errors(actual, generated).max(axis=(1, 2)))


def error_grid(actual, generated) -> np.ndarray:
    """(vehicle, time) matrix of absolute error for followers 2..I of one platoon."""
    xa, xg = _positions(actual), _positions(generated)
    if xa.shape != xg.shape or xa.shape[0] != 1:
        raise ValueError("error_grid expects one actual and one generated platoon of equal shape")
    return np.abs(xa[0, 1:] - xg[0, 1:])


@dataclass
class MetricsReport:
    mae: float
    mmaae: float
    ae_samples: np.ndarray
    pmaae_samples: np.ndarray
    error_grids: list[np.ndarray]
    platoon_ids: list[str]

    @classmethod
    def compute(cls, actual: Sequence[Platoon], generated: Sequence[Platoon]) -> "MetricsReport":
        return cls(
            mae=mae(actual, generated),
            mmaae=mmaae(actual, generated),
            ae_samples=ae_distribution(actual, generated).samples,
            pmaae_samples=pmaae_distribution(actual, generated).samples,
            error_grids=[error_grid(a, g) for a, g in zip(actual, generated)],
            platoon_ids=[p.platoon_id for p in actual],
        )

    def summary(self) -> dict:
        return {"mae": self.mae, "mmaae": self.mmaae, "n_platoons": len(self.platoon_ids),
                "n_ae_samples": int(len(self.ae_samples))}

    def write(self, out_dir, dt: float, t0: float = 0.0) -> list[Path]:
        """Write metrics.json, CDF tables and one error-grid CSV per platoon."""
        out = Path(out_dir)
        (out / "error_grids").mkdir(parents=True, exist_ok=True)
        written = [out / "metrics.json", out / "ae_cdf.csv", out / "pmaae_cdf.csv"]
        doc = dict(self.summary(), ae_samples=self.ae_samples.tolist(),
                   pmaae_samples=self.pmaae_samples.tolist(), platoon_ids=self.platoon_ids)
        written[0].write_text(json.dumps(doc, indent=1) + "\n")
        for path, samples in ((written[1], self.ae_samples), (written[2], self.pmaae_samples)):
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["error_m", "cdf"])
                n = len(samples)
                for k, s in enumerate(samples):
                    w.writerow([repr(float(s)), repr((k + 1) / n)])
        for pid, grid in zip(self.platoon_ids, self.error_grids):
            path = out / "error_grids" / f"{_safe_name(pid)}.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                times = t0 + dt * np.arange(grid.shape[1])
                w.writerow(["vehicle"] + [f"{t:g}" for t in times])
                for i, row in enumerate(grid):
                    w.writerow([i + 2] + [repr(float(e)) for e in row])
            written.append(path)
        return written


def _safe_name(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in str(s))
