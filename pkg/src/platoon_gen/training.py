"""Pair-level teacher-forced training and platoon-level scheduled-sampling training.

Both trainers unroll the network over every decision step, integrate the
predicted acceleration into a position, and backpropagate the squared
position error. Generated states that are fed back as the next step's
inputs are treated as constants in the backward pass unless
``TrainConfig.feedback_gradient`` is set, in which case the gradient also
flows through them.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DX_MIN, NumericError, Platoon, VehicleState, features, integrate_step, stack_platoons
from .evaluation import generate_platoons
from .network import (
    GradientTape,
    LstmModel,
    NetworkParams,
    OptimizerState,
    ReverseSweep,
    backward_rollout,
    forward_step,
    optimizer_update,
    params_from_dict,
    params_to_dict,
)
from .sampling import DecaySchedule, epsilon, rollout_seed, sample_mask

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "platoon-gen-checkpoint"


class TrainingDiverged(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    optimizer: str = "adam"
    schedule: DecaySchedule = field(default_factory=DecaySchedule)
    batch_size: int | None = None  # None: one update per epoch over the whole dataset
    seed: int = 0
    dt: float = 0.5
    feedback_gradient: bool = False
    grad_clip: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = asdict(self.schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("schedule"), dict):
            d["schedule"] = DecaySchedule(**d["schedule"])
        return cls(**d)


# -- losses ------------------------------------------------------------------

def _as_positions(obj) -> np.ndarray:
    if isinstance(obj, Platoon):
        return obj.positions[None]
    if isinstance(obj, np.ndarray):
        return obj
    return np.stack([p.positions if isinstance(p, Platoon) else np.asarray(p, float) for p in obj])


def pair_loss(actual, generated) -> float:
    """(1/N) sum_n (1/T) sum_{t>=2} (x - x_hat)^2 over follower positions.

    ``actual`` and ``generated`` are follower position arrays of shape
    (N, T) or (T,).
    """
    xa, xg = np.atleast_2d(np.asarray(actual, float)), np.atleast_2d(np.asarray(generated, float))
    if xa.shape != xg.shape:
        raise ValueError(f"length mismatch: {xa.shape} vs {xg.shape}")
    n, t = xa.shape
    return float(np.sum((xa[:, 1:] - xg[:, 1:]) ** 2) / (n * t))


def platoon_loss(actual, generated) -> float:
    """(1/N) sum_n (1/T) sum_{t>=2} (1/I) sum_{i>=2} (x - x_hat)^2."""
    xa, xg = _as_positions(actual), _as_positions(generated)
    if xa.ndim == 2:
        xa, xg = xa[None], xg[None]
    if xa.shape != xg.shape:
        raise ValueError(f"shape mismatch: {xa.shape} vs {xg.shape}")
    n, i, t = xa.shape
    return float(np.sum((xa[:, 1:, 1:] - xg[:, 1:, 1:]) ** 2) / (n * t * i))


# -- rollouts ----------------------------------------------------------------

def _accumulate(total, grads):
    if total is None:
        return {k: g.copy() for k, g in grads.items()}
    for k, g in grads.items():
        total[k] += g
    return total


def _teacher_forced_pass(params, Xf, Vf, Af, Xl, Vl, Al, dt, scale, input_log):
    """Alg. 1 rollout for a batch of pairs; returns (loss, grads)."""
    n_batch, n_steps = Xf.shape
    tape = GradientTape(params)
    mem = None
    x_hat = np.empty((n_batch, n_steps - 1))
    for t in range(n_steps - 1):
        s_f = VehicleState(Xf[:, t], Vf[:, t], Af[:, t])
        s_l = VehicleState(Xl[:, t], Vl[:, t], Al[:, t])
        obs = features(s_f, s_l)
        if input_log is not None:
            input_log.append(obs.as_array())
        acc, mem = forward_step(params, obs, mem, tape)
        nxt = integrate_step(s_f, acc, dt)
        tape.mark_integration(np.where(s_f.v + acc * dt > 0, dt * dt, 0.0))
        x_hat[:, t] = nxt.x
    err = x_hat - Xf[:, 1:]
    loss = float(np.sum(err ** 2) * scale)
    return loss, backward_rollout(tape, (2.0 * scale * err).T)


def _platoon_pass(params, X, V, A, masks, dt, scale, feedback_gradient=False, input_log=None):
    """Alg. 2 rollout of every follower of a batch of platoons, then the reverse pass.

    ``masks[i - 1]`` (shape (B, T-1)) selects actual (True) or generated
    inputs for follower ``i``, which reacts to the trajectory generated for
    ``i - 1`` earlier in the same pass. With ``feedback_gradient`` the
    reverse pass also flows through generated states used as inputs, both
    the follower's own and its generated leader's; otherwise those inputs
    are constants. Returns (loss, grads, generated x/v/a arrays).
    """
    n_batch, n_veh, n_steps = X.shape
    GX, GV, GA = np.zeros_like(X), np.zeros_like(X), np.zeros_like(X)
    GX[:, 0], GV[:, 0], GA[:, 0] = X[:, 0], V[:, 0], A[:, 0]
    records = []
    for i in range(1, n_veh):
        GX[:, i, 0], GV[:, i, 0], GA[:, i, 0] = X[:, i, 0], V[:, i, 0], A[:, i, 0]
        b_all = masks[i - 1]
        tape = GradientTape(params)
        mem = None
        open_v, open_dx = [], []
        for t in range(n_steps - 1):
            b = b_all[:, t]
            s_f = VehicleState(np.where(b, X[:, i, t], GX[:, i, t]), np.where(b, V[:, i, t], GV[:, i, t]),
                               np.where(b, A[:, i, t], GA[:, i, t]))
            s_l = VehicleState(np.where(b, X[:, i - 1, t], GX[:, i - 1, t]),
                               np.where(b, V[:, i - 1, t], GV[:, i - 1, t]),
                               np.where(b, A[:, i - 1, t], GA[:, i - 1, t]))
            obs = features(s_f, s_l)
            if input_log is not None:
                input_log.append(obs.as_array())
            acc, mem = forward_step(params, obs, mem, tape)
            nxt = integrate_step(s_f, acc, dt)
            moving = s_f.v + acc * dt > 0
            tape.mark_integration(np.where(moving, dt * dt, 0.0))
            open_v.append(moving)
            open_dx.append(s_l.x - s_f.x > DX_MIN)
            GX[:, i, t + 1], GV[:, i, t + 1], GA[:, i, t + 1] = nxt.x, nxt.v, nxt.a
        records.append((tape, open_v, open_dx))

    err = GX[:, 1:, 1:] - X[:, 1:, 1:]
    loss = float(np.sum(err ** 2) * scale)
    grads = None
    # d loss / d generated state, filled from the back of the platoon forwards
    dGX = np.zeros_like(X)
    dGV = np.zeros_like(X)
    dGX[:, 1:, 1:] = 2.0 * scale * err
    for i in range(n_veh - 1, 0, -1):
        tape, open_v, open_dx = records[i - 1]
        b_all = masks[i - 1]
        sweep = ReverseSweep(tape)
        for t in range(n_steps - 2, -1, -1):
            d_x_next, d_v_next = dGX[:, i, t + 1], dGV[:, i, t + 1]
            d_vhat = (d_v_next + d_x_next * dt) * open_v[t]
            d_feat = sweep.step(t, d_vhat * dt)
            if not feedback_gradient:
                continue
            gen = ~b_all[:, t]
            d_dx = d_feat[:, 2] * open_dx[t]
            dGX[:, i, t] += np.where(gen, d_x_next - d_dx, 0.0)
            dGV[:, i, t] += np.where(gen, d_vhat + d_feat[:, 0] - d_feat[:, 1], 0.0)
            if i > 1:
                dGX[:, i - 1, t] += np.where(gen, d_dx, 0.0)
                dGV[:, i - 1, t] += np.where(gen, d_feat[:, 1], 0.0)
        grads = _accumulate(grads, sweep.grads)
    return loss, grads, (GX, GV, GA)


def _batches(platoons: Sequence[Platoon], cfg: TrainConfig, k: int) -> list[list[Platoon]]:
    # sorting by id makes full-batch updates independent of dataset order
    ordered = sorted(platoons, key=lambda p: p.platoon_id)
    if cfg.batch_size is None or cfg.batch_size >= len(ordered):
        return [ordered]
    rng = np.random.default_rng([cfg.seed, k, 0x5EED])
    perm = rng.permutation(len(ordered))
    ordered = [ordered[j] for j in perm]
    return [ordered[s:s + cfg.batch_size] for s in range(0, len(ordered), cfg.batch_size)]


def train_pair_epoch(params: NetworkParams, pairs: Sequence[Platoon], cfg: TrainConfig, k: int,
                     opt: OptimizerState, input_log: list | None = None):
    """One epoch of teacher-forced pair training. Returns (params, opt, loss)."""
    if not pairs:
        raise ValueError("empty training set")
    if any(len(p) != 2 for p in pairs):
        raise ValueError("pair training expects 2-vehicle platoons")
    total_loss, n_total = 0.0, len(pairs)
    for batch in _batches(pairs, cfg, k):
        X, V, A = stack_platoons(batch)
        n_batch, _, n_steps = X.shape
        scale = 1.0 / (n_batch * n_steps)
        loss, grads = _teacher_forced_pass(params, X[:, 1], V[:, 1], A[:, 1], X[:, 0], V[:, 0], A[:, 0],
                                           cfg.dt, scale, input_log)
        _check_loss(loss)
        total_loss += loss * n_batch / n_total
        params, opt = optimizer_update(params, clip_gradients(grads, cfg.grad_clip), opt)
    return params, opt, total_loss


def train_platoon_epoch(params: NetworkParams, platoons: Sequence[Platoon], cfg: TrainConfig, k: int,
                        opt: OptimizerState, input_log: list | None = None):
    """One epoch of platoon-level training with scheduled sampling. Returns (params, opt, loss)."""
    if not platoons:
        raise ValueError("empty training set")
    eps = epsilon(cfg.schedule, k)
    total_loss, n_total = 0.0, len(platoons)
    for batch in _batches(platoons, cfg, k):
        X, V, A = stack_platoons(batch)
        n_batch, n_veh, n_steps = X.shape
        scale = 1.0 / (n_batch * n_steps * n_veh)
        masks = [np.stack([sample_mask(eps, n_steps - 1, rollout_seed(cfg.seed, k, p.platoon_id, i))
                           for p in batch]) for i in range(1, n_veh)]
        loss, grads, _ = _platoon_pass(params, X, V, A, masks, cfg.dt, scale, cfg.feedback_gradient,
                                       input_log)
        _check_loss(loss)
        total_loss += loss * n_batch / n_total
        params, opt = optimizer_update(params, clip_gradients(grads, cfg.grad_clip), opt)
    return params, opt, total_loss


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    """Rescale so the global L2 norm does not exceed ``max_norm``."""
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def _check_loss(loss):
    if not math.isfinite(loss):
        raise NumericError(f"training loss became {loss}")


def to_pairs(platoons: Sequence[Platoon]) -> list[Platoon]:
    """Split each platoon into its consecutive (leader, follower) pairs."""
    pairs = []
    for p in platoons:
        for i in range(1, len(p)):
            pairs.append(Platoon(f"{p.platoon_id}/{i}", [p.trajectories[i - 1], p.trajectories[i]], lane=p.lane))
    return pairs


def feature_normalization(platoons: Sequence[Platoon]) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std of (v_f, dv, dx) over every actual follower/leader pair."""
    feats = []
    for p in platoons:
        X, V = p.array("x"), p.array("v")
        s_f = VehicleState(X[1:], V[1:], 0.0)
        s_l = VehicleState(X[:-1], V[:-1], 0.0)
        feats.append(features(s_f, s_l).as_array().reshape(-1, 3))
    feats = np.concatenate(feats)
    std = feats.std(axis=0)
    return feats.mean(axis=0), np.where(std > 1e-9, std, 1.0)


# -- multi-epoch driver --------------------------------------------------------

@dataclass
class TrainReport:
    train_loss: list[float]
    inference_loss: list[float]
    params: NetworkParams
    best_params: NetworkParams
    best_epoch: int
    lr_halvings: int = 0

    def write_table(self, path) -> None:
        lines = ["epoch,train_loss,inference_loss"]
        for k, (tr, inf) in enumerate(zip(self.train_loss, self.inference_loss)):
            lines.append(f"{k},{tr!r},{inf!r}")
        Path(path).write_text("\n".join(lines) + "\n")


def inference_loss(params: NetworkParams, platoons: Sequence[Platoon]) -> float:
    """Platoon-level MSE of a pure rollout (no actual states after t = 1)."""
    if not platoons:
        return float("nan")
    gen = generate_platoons(LstmModel(params), platoons)
    return platoon_loss(platoons, gen)


def fit(params: NetworkParams, train_set: Sequence[Platoon], eval_set: Sequence[Platoon],
        cfg: TrainConfig, mode: str = "platoon", checkpoint: str | Path | None = None,
        resume: bool = False) -> TrainReport:
    """Train for ``cfg.epochs`` epochs and keep the parameters with the lowest inference loss.

    ``mode='pair'`` splits the training platoons into consecutive pairs and
    runs teacher-forced training; ``mode='platoon'`` runs scheduled
    sampling on whole platoons with ``cfg.schedule``. If ``checkpoint``
    is given, state is written after every epoch; ``resume`` continues
    from it.
    """
    if mode not in ("pair", "platoon"):
        raise ValueError(f"unknown training mode {mode!r}")
    data = to_pairs(train_set) if mode == "pair" else list(train_set)
    epoch_fn = train_pair_epoch if mode == "pair" else train_platoon_epoch
    opt = OptimizerState(cfg.optimizer, cfg.lr)
    train_hist, inf_hist = [], []
    best_params, best_loss, best_epoch, halvings, start = params, math.inf, -1, 0, 0

    if resume and checkpoint is not None and Path(checkpoint).exists():
        state = load_checkpoint(checkpoint)
        params, opt = state["params"], state["optimizer"]
        best_params, best_loss, best_epoch = state["best_params"], state["best_loss"], state["best_epoch"]
        train_hist, inf_hist = state["train_loss"], state["inference_loss"]
        halvings, start = state["lr_halvings"], state["epoch"]
        log.info("resuming from epoch %d", start)

    for k in range(start, cfg.epochs):
        while True:
            try:
                new_params, new_opt, loss = epoch_fn(params, data, cfg, k, opt)
                break
            except NumericError as exc:
                halvings += 1
                if halvings > 1:
                    raise TrainingDiverged(f"epoch {k}: {exc}; learning rate already halved once") from exc
                opt = OptimizerState(**{**opt.__dict__, "lr": opt.lr / 2})
                log.warning("epoch %d diverged (%s); halving learning rate to %g", k, exc, opt.lr)
        params, opt = new_params, new_opt
        try:
            inf = inference_loss(params, eval_set) if eval_set else loss
        except NumericError:
            inf = math.inf
        train_hist.append(loss)
        inf_hist.append(inf)
        if inf < best_loss:
            best_params, best_loss, best_epoch = params, inf, k
        log.debug("epoch %d train %.5g inference %.5g", k, loss, inf)
        if checkpoint is not None:
            save_checkpoint(checkpoint, dict(epoch=k + 1, params=params, optimizer=opt,
                                             best_params=best_params, best_loss=best_loss,
                                             best_epoch=best_epoch, train_loss=train_hist,
                                             inference_loss=inf_hist, lr_halvings=halvings,
                                             config=cfg.to_dict(), mode=mode))
    return TrainReport(train_hist, inf_hist, params, best_params, best_epoch, halvings)


def save_checkpoint(path, state: dict) -> None:
    doc = dict(state, format=CHECKPOINT_FORMAT, params=params_to_dict(state["params"]),
               best_params=params_to_dict(state["best_params"]), optimizer=state["optimizer"].to_dict(),
               best_loss=None if math.isinf(state["best_loss"]) else state["best_loss"])
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(doc) + "\n")
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a training checkpoint")
    doc["params"] = params_from_dict(doc["params"])
    doc["best_params"] = params_from_dict(doc["best_params"])
    doc["optimizer"] = OptimizerState.from_dict(doc["optimizer"])
    doc["best_loss"] = math.inf if doc["best_loss"] is None else doc["best_loss"]
    return doc
