"""Finite-difference verification of the scheduled-sampling rollout gradient.

The oracle is a separate straight-line rollout that evaluates every
perturbed parameter set at once. In stop-gradient mode it first records
the inputs fed at the current parameters and replays them frozen; in
feedback mode it differentiates the full rollout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import NetworkParams, finite_difference_gradient_batched, init_params
from .training import _platoon_pass

THRESHOLD = 1e-4


def _oracle_net(stacked, layer_sizes, mean, std):
    """Independent LSTM forward over a stack of P parameter sets.

    Returns ``step(raw_features (P, B, 3), memory) -> (acc (P, B), memory)``.
    """
    def sig(z):
        return 1.0 / (1.0 + np.exp(-z))

    def step(raw, mem):
        inp = (raw - mean) / std
        n_p, n_b = raw.shape[:2]
        if mem is None:
            mem = [(np.zeros((n_p, n_b, h)), np.zeros((n_p, n_b, h))) for h in layer_sizes]
        out = []
        for l, h_size in enumerate(layer_sizes):
            h_prev, c_prev = mem[l]
            W = stacked[f"W{l}"]
            n_in = W.shape[2] - h_size
            gates = (np.einsum("pbn,pgn->pbg", inp, W[:, :, :n_in])
                     + np.einsum("pbn,pgn->pbg", h_prev, W[:, :, n_in:])
                     + stacked[f"b{l}"][:, None, :])
            in_gate = sig(gates[..., :h_size])
            forget = sig(gates[..., h_size:2 * h_size])
            out_gate = sig(gates[..., 2 * h_size:3 * h_size])
            cand = np.tanh(gates[..., 3 * h_size:])
            c = forget * c_prev + in_gate * cand
            h = out_gate * np.tanh(c)
            out.append((h, c))
            inp = h
        acc = np.einsum("pbh,ph->pb", inp, stacked["head_w"]) + stacked["head_b"][:, :1]
        return acc, out

    return step


def _oracle_rollout(stacked, params, X, V, masks, dt, frozen=None):
    """Straight-line scheduled-sampling rollout, one loss per parameter set.

    Returns (loss per set, inputs used). When ``frozen`` holds inputs
    recorded earlier, those are fed instead of freshly generated ones.
    """
    step = _oracle_net(stacked, params.layer_sizes, params.feature_mean, params.feature_std)
    n_p = stacked["head_b"].shape[0]
    n_batch, n_veh, n_steps = X.shape
    gx = np.broadcast_to(X[:, 0], (n_p, n_batch, n_steps))
    gv = np.broadcast_to(V[:, 0], (n_p, n_batch, n_steps))
    total = np.zeros(n_p)
    used = []
    for i in range(1, n_veh):
        lead_x, lead_v = gx, gv
        gx, gv = np.empty((n_p, n_batch, n_steps)), np.empty((n_p, n_batch, n_steps))
        gx[:, :, 0], gv[:, :, 0] = X[:, i, 0], V[:, i, 0]
        mem = None
        for t in range(n_steps - 1):
            if frozen is None:
                b = masks[i - 1][:, t]
                fx = np.where(b, X[:, i, t], gx[:, :, t])
                fv = np.where(b, V[:, i, t], gv[:, :, t])
                lx = np.where(b, X[:, i - 1, t], lead_x[:, :, t])
                lv = np.where(b, V[:, i - 1, t], lead_v[:, :, t])
                used.append((fx, fv, lx, lv))
            else:
                fx, fv, lx, lv = frozen[(i - 1) * (n_steps - 1) + t]
            raw = np.stack(np.broadcast_arrays(fv, lv - fv, np.maximum(lx - fx, 0.1)), axis=-1)
            raw = np.broadcast_to(raw, (n_p, n_batch, 3))
            acc, mem = step(raw, mem)
            gv[:, :, t + 1] = np.maximum(0.0, fv + acc * dt)
            gx[:, :, t + 1] = fx + gv[:, :, t + 1] * dt
        total += np.sum((gx[:, :, 1:] - X[None, :, i, 1:]) ** 2, axis=(1, 2))
    return total, used


@dataclass
class GradcheckReport:
    max_rel_error: float
    per_block: dict[str, float]
    trials: int
    threshold: float = THRESHOLD
    worst_trial: int = 0
    details: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.threshold)

    def lines(self) -> list[str]:
        out = [f"gradcheck: {self.trials} trials, max relative error {self.max_rel_error:.3e} "
               f"(threshold {self.threshold:.0e}) -> {'PASS' if self.passed else 'FAIL'}"]
        for name, err in sorted(self.per_block.items()):
            out.append(f"  {name:8s} worst {err:.3e}")
        return out


def block_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |analytic - numeric| scaled by the larger of the two blocks' max magnitudes."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def _random_case(rng, n_batch, n_veh, n_steps, dt):
    V = 10.0 + rng.normal(0.0, 1.5, size=(n_batch, n_veh, n_steps))
    A = np.zeros_like(V)
    A[:, :, 1:] = np.diff(V, axis=2) / dt
    X = np.cumsum(V, axis=2) * dt
    X -= 20.0 * np.arange(n_veh)[None, :, None]
    X += rng.normal(0.0, 0.5, size=X.shape)
    return X, V, A


def run_gradcheck(trials: int = 20, layer_sizes=(4, 4, 3), n_steps: int = 10, n_batch: int = 2,
                  n_veh: int = 3, dt: float = 0.5, seed: int = 0, fd_step: float = 1e-5,
                  feedback_gradient: bool = False, fault: float = 0.0) -> GradcheckReport:
    """Compare the analytic rollout gradient against central differences.

    Each trial draws fresh weights, data, a mask probability and masks for
    a small platoon. Without ``feedback_gradient`` the oracle freezes the
    inputs recorded at the current parameters; with it, the oracle
    differentiates the full rollout. ``fault`` scales the analytic
    gradient by ``1 + fault`` so the check can be shown to fail.
    """
    per_block: dict[str, float] = {}
    details = []
    worst, worst_trial = 0.0, 0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        params: NetworkParams = init_params(int(rng.integers(2 ** 31)), layer_sizes)
        params = params.with_normalization([10.0, 0.0, 20.0], [1.5, 2.0, 5.0])
        X, V, A = _random_case(rng, n_batch, n_veh, n_steps, dt)
        scale = 1.0 / (n_batch * n_steps * n_veh)
        eps = rng.uniform(0.0, 1.0)
        masks = [rng.random((n_batch, n_steps - 1)) < eps for _ in range(n_veh - 1)]
        _, analytic, _ = _platoon_pass(params, X, V, A, masks, dt, scale, feedback_gradient)
        if feedback_gradient:
            def loss_fn(stacked):
                return _oracle_rollout(stacked, params, X, V, masks, dt)[0] * scale
        else:
            single = {k: a[None] for k, a in params.arrays.items()}
            _, frozen = _oracle_rollout(single, params, X, V, masks, dt)

            def loss_fn(stacked):
                return _oracle_rollout(stacked, params, X, V, masks, dt, frozen)[0] * scale
        numeric = finite_difference_gradient_batched(loss_fn, params, fd_step)
        trial_errs = {}
        for name in analytic:
            err = block_relative_error(analytic[name] * (1.0 + fault), numeric[name])
            trial_errs[name] = err
            per_block[name] = max(per_block.get(name, 0.0), err)
        top = max(trial_errs.values())
        if top > worst:
            worst, worst_trial = top, trial
        details.append(dict(trial=trial, eps=eps, max_rel_error=top))
    return GradcheckReport(worst, per_block, trials, THRESHOLD, worst_trial, details)
