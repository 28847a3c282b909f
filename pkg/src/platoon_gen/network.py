"""Stacked-LSTM acceleration network with hand-written backpropagation through time.

Parameters for layer ``l`` are a single gate matrix ``W{l}`` of shape
``(4H, n_in + H)`` acting on ``[input, h_prev]`` and a bias ``b{l}`` of
shape ``(4H,)``. Gate blocks are stacked in the order input, forget,
output, candidate. A linear head maps the top hidden vector to a scalar
acceleration. Inputs ``(v_f, dv, dx)`` are z-scored with constants stored
alongside the weights.

Everything is batched over a leading axis; scalar observations are
treated as a batch of one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import ObservationFeatures
from .models import CarFollowingModel

FORMAT_NAME = "platoon-gen-lstm"
FORMAT_VERSION = 1
DEFAULT_LAYERS = (10, 10, 5)
N_INPUTS = 3


class ConfigurationError(ValueError):
    pass


def _sigmoid(z):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class NetworkParams:
    layer_sizes: tuple[int, ...]
    arrays: dict[str, np.ndarray]
    feature_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_INPUTS))
    feature_std: np.ndarray = field(default_factory=lambda: np.ones(N_INPUTS))
    n_inputs: int = N_INPUTS

    def __post_init__(self):
        self.layer_sizes = tuple(int(h) for h in self.layer_sizes)
        self.feature_mean = np.asarray(self.feature_mean, dtype=float)
        self.feature_std = np.asarray(self.feature_std, dtype=float)
        expected = param_shapes(self.layer_sizes, self.n_inputs)
        if set(expected) != set(self.arrays):
            raise ConfigurationError(f"parameter blocks {sorted(self.arrays)} != {sorted(expected)}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ConfigurationError(f"{name}: shape {self.arrays[name].shape} != {shape}")
        if np.any(self.feature_std <= 0):
            raise ConfigurationError("feature std must be positive")

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.layer_sizes, {k: v.copy() for k, v in self.arrays.items()},
                             self.feature_mean.copy(), self.feature_std.copy(), self.n_inputs)

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "NetworkParams":
        return NetworkParams(self.layer_sizes, arrays, self.feature_mean.copy(),
                             self.feature_std.copy(), self.n_inputs)

    def with_normalization(self, mean, std) -> "NetworkParams":
        return NetworkParams(self.layer_sizes, {k: v.copy() for k, v in self.arrays.items()},
                             np.asarray(mean, float), np.asarray(std, float), self.n_inputs)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in sorted(self.arrays)])


def param_shapes(layer_sizes, n_inputs=N_INPUTS) -> dict[str, tuple[int, ...]]:
    shapes = {}
    fan = n_inputs
    for l, h in enumerate(layer_sizes):
        shapes[f"W{l}"] = (4 * h, fan + h)
        shapes[f"b{l}"] = (4 * h,)
        fan = h
    shapes["head_w"] = (fan,)
    shapes["head_b"] = (1,)
    return shapes


def init_params(seed: int, layer_sizes=DEFAULT_LAYERS, n_inputs: int = N_INPUTS) -> NetworkParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(layer_sizes, n_inputs).items():
        if name.startswith("W") or name == "head_w":
            r = 1.0 / np.sqrt(shape[-1] if name.startswith("W") else shape[0])
            arrays[name] = rng.uniform(-r, r, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    for l, h in enumerate(layer_sizes):
        arrays[f"b{l}"][h:2 * h] = 1.0
    return NetworkParams(tuple(layer_sizes), arrays, n_inputs=n_inputs)


def zero_params(layer_sizes=DEFAULT_LAYERS, n_inputs: int = N_INPUTS) -> NetworkParams:
    arrays = {k: np.zeros(s) for k, s in param_shapes(layer_sizes, n_inputs).items()}
    return NetworkParams(tuple(layer_sizes), arrays, n_inputs=n_inputs)


@dataclass(frozen=True)
class LstmMemory:
    """Per-layer (hidden, cell) pairs, each of shape (B, H)."""

    hidden: tuple[np.ndarray, ...]
    cell: tuple[np.ndarray, ...]

    @classmethod
    def zeros(cls, layer_sizes, batch: int = 1) -> "LstmMemory":
        return cls(tuple(np.zeros((batch, h)) for h in layer_sizes),
                   tuple(np.zeros((batch, h)) for h in layer_sizes))


class GradientTape:
    """Activations of one recorded rollout, consumed by :func:`backward_rollout`."""

    def __init__(self, params: NetworkParams):
        self.params = params
        self.steps: list[list[dict]] = []
        self.acc_sensitivity: list[np.ndarray] = []

    def __len__(self):
        return len(self.steps)

    def mark_integration(self, dx_da) -> None:
        """Record d(position)/d(acceleration) of the step just taken."""
        self.acc_sensitivity.append(np.atleast_1d(np.asarray(dx_da, dtype=float)))


def _as_batch(obs: ObservationFeatures) -> tuple[np.ndarray, bool]:
    arr = obs.as_array()
    scalar = arr.ndim == 1
    return (arr[None, :] if scalar else arr), scalar


def forward_step(params: NetworkParams, obs: ObservationFeatures, mem: LstmMemory | None = None,
                 tape: GradientTape | None = None):
    """Run one decision step. Returns ``(acceleration, new_memory)``.

    Inputs are never modified. When ``tape`` is given, the activations
    needed for the backward pass are appended to it.
    """
    z, scalar = _as_batch(obs)
    if z.shape[-1] != params.n_inputs:
        raise ConfigurationError(f"expected {params.n_inputs} input features, got {z.shape[-1]}")
    batch = z.shape[0]
    if mem is None:
        mem = LstmMemory.zeros(params.layer_sizes, batch)
    if len(mem.hidden) != params.n_layers:
        raise ConfigurationError("memory depth does not match network")
    inp = (z - params.feature_mean) / params.feature_std
    new_h, new_c, caches = [], [], []
    for l, h_size in enumerate(params.layer_sizes):
        h_prev, c_prev = mem.hidden[l], mem.cell[l]
        if h_prev.shape != (batch, h_size):
            raise ConfigurationError(f"layer {l}: memory shape {h_prev.shape} != {(batch, h_size)}")
        xin = np.concatenate([inp, h_prev], axis=1)
        gates = xin @ params.arrays[f"W{l}"].T + params.arrays[f"b{l}"]
        sig = _sigmoid(gates[:, :3 * h_size])
        i, f, o = sig[:, :h_size], sig[:, h_size:2 * h_size], sig[:, 2 * h_size:]
        g = np.tanh(gates[:, 3 * h_size:])
        c = f * c_prev + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        if tape is not None:
            caches.append(dict(xin=xin, i=i, f=f, o=o, g=g, c_prev=c_prev, tanh_c=tanh_c))
        new_h.append(h)
        new_c.append(c)
        inp = h
    acc = inp @ params.arrays["head_w"] + params.arrays["head_b"][0]
    if tape is not None:
        caches.append(dict(h_top=inp))
        tape.steps.append(caches)
    new_mem = LstmMemory(tuple(new_h), tuple(new_c))
    return (float(acc[0]) if scalar else acc), new_mem


def backward_rollout(tape: GradientTape, loss_grads) -> dict[str, np.ndarray]:
    """Reverse-mode gradient of a recorded rollout loss.

    ``loss_grads[t]`` is dL/dx(t+1) for the position produced by step ``t``
    (shape ``(n_steps, B)``). It is chained through the recorded
    integration sensitivity into the acceleration, then back through the
    head and the stacked recurrence. States fed back as inputs are treated
    as constants.
    """
    loss_grads = np.asarray(loss_grads, dtype=float)
    n_steps = len(tape.steps)
    if len(tape.acc_sensitivity) != n_steps:
        raise ValueError("tape is missing integration sensitivities")
    if loss_grads.ndim == 1:
        loss_grads = loss_grads[:, None]
    if loss_grads.shape[0] != n_steps:
        raise ValueError(f"{loss_grads.shape[0]} loss gradients for a tape of {n_steps} steps")
    back = ReverseSweep(tape)
    for t in range(n_steps - 1, -1, -1):
        back.step(t, loss_grads[t] * tape.acc_sensitivity[t])
    return back.grads


class ReverseSweep:
    """Step-by-step reverse pass over a tape, newest step first.

    Each call to :meth:`step` takes dL/d(acceleration) at that step,
    accumulates parameter gradients, carries the recurrent memory
    gradient to the previous step, and returns dL/d(raw features) with
    columns (v_f, dv, dx).
    """

    def __init__(self, tape: GradientTape):
        self.tape = tape
        params = tape.params
        self.sizes = params.layer_sizes
        self.W = [params.arrays[f"W{l}"] for l in range(len(self.sizes))]
        self.head_w = params.arrays["head_w"]
        self.inv_std = 1.0 / params.feature_std
        self.grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        batch = tape.steps[0][0]["xin"].shape[0] if tape.steps else 0
        self.dh_next = [np.zeros((batch, h)) for h in self.sizes]
        self.dc_next = [np.zeros((batch, h)) for h in self.sizes]
        self._next_t = len(tape.steps) - 1

    def step(self, t: int, d_acc) -> np.ndarray:
        if t != self._next_t:
            raise ValueError(f"reverse sweep expected step {self._next_t}, got {t}")
        self._next_t -= 1
        caches = self.tape.steps[t]
        grads = self.grads
        d_acc = np.asarray(d_acc, dtype=float)
        grads["head_w"] += d_acc @ caches[-1]["h_top"]
        grads["head_b"][0] += d_acc.sum()
        d_from_above = np.outer(d_acc, self.head_w)
        for l in range(len(self.sizes) - 1, -1, -1):
            cache = caches[l]
            i, f, o, g, tanh_c = cache["i"], cache["f"], cache["o"], cache["g"], cache["tanh_c"]
            dh = d_from_above + self.dh_next[l]
            dc = dh * o * (1.0 - tanh_c ** 2) + self.dc_next[l]
            d_gates = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * cache["c_prev"] * f * (1.0 - f),
                dh * tanh_c * o * (1.0 - o),
                dc * i * (1.0 - g ** 2),
            ], axis=1)
            grads[f"W{l}"] += d_gates.T @ cache["xin"]
            grads[f"b{l}"] += d_gates.sum(axis=0)
            d_xin = d_gates @ self.W[l]
            n_in = d_xin.shape[1] - self.sizes[l]
            self.dh_next[l] = d_xin[:, n_in:]
            self.dc_next[l] = dc * f
            d_from_above = d_xin[:, :n_in]
        return d_from_above * self.inv_std


@dataclass
class OptimizerState:
    method: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.method!r}")
        if self.lr < 0:
            raise ConfigurationError("learning rate must be non-negative")

    def to_dict(self) -> dict:
        return dict(method=self.method, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                    eps=self.eps, step=self.step,
                    m={k: _encode_array(a) for k, a in self.m.items()},
                    v={k: _encode_array(a) for k, a in self.v.items()})

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        d = dict(d)
        d["m"] = {k: _decode_array(a) for k, a in d.get("m", {}).items()}
        d["v"] = {k: _decode_array(a) for k, a in d.get("v", {}).items()}
        return cls(**d)


def optimizer_update(params: NetworkParams, grads: dict[str, np.ndarray], opt: OptimizerState):
    """Apply one SGD or bias-corrected Adam step. Inputs are left untouched."""
    if set(grads) != set(params.arrays):
        raise ConfigurationError("gradient blocks do not match parameters")
    step = opt.step + 1
    new_arrays, m_new, v_new = {}, {}, {}
    if opt.method == "sgd":
        for k, p in params.arrays.items():
            new_arrays[k] = p - opt.lr * grads[k]
    else:
        b1, b2 = opt.beta1, opt.beta2
        for k, p in params.arrays.items():
            g = grads[k]
            m = b1 * opt.m.get(k, np.zeros_like(p)) + (1 - b1) * g
            v = b2 * opt.v.get(k, np.zeros_like(p)) + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** step)
            v_hat = v / (1 - b2 ** step)
            new_arrays[k] = p - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
            m_new[k], v_new[k] = m, v
    new_opt = OptimizerState(opt.method, opt.lr, opt.beta1, opt.beta2, opt.eps, step, m_new, v_new)
    return params.with_arrays(new_arrays), new_opt


def finite_difference_gradient(loss_fn: Callable[[NetworkParams], float], params: NetworkParams,
                               step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn`` over every trainable entry."""
    if step <= 0:
        raise ValueError("step must be positive")
    work = params.copy()
    grads = {}
    for name, arr in work.arrays.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            up = loss_fn(work)
            arr[idx] = orig - step
            down = loss_fn(work)
            arr[idx] = orig
            g[idx] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def finite_difference_gradient_batched(loss_fn: Callable[[dict[str, np.ndarray]], np.ndarray],
                                       params: NetworkParams, step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences with every perturbed parameter set evaluated in one call.

    ``loss_fn`` receives a dict of arrays with a leading axis of length
    ``2 * n_params`` (all +step copies, then all -step copies) and returns
    one loss per set.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    names = sorted(params.arrays)
    sizes = [params.arrays[k].size for k in names]
    n_par = sum(sizes)
    stacked = {}
    offset = 0
    for name, size in zip(names, sizes):
        base = params.arrays[name].reshape(1, -1)
        block = np.repeat(base, 2 * n_par, axis=0)
        cols = np.arange(size)
        block[offset + cols, cols] += step
        block[n_par + offset + cols, cols] -= step
        stacked[name] = block.reshape((2 * n_par,) + params.arrays[name].shape)
        offset += size
    losses = np.asarray(loss_fn(stacked), dtype=float)
    diff = (losses[:n_par] - losses[n_par:]) / (2 * step)
    grads, offset = {}, 0
    for name, size in zip(names, sizes):
        grads[name] = diff[offset:offset + size].reshape(params.arrays[name].shape)
        offset += size
    return grads


class LstmModel(CarFollowingModel):
    """Adapter exposing :class:`NetworkParams` through the car-following interface."""

    def __init__(self, params: NetworkParams):
        self.params = params

    def initial_memory(self, batch_shape=()):
        batch = int(np.prod(batch_shape)) if batch_shape else 1
        return LstmMemory.zeros(self.params.layer_sizes, batch)

    def decide(self, obs, memory):
        return forward_step(self.params, obs, memory)


# -- serialization -----------------------------------------------------------

def _encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel(order="C")]}


def _decode_array(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=float).reshape(d["shape"])


def params_to_dict(params: NetworkParams) -> dict:
    return {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "n_inputs": params.n_inputs,
        "layer_sizes": list(params.layer_sizes),
        "feature_mean": [float(x) for x in params.feature_mean],
        "feature_std": [float(x) for x in params.feature_std],
        "arrays": {k: _encode_array(params.arrays[k]) for k in sorted(params.arrays)},
    }


def params_from_dict(d: dict) -> NetworkParams:
    if d.get("format") != FORMAT_NAME:
        raise ConfigurationError(f"not a {FORMAT_NAME} document")
    if d.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported model format version {d.get('format_version')}")
    arrays = {k: _decode_array(v) for k, v in d["arrays"].items()}
    return NetworkParams(tuple(d["layer_sizes"]), arrays, d["feature_mean"], d["feature_std"],
                         d["n_inputs"])


def save_params(params: NetworkParams, path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params), indent=1) + "\n")


def load_params(path) -> NetworkParams:
    return params_from_dict(json.loads(Path(path).read_text()))
