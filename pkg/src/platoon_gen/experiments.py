"""Model and decay-schedule comparisons on a train / validation / test split.

Variants:

``idm``       IDM with default parameters, no training.
``lstm``      teacher-forced training on consecutive vehicle pairs.
``lstm_pl``   platoon-level training, always feeding actual states.
``lstm_ss``   scheduled sampling on vehicle pairs.
``int_lstm``  scheduled sampling with platoon-level training.

LSTM variants start from the same initial weights. Each keeps the epoch
with the lowest validation rollout loss and is scored on the test platoons.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Sequence

from .core import Platoon
from .data import SynthConfig, synthesize
from .evaluation import MetricsReport, generate_platoons
from .models import CarFollowingModel, IdmModel, IdmParams
from .network import DEFAULT_LAYERS, LstmModel, NetworkParams, init_params
from .sampling import DecaySchedule
from .training import TrainConfig, TrainReport, feature_normalization, fit, to_pairs

log = logging.getLogger(__name__)

VARIANTS = {
    "idm": None,
    "lstm": ("pair", "always_actual"),
    "lstm_pl": ("platoon", "always_actual"),
    "lstm_ss": ("pair_ss", "inverse_sigmoid"),
    "int_lstm": ("platoon", "inverse_sigmoid"),
}


@dataclass
class VariantResult:
    name: str
    mae: float
    mmaae: float
    metrics: MetricsReport
    report: TrainReport | None = None
    model: CarFollowingModel | None = None
    seconds: float = 0.0


@dataclass
class Split:
    train: list[Platoon]
    val: list[Platoon]
    test: list[Platoon]


@dataclass(frozen=True)
class Protocol:
    """Desk-scale comparison settings shared by the CLI and the acceptance suite."""

    n_train: int = 200
    n_val: int = 40
    n_test: int = 20
    noise_std: float = 1.0
    epochs: int = 100
    lr: float = 5e-3
    batch_size: int = 25
    feedback_gradient: bool = True
    grad_clip: float | None = 1.0
    layer_sizes: tuple[int, ...] = DEFAULT_LAYERS

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, seed=seed,
                           schedule=DecaySchedule.default("inverse_sigmoid", self.epochs),
                           feedback_gradient=self.feedback_gradient, grad_clip=self.grad_clip)


def make_split(seed: int, protocol: Protocol = Protocol()) -> Split:
    """Synthetic platoons for one seed: training first, then test, then validation."""
    n = protocol.n_train + protocol.n_test + protocol.n_val
    ds = synthesize(SynthConfig(n_platoons=n, noise_std=protocol.noise_std, seed=seed))
    a, b = protocol.n_train, protocol.n_train + protocol.n_test
    return Split(ds.platoons[:a], ds.platoons[b:], ds.platoons[a:b])


def run_protocol(seeds: Sequence[int], protocol: Protocol = Protocol(),
                 variants: Sequence[str] = tuple(VARIANTS)) -> dict[int, dict[str, VariantResult]]:
    out = {}
    for seed in seeds:
        out[seed] = compare_models(make_split(seed, protocol), protocol.train_config(seed), variants,
                                   protocol.layer_sizes)
    return out


def initial_params(seed: int, train: Sequence[Platoon], layer_sizes=DEFAULT_LAYERS) -> NetworkParams:
    mean, std = feature_normalization(train)
    return init_params(seed, layer_sizes).with_normalization(mean, std)


def train_variant(mode: str, family: str, split: Split, cfg: TrainConfig, params0: NetworkParams,
                  n_vehicles: int) -> TrainReport:
    """Train one LSTM variant; pair data uses ``n_vehicles - 1`` times the batch size."""
    schedule = DecaySchedule.default(family, cfg.schedule.epoch_max)
    cfg = replace(cfg, schedule=schedule)
    if mode == "platoon":
        return fit(params0, split.train, split.val, cfg, mode="platoon")
    pair_cfg = cfg if cfg.batch_size is None else replace(cfg, batch_size=cfg.batch_size * (n_vehicles - 1))
    if mode == "pair":
        return fit(params0, split.train, split.val, pair_cfg, mode="pair")
    return fit(params0, to_pairs(split.train), split.val, pair_cfg, mode="platoon")


def score(name: str, model: CarFollowingModel, test: Sequence[Platoon]) -> VariantResult:
    gen = generate_platoons(model, test)
    m = MetricsReport.compute(test, gen)
    return VariantResult(name, m.mae, m.mmaae, m, model=model)


def compare_models(split: Split, cfg: TrainConfig, variants: Sequence[str] = tuple(VARIANTS),
                   layer_sizes=DEFAULT_LAYERS, idm: IdmParams | None = None) -> dict[str, VariantResult]:
    n_veh = len(split.train[0])
    params0 = initial_params(cfg.seed, split.train, layer_sizes)
    results = {}
    for name in variants:
        start = time.perf_counter()
        if VARIANTS[name] is None:
            res = score(name, IdmModel(idm), split.test)
        else:
            mode, family = VARIANTS[name]
            report = train_variant(mode, family, split, cfg, params0, n_veh)
            res = score(name, LstmModel(report.best_params), split.test)
            res.report = report
        res.seconds = time.perf_counter() - start
        log.info("%s: MAE %.3f MMaAE %.3f (%.1fs)", name, res.mae, res.mmaae, res.seconds)
        results[name] = res
    return results


def compare_schedules(split: Split, cfg: TrainConfig, families: Sequence[str],
                      layer_sizes=DEFAULT_LAYERS) -> dict[str, VariantResult]:
    """Platoon-level training under each decay schedule family."""
    n_veh = len(split.train[0])
    params0 = initial_params(cfg.seed, split.train, layer_sizes)
    results = {}
    for family in families:
        start = time.perf_counter()
        report = train_variant("platoon", family, split, cfg, params0, n_veh)
        res = score(family, LstmModel(report.best_params), split.test)
        res.report = report
        res.seconds = time.perf_counter() - start
        log.info("%s: MAE %.3f MMaAE %.3f (%.1fs)", family, res.mae, res.mmaae, res.seconds)
        results[family] = res
    return results
