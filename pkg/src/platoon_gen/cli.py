"""Command-line entry point: ``platoon-gen <command> [--config FILE] [--seed N] [--out DIR]``.

Commands: ``synth``, ``ingest``, ``train``, ``generate``, ``evaluate``,
``compare``, ``gradcheck`` and ``config``. Every run writes its resolved configuration
as ``config.yaml`` next to its outputs. Log verbosity comes from the
``PLATOON_GEN_LOG`` environment variable (default ``WARNING``).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import yaml

from .core import NumericError, Platoon
from .data import (
    DataError,
    Dataset,
    SynthConfig,
    extract_platoons,
    load_dataset,
    parse_trajectory_csv,
    save_dataset,
    split,
    synthesize,
)
from .evaluation import MetricsReport, generate_platoons
from .experiments import VARIANTS, Protocol, initial_params, run_protocol
from .gradcheck import run_gradcheck
from .models import CarFollowingModel, IdmModel, IdmParams
from .network import ConfigurationError, LstmModel, load_params, save_params
from .sampling import DecaySchedule
from .training import TrainConfig, TrainingDiverged, fit

log = logging.getLogger("platoon_gen")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
IDM_FORMAT = "platoon-gen-idm"
LOG_ENV = "PLATOON_GEN_LOG"


class UsageError(Exception):
    pass


def _protocol_defaults() -> dict:
    d = asdict(Protocol())
    d["layer_sizes"] = list(d["layer_sizes"])
    return d


def _default_config() -> dict:
    synth = SynthConfig().to_dict()
    synth.pop("seed")
    synth.update(eval_fraction=20 / 240, val_fraction=20 / 240)
    train = TrainConfig().to_dict()
    train.pop("seed")
    train.update(mode="platoon", sweep=None)
    return {
        "seed": 0,
        "data": {"train": None, "val": None, "eval": None, "csv": None, "unit": "meters",
                 "frame_dt": 0.1, "min_vehicles": 5, "min_duration": 20.0, "lanes": [1, 2, 3, 4],
                 "eval_lanes": [2], "dt": 0.5},
        "synth": synth,
        "model": {"kind": "lstm", "layer_sizes": [10, 10, 5], "file": None, "idm": asdict(IdmParams())},
        "train": train,
        "eval": {"generated": None},
        "compare": dict(_protocol_defaults(), seeds=[1, 2, 3], variants=list(VARIANTS)),
        "gradcheck": {"trials": 20, "layer_sizes": [4, 4, 3], "n_steps": 10, "feedback_gradient": False,
                      "fault": 0.0},
    }


# Leaves whose values are dicts or lists taken whole rather than merged key by key.
_OPAQUE = {"synth.profile", "data.lanes", "data.eval_lanes", "model.layer_sizes",
           "gradcheck.layer_sizes", "train.sweep", "compare.seeds", "compare.variants",
           "compare.layer_sizes"}


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    if not isinstance(override, dict):
        raise UsageError(f"{prefix or 'config'}: expected a mapping")
    for key, val in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise UsageError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and path not in _OPAQUE:
            out[key] = _merge(base[key], val, path + ".")
        else:
            out[key] = val
    return out


def _set(cfg: dict, assignment: str) -> dict:
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    tree: dict = {}
    node = tree
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = yaml.safe_load(raw)
    return _merge(cfg, tree)


def resolve_config(path=None, seed=None, sets=()) -> dict:
    """Defaults, then the YAML file, then ``--set`` overrides, then ``--seed``."""
    cfg = _default_config()
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise UsageError(f"config {path} is not valid YAML: {exc}") from exc
        cfg = _merge(cfg, doc)
    for s in sets:
        cfg = _set(cfg, s)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _build(section: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (TypeError, ValueError, DataError) as exc:
        raise UsageError(f"invalid {section} config: {exc}") from exc


def synth_config(cfg: dict) -> SynthConfig:
    d = {k: v for k, v in cfg["synth"].items() if k not in ("eval_fraction", "val_fraction")}
    return _build("synth", SynthConfig.from_dict, dict(d, seed=cfg["seed"]))


def train_config(cfg: dict, family: str | None = None) -> TrainConfig:
    d = {k: v for k, v in cfg["train"].items() if k not in ("mode", "sweep")}
    if family is not None:
        d["schedule"] = asdict(DecaySchedule.default(family, d["schedule"]["epoch_max"]))
    tc = _build("train", TrainConfig.from_dict, dict(d, seed=cfg["seed"]))
    if tc.optimizer not in ("adam", "sgd"):
        raise UsageError(f"invalid train config: unknown optimizer {tc.optimizer!r}")
    return tc


# -- output helpers ----------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(cfg: dict, out: Path) -> Path:
    path = out / "config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, files: list[Path], counts: dict) -> Path:
    doc = {"command": command, "created": time.strftime("%Y-%m-%dT%H:%M:%S"), "counts": counts,
           "files": {str(p.relative_to(out)): _sha256(p) for p in files}}
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _load(path, what: str) -> Dataset:
    if path is None:
        raise UsageError(f"data.{what} is not set")
    if not Path(path).exists():
        raise DataError(f"{what} dataset {path} does not exist")
    return load_dataset(path)


def save_idm(params: IdmParams, path) -> None:
    Path(path).write_text(json.dumps({"format": IDM_FORMAT, "params": asdict(params)}) + "\n")


def load_model(cfg: dict) -> CarFollowingModel:
    m = cfg["model"]
    if m["file"] is None:
        if m["kind"] == "idm":
            return IdmModel(_build("model.idm", IdmParams, **m["idm"]))
        raise UsageError("model.file is required for an lstm model")
    path = Path(m["file"])
    if not path.exists():
        raise UsageError(f"model file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"model file {path} is not valid JSON: {exc}") from exc
    if doc.get("format") == IDM_FORMAT:
        return IdmModel(IdmParams(**doc["params"]))
    try:
        return LstmModel(load_params(path))
    except (ValueError, KeyError) as exc:
        raise UsageError(f"cannot load model {path}: {exc}") from exc


# -- commands ----------------------------------------------------------------------

def cmd_synth(cfg: dict, args) -> int:
    out = _out_dir(args)
    sc = synth_config(cfg)
    ev, va = cfg["synth"]["eval_fraction"], cfg["synth"]["val_fraction"]
    if not (0 <= ev and 0 <= va and ev + va <= 1):
        raise UsageError("synth.eval_fraction and synth.val_fraction must be non-negative and sum to at most 1")
    ds = synthesize(sc)
    rest, test = split(ds, ev, seed=cfg["seed"])
    if rest.platoons:
        train, val = split(rest, va / (1 - ev), seed=cfg["seed"] + 1)
    else:
        train, val = rest, Dataset([], dict(rest.meta))
    val.meta["split"] = "val"
    files = []
    for name, part in (("train", train), ("val", val), ("eval", test)):
        files.append(out / f"{name}.json")
        save_dataset(part, files[-1])
    files.append(_write_config(cfg, out))
    _write_manifest(out, "synth", files, {"train": len(train), "val": len(val), "eval": len(test)})
    print(f"synth: {len(train)} train / {len(val)} val / {len(test)} eval platoons -> {out}")
    return EXIT_OK


def cmd_ingest(cfg: dict, args) -> int:
    out = _out_dir(args)
    d = cfg["data"]
    if d["csv"] is None:
        raise UsageError("data.csv is not set")
    diags: list[str] = []
    records = parse_trajectory_csv(d["csv"], unit=d["unit"], frame_dt=d["frame_dt"], diagnostics=diags)
    for msg in diags:
        log.warning(msg)
    ds = extract_platoons(records, d["min_vehicles"], d["min_duration"], d["lanes"], d["dt"])
    ds.meta["source"] = str(d["csv"])
    if not ds.platoons:
        raise DataError(f"no platoons found in {d['csv']}")
    train, test = split(ds, eval_lanes=d["eval_lanes"], seed=cfg["seed"])
    files = []
    for name, part in (("train", train), ("eval", test)):
        files.append(out / f"{name}.json")
        save_dataset(part, files[-1])
    files.append(_write_config(cfg, out))
    _write_manifest(out, "ingest", files, {"records": len(records), "skipped_rows": len(diags),
                                           "train": len(train), "eval": len(test)})
    print(f"ingest: {len(records)} records -> {len(train)} train / {len(test)} eval platoons")
    return EXIT_OK


def _train_one(cfg: dict, tc: TrainConfig, train: Dataset, val: list[Platoon], out: Path, resume: bool):
    out.mkdir(parents=True, exist_ok=True)
    params0 = _build("model", initial_params, tc.seed, train.platoons, tuple(cfg["model"]["layer_sizes"]))
    mode = cfg["train"]["mode"]
    if mode not in ("pair", "platoon"):
        raise UsageError(f"invalid train config: mode must be 'pair' or 'platoon', got {mode!r}")
    report = fit(params0, train.platoons, val, tc, mode=mode, checkpoint=out / "checkpoint.json", resume=resume)
    save_params(report.best_params, out / "model.json")
    save_params(report.params, out / "model_final.json")
    report.write_table(out / "train_loss.csv")
    return report, [out / "model.json", out / "model_final.json", out / "train_loss.csv", out / "checkpoint.json"]


def cmd_train(cfg: dict, args) -> int:
    if cfg["model"]["kind"] != "lstm":
        raise UsageError("only model.kind=lstm can be trained")
    out = _out_dir(args)
    train = _load(cfg["data"]["train"], "train")
    if not train.platoons:
        raise DataError("training dataset is empty")
    val = _load(cfg["data"]["val"], "val").platoons if cfg["data"]["val"] else []
    sweep = cfg["train"]["sweep"]
    if not sweep:
        report, files = _train_one(cfg, train_config(cfg), train, val, out, args.resume)
        files.append(_write_config(cfg, out))
        _write_manifest(out, "train", files, {"epochs": len(report.train_loss), "best_epoch": report.best_epoch})
        print(f"train: {len(report.train_loss)} epochs, best epoch {report.best_epoch} -> {out / 'model.json'}")
        return EXIT_OK
    test = _load(cfg["data"]["eval"], "eval").platoons
    rows, files = [], []
    for family in sweep:
        tc = train_config(cfg, family)
        report, fam_files = _train_one(cfg, tc, train, val, out / family, args.resume)
        files += fam_files
        m = MetricsReport.compute(test, generate_platoons(LstmModel(report.best_params), test))
        rows.append((family, m.mae, m.mmaae, report.best_epoch))
        print(f"sweep {family}: MAE {m.mae:.4f} MMaAE {m.mmaae:.4f}")
    table = out / "sweep.csv"
    with table.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["family", "mae", "mmaae", "best_epoch"])
        for fam, a, b, e in rows:
            w.writerow([fam, repr(a), repr(b), e])
    files += [table, _write_config(cfg, out)]
    _write_manifest(out, "train", files, {"families": len(rows)})
    return EXIT_OK


def cmd_generate(cfg: dict, args) -> int:
    model = load_model(cfg)
    out = _out_dir(args)
    actual = _load(cfg["data"]["eval"], "eval")
    gen = generate_platoons(model, actual.platoons)
    files = [out / "generated.json"]
    save_dataset(Dataset(gen, dict(actual.meta, generated_by=type(model).__name__)), files[0])
    (out / "trajectories").mkdir(exist_ok=True)
    for a, g in zip(actual.platoons, gen):
        path = out / "trajectories" / f"{_safe(a.platoon_id)}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vehicle", "t", "x", "v", "a", "x_actual", "v_actual", "a_actual"])
            times = a.trajectories[0].times
            for i, (tg, ta) in enumerate(zip(g.trajectories, a.trajectories), start=1):
                for k, t in enumerate(times):
                    w.writerow([i, repr(float(t)), repr(float(tg.x[k])), repr(float(tg.v[k])),
                                repr(float(tg.a[k])), repr(float(ta.x[k])), repr(float(ta.v[k])),
                                repr(float(ta.a[k]))])
        files.append(path)
    files.append(_write_config(cfg, out))
    _write_manifest(out, "generate", files, {"platoons": len(gen)})
    print(f"generate: {len(gen)} platoons -> {out}")
    return EXIT_OK


def cmd_evaluate(cfg: dict, args) -> int:
    out = _out_dir(args)
    actual = _load(cfg["data"]["eval"], "eval").platoons
    if cfg["eval"]["generated"] is None:
        raise UsageError("eval.generated is not set")
    generated = _load(cfg["eval"]["generated"], "generated").platoons
    by_id = {p.platoon_id: p for p in generated}
    missing = [p.platoon_id for p in actual if p.platoon_id not in by_id]
    if missing or len(by_id) != len(actual):
        raise DataError(f"generated file does not match the eval platoons (missing {missing[:3]})")
    generated = [by_id[p.platoon_id] for p in actual]
    for a, g in zip(actual, generated):
        if a.positions.shape != g.positions.shape:
            raise DataError(f"platoon {a.platoon_id}: shape {a.positions.shape} vs {g.positions.shape}")
    report = MetricsReport.compute(actual, generated)
    files = report.write(out, actual[0].dt, 0.0) if actual else []
    files.append(_write_config(cfg, out))
    _write_manifest(out, "evaluate", files, {"platoons": len(actual)})
    print(f"evaluate: MAE {report.mae:.4f} MMaAE {report.mmaae:.4f}")
    return EXIT_OK


def cmd_compare(cfg: dict, args) -> int:
    c = dict(cfg["compare"])
    seeds, variants = c.pop("seeds"), c.pop("variants")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"invalid compare config: unknown variants {unknown}; choose from {list(VARIANTS)}")
    protocol = _build("compare", Protocol, **dict(c, layer_sizes=tuple(c["layer_sizes"])))
    out = _out_dir(args)
    results = run_protocol(seeds, protocol, variants)
    table = out / "compare.csv"
    with table.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "variant", "mae", "mmaae", "best_epoch"])
        for seed, res in results.items():
            for name, r in res.items():
                w.writerow([seed, name, repr(r.mae), repr(r.mmaae), "" if r.report is None else r.report.best_epoch])
                print(f"seed {seed} {name}: MAE {r.mae:.4f} MMaAE {r.mmaae:.4f}")
    files = [table, _write_config(cfg, out)]
    _write_manifest(out, "compare", files, {"seeds": len(seeds), "variants": len(variants)})
    return EXIT_OK


def cmd_gradcheck(cfg: dict, args) -> int:
    g = cfg["gradcheck"]
    report = _build("gradcheck", run_gradcheck, trials=g["trials"], layer_sizes=tuple(g["layer_sizes"]),
                    n_steps=g["n_steps"], seed=cfg["seed"], feedback_gradient=g["feedback_gradient"],
                    fault=g["fault"])
    text = "\n".join(report.lines())
    print(text)
    if args.out:
        out = _out_dir(args)
        (out / "gradcheck.txt").write_text(text + "\n")
        _write_config(cfg, out)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_config(cfg: dict, args) -> int:
    text = yaml.safe_dump(cfg, sort_keys=True)
    if args.out:
        _write_config(cfg, _out_dir(args))
    sys.stdout.write(text)
    return EXIT_OK


def _safe(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in str(s))


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "generate": cmd_generate,
            "evaluate": cmd_evaluate, "compare": cmd_compare, "gradcheck": cmd_gradcheck, "config": cmd_config}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="platoon-gen", description="Platoon trajectory generation experiments.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--seed", type=int, help="overrides the configured seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config entry, e.g. train.epochs=5")
    parser.add_argument("--resume", action="store_true", help="continue training from the checkpoint in --out")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args.config, args.seed, args.set)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigurationError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
