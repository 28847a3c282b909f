"""Trajectory datasets: NGSIM-style CSV ingestion, platoon extraction, resampling and synthesis."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Platoon, Trajectory, VehicleState, features, integrate_step, platoon_from_arrays
from .models import IdmParams, equilibrium_gap, idm_acceleration

log = logging.getLogger(__name__)

FEET = 0.3048
DATASET_FORMAT = "platoon-gen-dataset"
DATASET_VERSION = 1


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class RawRecord:
    vehicle_id: int
    frame_time: float
    lane_id: int
    position: float
    velocity: float
    acceleration: float
    preceding_vehicle_id: int = 0


# header aliases, compared after lower-casing and dropping non-alphanumerics
_COLUMNS = {
    "vehicle_id": ("vehicleid", "vehicle", "id"),
    "frame_time": ("frametime", "time", "times", "t"),
    "frame_id": ("frameid", "frame"),
    "lane_id": ("laneid", "lane"),
    "position": ("position", "localy", "pos", "y"),
    "velocity": ("velocity", "vvel", "speed", "v"),
    "acceleration": ("acceleration", "vacc", "acc", "a"),
    "preceding_vehicle_id": ("precedingvehicleid", "preceding", "precedingid", "leaderid", "leader"),
}


def _norm(name: str) -> str:
    return re.sub(r"[^a-z0-9]", "", name.lower())


def _resolve_header(header: Sequence[str]) -> dict[str, int]:
    normed = [_norm(h) for h in header]
    cols = {}
    for key, aliases in _COLUMNS.items():
        for alias in aliases:
            if alias in normed:
                cols[key] = normed.index(alias)
                break
    missing = [k for k in ("vehicle_id", "lane_id", "position", "velocity", "preceding_vehicle_id")
               if k not in cols]
    if "frame_time" not in cols and "frame_id" not in cols:
        missing.append("frame_time")
    if missing:
        raise DataError(f"header {list(header)} lacks required columns: {', '.join(missing)}")
    return cols


def parse_trajectory_csv(path, unit: str = "meters", frame_dt: float = 0.1,
                         diagnostics: list[str] | None = None) -> list[RawRecord]:
    """Read a comma-separated trajectory file into :class:`RawRecord` objects.

    Columns are matched by name, so extra columns are ignored. When only a
    frame index is present, time is ``frame * frame_dt``. Lengths and
    speeds are converted from feet when ``unit='feet'``. Rows with missing
    or unparsable mandatory fields are skipped; their line numbers go to
    the log and, if given, to ``diagnostics``.
    """
    if unit not in ("meters", "feet"):
        raise DataError(f"unit must be 'meters' or 'feet', not {unit!r}")
    scale = FEET if unit == "feet" else 1.0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, no header") from None
        cols = _resolve_header(header)
        rows, skipped = [], 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if "frame_time" in cols:
                    t = float(row[cols["frame_time"]])
                else:
                    t = float(row[cols["frame_id"]]) * frame_dt
                acc_raw = row[cols["acceleration"]].strip() if "acceleration" in cols else ""
                rec = dict(
                    vehicle_id=int(float(row[cols["vehicle_id"]])),
                    frame_time=t,
                    lane_id=int(float(row[cols["lane_id"]])),
                    position=float(row[cols["position"]]) * scale,
                    velocity=float(row[cols["velocity"]]) * scale,
                    acceleration=float(acc_raw) * scale if acc_raw else None,
                    preceding_vehicle_id=int(float(row[cols["preceding_vehicle_id"]])),
                )
                if rec["frame_time"] < 0 or rec["velocity"] < 0 or not math.isfinite(rec["position"]):
                    raise ValueError("negative time/velocity or non-finite position")
            except (ValueError, IndexError) as exc:
                skipped += 1
                msg = f"{path}:{lineno}: skipped row ({exc})"
                log.warning(msg)
                if diagnostics is not None:
                    diagnostics.append(msg)
                continue
            rows.append(rec)
    if skipped:
        log.warning("%s: %d malformed rows skipped", path, skipped)
    if "acceleration" not in cols or any(r["acceleration"] is None for r in rows):
        _derive_acceleration(rows)
    return [RawRecord(**r) for r in rows]


def _derive_acceleration(rows: list[dict]) -> None:
    by_vehicle = defaultdict(list)
    for r in rows:
        by_vehicle[r["vehicle_id"]].append(r)
    for recs in by_vehicle.values():
        recs.sort(key=lambda r: r["frame_time"])
        t = np.array([r["frame_time"] for r in recs])
        v = np.array([r["velocity"] for r in recs])
        acc = np.gradient(v, t) if len(recs) > 1 else np.zeros(1)
        for r, a in zip(recs, acc):
            if r["acceleration"] is None:
                r["acceleration"] = float(a)


def write_trajectory_csv(records: Iterable[RawRecord], path) -> None:
    names = list(RawRecord.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for r in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, n) for n in names)])


# -- resampling ----------------------------------------------------------------

def _interp(times, x, v, grid):
    times = np.asarray(times, float)
    if grid[0] < times[0] - 1e-9 or grid[-1] > times[-1] + 1e-9:
        raise DataError(f"output grid [{grid[0]}, {grid[-1]}] outside input span [{times[0]}, {times[-1]}]")
    return np.interp(grid, times, x), np.interp(grid, times, v)


def _fd_acceleration(v: np.ndarray, dt: float) -> np.ndarray:
    a = np.zeros_like(v)
    if len(v) > 1:
        a[1:] = np.diff(v) / dt
        a[0] = a[1]
    return a


def resample(traj: Trajectory, dt_out: float = 0.5) -> Trajectory:
    """Linearly interpolate position and speed onto a ``dt_out`` grid.

    Acceleration is recomputed as the backward difference of the
    resampled speed. A trajectory already on the requested grid is
    returned unchanged.
    """
    if dt_out <= 0:
        raise DataError("dt_out must be positive")
    if math.isclose(traj.dt, dt_out, rel_tol=0, abs_tol=1e-12):
        return Trajectory(traj.vehicle_id, traj.t0, traj.dt, traj.x.copy(), traj.v.copy(), traj.a.copy())
    span = traj.dt * (len(traj) - 1)
    n_out = int(math.floor(span / dt_out + 1e-9)) + 1
    grid = traj.t0 + dt_out * np.arange(n_out)
    x, v = _interp(traj.times, traj.x, traj.v, grid)
    return Trajectory(traj.vehicle_id, traj.t0, dt_out, x, v, _fd_acceleration(v, dt_out))


# -- datasets ------------------------------------------------------------------

@dataclass
class Dataset:
    platoons: list[Platoon]
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.platoons)

    def __iter__(self):
        return iter(self.platoons)


def save_dataset(ds: Dataset, path) -> None:
    doc = {"format": DATASET_FORMAT, "format_version": DATASET_VERSION, "meta": ds.meta, "platoons": []}
    for p in ds.platoons:
        doc["platoons"].append({
            "platoon_id": p.platoon_id, "lane": p.lane, "t0": p.t0, "dt": p.dt,
            "vehicle_ids": [tr.vehicle_id for tr in p.trajectories],
            "x": p.array("x").tolist(), "v": p.array("v").tolist(), "a": p.array("a").tolist(),
            "meta": p.meta,
        })
    Path(path).write_text(json.dumps(doc) + "\n")


def load_dataset(path) -> Dataset:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if doc.get("format") != DATASET_FORMAT:
        raise DataError(f"{path} is not a {DATASET_FORMAT} file")
    platoons = [platoon_from_arrays(d["platoon_id"], d["t0"], d["dt"], d["x"], d["v"], d["a"],
                                    d["vehicle_ids"], d.get("lane"), d.get("meta"))
                for d in doc["platoons"]]
    return Dataset(platoons, doc.get("meta", {}))


# -- platoon extraction ----------------------------------------------------------

def _frame_step(records: Sequence[RawRecord]) -> float:
    by_vehicle = defaultdict(list)
    for r in records:
        by_vehicle[r.vehicle_id].append(r.frame_time)
    diffs = [d for ts in by_vehicle.values() for d in np.diff(sorted(ts)) if d > 1e-9]
    return float(min(diffs)) if diffs else 1.0


def extract_platoons(records: Sequence[RawRecord], min_vehicles: int = 5, min_duration: float = 20.0,
                     lanes: Iterable[int] | None = None, dt_out: float = 0.5) -> Dataset:
    """Find same-lane following chains and cut them into fixed studied periods.

    A chain is a head vehicle plus ``min_vehicles - 1`` successive
    followers linked by ``preceding_vehicle_id`` with everyone in the
    head's lane. Every maximal run of consecutive frames with an unchanged
    chain is cut, from its start, into disjoint windows of
    ``min_duration`` seconds, each resampled to ``dt_out``.
    """
    lane_set = set(lanes) if lanes is not None else None
    recs = [r for r in records if lane_set is None or r.lane_id in lane_set]
    meta = dict(source="records", min_vehicles=min_vehicles, min_duration=min_duration,
                lanes=sorted(lane_set) if lane_set is not None else None, dt=dt_out)
    if not recs:
        return Dataset([], meta)
    frame_dt = _frame_step(recs)
    by_frame: dict[int, dict[int, RawRecord]] = defaultdict(dict)
    for r in recs:
        by_frame[int(round(r.frame_time / frame_dt))][r.vehicle_id] = r

    chain_frames: dict[tuple, list[int]] = defaultdict(list)
    for f, present in by_frame.items():
        follower = {}
        for vid, r in present.items():
            lead = present.get(r.preceding_vehicle_id)
            if lead is not None and lead.lane_id == r.lane_id:
                follower[r.preceding_vehicle_id] = vid
        for head, r in present.items():
            chain = [head]
            while len(chain) < min_vehicles and chain[-1] in follower:
                chain.append(follower[chain[-1]])
            if len(chain) == min_vehicles:
                chain_frames[(r.lane_id, tuple(chain))].append(f)

    window_frames = int(round(min_duration / frame_dt))
    n_out = int(round(min_duration / dt_out))
    platoons = []
    for (lane, chain), frames in sorted(chain_frames.items()):
        frames.sort()
        runs, start = [], 0
        for j in range(1, len(frames) + 1):
            if j == len(frames) or frames[j] != frames[j - 1] + 1:
                runs.append(frames[start:j])
                start = j
        for run in runs:
            for w in range(len(run) // window_frames):
                win = run[w * window_frames:(w + 1) * window_frames]
                t_start = by_frame[win[0]][chain[0]].frame_time
                grid = t_start + dt_out * np.arange(n_out)
                xs, vs, as_ = [], [], []
                for vid in chain:
                    times = np.array([by_frame[f][vid].frame_time for f in win])
                    x, v = _interp(times, [by_frame[f][vid].position for f in win],
                                   [by_frame[f][vid].velocity for f in win], grid)
                    xs.append(x)
                    vs.append(v)
                    as_.append(_fd_acceleration(v, dt_out))
                try:
                    platoons.append(platoon_from_arrays(
                        f"L{lane}-{chain[0]}-{t_start:g}", float(grid[0]), dt_out, xs, vs, as_,
                        [str(c) for c in chain], lane=lane))
                except ValueError as exc:
                    log.warning("dropping chain %s at %gs: %s", chain, t_start, exc)
    return Dataset(platoons, meta)


def check_filters(ds: Dataset) -> bool:
    """Re-check that every platoon satisfies the recorded extraction filters."""
    m = ds.meta
    for p in ds.platoons:
        if len(p) < m.get("min_vehicles", 2):
            return False
        if p.n_steps * p.dt < m.get("min_duration", 0) - 1e-9:
            return False
        if m.get("lanes") is not None and p.lane not in m["lanes"]:
            return False
    return True


def split(ds: Dataset, eval_fraction: float | None = None, seed: int = 0,
          eval_lanes: Iterable[int] | None = None) -> tuple[Dataset, Dataset]:
    """Disjoint train/eval split, by lane when ``eval_lanes`` is given, else by fraction."""
    if not ds.platoons:
        raise DataError("cannot split an empty dataset")
    if eval_lanes is not None:
        lanes = set(eval_lanes)
        is_eval = [p.lane in lanes for p in ds.platoons]
    else:
        frac = 0.0 if eval_fraction is None else eval_fraction
        if not 0.0 <= frac <= 1.0:
            raise DataError("eval_fraction must lie in [0, 1]")
        n_eval = int(round(frac * len(ds)))
        chosen = set(np.random.default_rng(seed).permutation(len(ds))[:n_eval].tolist())
        is_eval = [j in chosen for j in range(len(ds))]
    train = [p for p, e in zip(ds.platoons, is_eval) if not e]
    test = [p for p, e in zip(ds.platoons, is_eval) if e]
    for name, part in (("train", train), ("eval", test)):
        if not part:
            log.warning("split leaves the %s side empty", name)
    return Dataset(train, dict(ds.meta, split="train")), Dataset(test, dict(ds.meta, split="eval"))


# -- synthesis -------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    """Piece of a leader speed profile.

    ``hold`` keeps ``speed``; ``ramp`` moves linearly from the previous
    speed to ``speed``; ``oscillation`` is ``speed + amplitude sin(2 pi t / period)``.
    """

    kind: str
    duration: float
    speed: float
    amplitude: float = 0.0
    period: float = 60.0

    def __post_init__(self):
        if self.kind not in ("hold", "ramp", "oscillation"):
            raise DataError(f"unknown profile segment kind {self.kind!r}")
        if self.duration <= 0:
            raise DataError("segment duration must be positive")
        if self.kind == "oscillation" and self.period <= 0:
            raise DataError("oscillation period must be positive")


def _default_profile() -> tuple[Segment, ...]:
    return (Segment("oscillation", 300.0, 13.0, 6.0, 40.0),)


@dataclass(frozen=True)
class SynthConfig:
    idm: IdmParams = field(default_factory=IdmParams)
    profile: tuple[Segment, ...] = field(default_factory=_default_profile)
    n_platoons: int = 240
    platoon_size: int = 5
    duration: float = 20.0
    warmup: float = 20.0
    dt: float = 0.5
    jitter: float = 0.2
    profile_variation: float = 0.25
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.platoon_size < 2:
            raise DataError("platoon_size must be >= 2")
        if self.noise_std < 0:
            raise DataError("noise_std must be non-negative")
        if self.dt <= 0 or self.duration <= 0 or self.warmup < 0:
            raise DataError("dt and duration must be positive, warmup non-negative")
        if not 0 <= self.jitter < 1 or not 0 <= self.profile_variation < 1:
            raise DataError("jitter and profile_variation must lie in [0, 1)")
        if not self.profile:
            raise DataError("profile needs at least one segment")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profile"] = [asdict(s) for s in self.profile]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "idm" in d and isinstance(d["idm"], dict):
            d["idm"] = IdmParams(**d["idm"])
        if "profile" in d:
            d["profile"] = tuple(Segment(**s) if isinstance(s, dict) else s for s in d["profile"])
        return cls(**d)


def leader_speed(profile: Sequence[Segment], times: np.ndarray, speed_scale: float = 1.0,
                 amp_scale: float = 1.0, phase: float = 0.0) -> np.ndarray:
    """Evaluate a piecewise speed profile; the last segment extends indefinitely."""
    out = np.empty_like(times, dtype=float)
    seg_start, prev_speed = 0.0, profile[0].speed * speed_scale
    remaining = np.ones(times.shape, dtype=bool)
    for j, seg in enumerate(profile):
        last = j == len(profile) - 1
        sel = remaining & ((times < seg_start + seg.duration) | last)
        tau = times[sel] - seg_start
        target = seg.speed * speed_scale
        if seg.kind == "hold":
            out[sel] = target
        elif seg.kind == "ramp":
            out[sel] = prev_speed + (target - prev_speed) * np.clip(tau / seg.duration, 0, 1)
        else:
            out[sel] = target + seg.amplitude * amp_scale * np.sin(2 * np.pi * (tau + phase) / seg.period)
        remaining &= ~sel
        prev_speed = target if seg.kind != "oscillation" else out[sel][-1] if sel.any() else target
        seg_start += seg.duration
    return out


def simulate_idm_platoon(leader_v: np.ndarray, params: Sequence[IdmParams], dt: float, x0: float = 0.0):
    """Closed-loop IDM platoon behind a leader with speed series ``leader_v``.

    Followers start at their own equilibrium gap for the leader's initial
    speed. Returns (x, v, a) arrays of shape (I, T).
    """
    n_steps = len(leader_v)
    n_veh = len(params) + 1
    X, V, A = (np.zeros((n_veh, n_steps)) for _ in range(3))
    V[0] = leader_v
    A[0, 1:] = np.diff(leader_v) / dt
    X[0, 0] = x0
    for t in range(1, n_steps):
        X[0, t] = X[0, t - 1] + V[0, t] * dt
    for i, p in enumerate(params, start=1):
        X[i, 0] = X[i - 1, 0] - equilibrium_gap(min(V[i - 1, 0], 0.999 * p.v0), p)
        V[i, 0] = V[i - 1, 0]
    for t in range(n_steps - 1):
        for i, p in enumerate(params, start=1):
            s_f = VehicleState(X[i, t], V[i, t], A[i, t])
            s_l = VehicleState(X[i - 1, t], V[i - 1, t], A[i - 1, t])
            nxt = integrate_step(s_f, idm_acceleration(features(s_f, s_l), p), dt)
            X[i, t + 1], V[i, t + 1], A[i, t + 1] = nxt.x, nxt.v, nxt.a
    return X, V, A


def synthesize(cfg: SynthConfig) -> Dataset:
    """IDM-driven platoons behind randomised leader profiles.

    Each platoon draws its own leader speed/amplitude scaling, profile
    phase and per-follower IDM parameter jitter from a seed keyed on
    ``(cfg.seed, platoon index)``. Position noise, if any, is added to the
    stored positions only after simulation.
    """
    n_warm = int(round(cfg.warmup / cfg.dt))
    n_keep = int(round(cfg.duration / cfg.dt))
    total = n_warm + n_keep
    times = cfg.dt * np.arange(total)
    profile_len = sum(s.duration for s in cfg.profile)
    jitter_names = ("a_max", "b", "v0", "g_jam", "t_headway")
    platoons = []
    for n in range(cfg.n_platoons):
        rng = np.random.default_rng([cfg.seed, n])
        var = cfg.profile_variation
        speed_scale = 1 + var * rng.uniform(-1, 1)
        amp_scale = 1 + var * rng.uniform(-1, 1)
        offset = rng.uniform(0, max(profile_len - total * cfg.dt, 0.0))
        phase = rng.uniform(0, max(s.period for s in cfg.profile))
        v_lead = leader_speed(cfg.profile, times + offset, speed_scale, amp_scale, phase)
        if np.any(v_lead < 0):
            raise DataError(f"leader profile reaches negative speed {v_lead.min():.3g} m/s")
        params = [cfg.idm.scaled({k: 1 + cfg.jitter * rng.uniform(-1, 1) for k in jitter_names})
                  for _ in range(cfg.platoon_size - 1)]
        X, V, A = simulate_idm_platoon(v_lead, params, cfg.dt)
        X, V, A = X[:, n_warm:], V[:, n_warm:], A[:, n_warm:]
        if cfg.noise_std > 0:
            X = X + rng.normal(0.0, cfg.noise_std, size=X.shape)
        platoons.append(platoon_from_arrays(
            f"syn{cfg.seed}-{n:04d}", 0.0, cfg.dt, X, V, A, lane=None,
            meta={"idm": [asdict(p) for p in params]}))
    meta = dict(source="synthetic", synth=cfg.to_dict(), min_vehicles=cfg.platoon_size,
                min_duration=cfg.duration, lanes=None, dt=cfg.dt)
    return Dataset(platoons, meta)
