"""Synthetic users, app-usage records and temporal drift.

Every user holds, for each intent, a preference simplex over the apps that
serve that intent. Labels are drawn from those preferences, optionally
blended toward a population-wide trend as time advances. The features a
device would see are derived from the user's habits (a short usage history
and a noisy affinity signal) and from the population's current app
popularity, which is where the trend shows up.
"""
from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from appsel_pfl.model import N_FEATURES, Batch, prepare_features
from appsel_pfl.seeding import rng_for

N_APPS = 8
APP_IDS = tuple(f"app{i}" for i in range(N_APPS))
# apps serving each intent
INTENT_APPS: tuple[tuple[int, ...], ...] = ((0, 1), (2, 3, 4), (1, 5, 6, 7), (0, 2, 3, 5, 6, 7))
HISTORY_LENGTH = 10
# uninformative context signals filling the reserved feature slots
N_SIGNALS = 12
# nuisance signals fill the remaining feature slots; they carry no label information
SIGNAL_SCALE = 0.25
# affinity is the preference relative to the user's favourite app for the intent
RELATIVE_AFFINITY = True
AFFINITY_NOISE = 0.05
TREND_MASS = 0.8
OS_VERSIONS = ("17.4", "17.5", "18.0")
OS_WEIGHTS = (0.2, 0.3, 0.5)
ASSET_VERSIONS = ("asset-1", "asset-2")
SCHEMA = "appsel-records"
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    preferences: tuple[np.ndarray, ...]
    engagement_rate: float
    os_version: str = OS_VERSIONS[-1]
    asset_version: str = ASSET_VERSIONS[0]


@dataclass(frozen=True)
class DriftSchedule:
    strength: float
    targets: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"drift strength must lie in [0, 1], got {self.strength}")


@dataclass(frozen=True)
class TrainingRecord:
    app_ids: tuple[str, ...]
    features: np.ndarray
    label: int
    os_version: str
    asset_version: str
    timestamp: float
    user_id: int = -1


@dataclass(frozen=True)
class Population:
    users: tuple[UserProfile, ...]
    drift: DriftSchedule
    # mean base preference per intent, over users
    popularity: tuple[np.ndarray, ...] = field(repr=False)


def generate_population(num_users: int, seed: int, concentration: float = 0.5,
                        intents: Sequence[Sequence[int]] = INTENT_APPS) -> list[UserProfile]:
    """Users with Dirichlet(concentration) habits; ``concentration=inf`` gives uniform ones."""
    if num_users < 1:
        raise ValueError("num_users must be at least 1")
    rng = rng_for(seed, "population")
    users = []
    for uid in range(num_users):
        prefs = []
        for apps in intents:
            k = len(apps)
            if np.isinf(concentration):
                prefs.append(np.full(k, 1.0 / k))
            else:
                p = rng.dirichlet(np.full(k, concentration))
                prefs.append(p / p.sum())
        rate = float(rng.gamma(2.0, 0.5))
        os_version = OS_VERSIONS[rng.choice(len(OS_VERSIONS), p=OS_WEIGHTS)]
        asset = ASSET_VERSIONS[rng.integers(len(ASSET_VERSIONS))]
        users.append(UserProfile(uid, tuple(prefs), rate, os_version, asset))
    return users


def make_drift(strength: float, seed: int,
               intents: Sequence[Sequence[int]] = INTENT_APPS) -> DriftSchedule:
    """Population-wide trend: each intent drifts toward one randomly chosen app."""
    rng = rng_for(seed, "drift")
    targets = []
    for apps in intents:
        k = len(apps)
        tgt = np.full(k, (1.0 - TREND_MASS) / (k - 1))
        tgt[rng.integers(k)] = TREND_MASS
        targets.append(tgt)
    return DriftSchedule(strength, tuple(targets))


def build_population(num_users: int, seed: int, drift_strength: float = 0.0,
                     concentration: float = 0.5) -> Population:
    users = generate_population(num_users, seed, concentration)
    drift = make_drift(drift_strength, seed)
    popularity = tuple(np.mean([u.preferences[i] for u in users], axis=0)
                       for i in range(len(INTENT_APPS)))
    return Population(tuple(users), drift, popularity)


def _blend(base: np.ndarray, target: np.ndarray, strength: float, t: float) -> np.ndarray:
    w = strength * t
    if w == 0.0:
        return base
    mixed = (1.0 - w) * base + w * target
    return mixed / mixed.sum()


def preferences_at(profile: UserProfile, schedule: DriftSchedule, t: float) -> tuple[np.ndarray, ...]:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return tuple(_blend(b, g, schedule.strength, t)
                 for b, g in zip(profile.preferences, schedule.targets))


def generate_records(profile: UserProfile, schedule: DriftSchedule, t, n: int, seed: int,
                     popularity: Sequence[np.ndarray] | None = None,
                     noiseless: bool = False) -> list[TrainingRecord]:
    """``n`` records for one user; ``t`` is a time in [0, 1] or one time per record."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    times = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    if popularity is None:
        popularity = profile.preferences
    rng = rng_for(seed, "records", profile.user_id)
    return [_one_record(profile, schedule, float(times[i]), popularity, rng, noiseless)
            for i in range(n)]


def _one_record(profile, schedule, t, popularity, rng, noiseless) -> TrainingRecord:
    intent = int(rng.integers(len(INTENT_APPS)))
    apps = INTENT_APPS[intent]
    k = len(apps)
    base = profile.preferences[intent]
    current = _blend(base, schedule.targets[intent], schedule.strength, t)
    pop = _blend(popularity[intent], schedule.targets[intent], schedule.strength, t)
    order = rng.permutation(k)
    label_slot = int(rng.choice(k, p=current))
    history = rng.choice(k, size=HISTORY_LENGTH, p=base)
    noise = np.zeros(k) if noiseless else rng.normal(0.0, AFFINITY_NOISE, size=k)
    aff = base / base.max() if RELATIVE_AFFINITY else base
    signals = SIGNAL_SCALE * rng.random((k, N_SIGNALS))

    candidates = []
    for slot in order:
        used = np.flatnonzero(history == slot)
        candidates.append({
            "app_id": APP_IDS[apps[slot]],
            "uses": int(used.size),
            "last_used": None if used.size == 0 else int(HISTORY_LENGTH - 1 - used[-1]),
            "affinity": float(aff[slot] + noise[slot]),
            "popularity": float(pop[slot]),
            "signals": signals[slot].tolist(),
        })
    feats = prepare_features({"history_length": HISTORY_LENGTH, "candidates": candidates})
    label = int(np.flatnonzero(order == label_slot)[0])
    return TrainingRecord(
        tuple(f.app_id for f in feats), np.stack([f.values for f in feats]), label,
        profile.os_version, profile.asset_version, t, profile.user_id)


def sample_records(population: Population, n: int, t_range: tuple[float, float],
                   seed: int, split: str) -> list[TrainingRecord]:
    """``n`` records from randomly chosen users with times uniform on ``t_range``."""
    rng = rng_for(seed, "split", split)
    users = rng.integers(len(population.users), size=n)
    times = rng.uniform(t_range[0], t_range[1], size=n)
    out = []
    for i in range(n):
        u = population.users[users[i]]
        sub = rng_for(seed, "split", split, i)
        out.append(_one_record(u, population.drift, float(times[i]), population.popularity,
                               sub, False))
    return out


@dataclass(frozen=True)
class DataConfig:
    num_users: int = 5000
    train_size: int = 20000
    valid_size: int = 4000
    drift_strength: float = 0.0
    concentration: float = 0.5
    seed: int = 0


SPLIT_TIMES = {
    "train_stale": (0.0, 0.5),
    "train_fresh": (0.5, 1.0),
    "valid_fresh": (0.8, 1.0),
    "valid_fixed": (0.0, 0.5),
}


def make_experiment_datasets(config: DataConfig) -> dict[str, list[TrainingRecord]]:
    pop = build_population(config.num_users, config.seed, config.drift_strength,
                           config.concentration)
    sizes = {"train_stale": config.train_size, "train_fresh": config.train_size,
             "valid_fresh": config.valid_size, "valid_fixed": config.valid_size}
    return {name: sample_records(pop, sizes[name], SPLIT_TIMES[name], config.seed, name)
            for name in SPLIT_TIMES}


def to_batch(records: Sequence[TrainingRecord]) -> Batch:
    return Batch.from_pairs([(r.features, r.label) for r in records], N_FEATURES)


def dataset_hash(records: Sequence[TrainingRecord]) -> str:
    import hashlib

    h = hashlib.sha256()
    for r in records:
        h.update(np.ascontiguousarray(r.features).tobytes())
        h.update(r.label.to_bytes(2, "little"))
    return h.hexdigest()[:16]


def write_records(records: Sequence[TrainingRecord], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": SCHEMA, "version": SCHEMA_VERSION}) + "\n")
        for r in records:
            fh.write(json.dumps({
                "candidates": list(r.app_ids),
                "features": r.features.tolist(),
                "label": r.label,
                "os_version": r.os_version,
                "asset_version": r.asset_version,
                "timestamp": r.timestamp,
                "user_id": r.user_id,
            }) + "\n")


def read_records(path: str | Path) -> list[TrainingRecord]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != SCHEMA or header.get("version") != SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported dataset header {header}")
        out = []
        for lineno, line in enumerate(fh, start=2):
            try:
                d = json.loads(line)
                feats = np.asarray(d["features"], dtype=np.float64)
                out.append(TrainingRecord(tuple(d["candidates"]), feats, int(d["label"]),
                                          d["os_version"], d["asset_version"],
                                          float(d["timestamp"]), int(d.get("user_id", -1))))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad record ({exc})") from exc
    return out
