"""Federated statistics: DP histograms over devices and the PFL launch gate.

Each device contributes a one-hot indicator (or nothing, when it fails the
query filter), so the L2 sensitivity of the summed histogram is exactly 1 and
Gaussian noise of standard deviation ``noise_scale`` gives the usual Gaussian
mechanism guarantee.
"""
from __future__ import annotations

from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from appsel_pfl.engine import ANY_DEVICE, DeviceShard, FederatedPopulation, TaskFilter
from appsel_pfl.seeding import rng_for
from appsel_pfl.synth import APP_IDS, OS_VERSIONS

COUNT_BUCKETS = ("0", "1", "2-5", "6+")
BUCKET_KEYS = ("label", "record_count", "os_version")
SAFETY_FACTOR = 1.2


@dataclass(frozen=True)
class HistogramQuery:
    key: str
    task_filter: TaskFilter = ANY_DEVICE
    noise_scale: float = 0.0

    def __post_init__(self):
        if self.key not in BUCKET_KEYS:
            raise ValueError(f"bucket key must be one of {BUCKET_KEYS}, got {self.key!r}")
        if not self.noise_scale >= 0:
            raise ValueError("noise_scale must be nonnegative")

    @property
    def buckets(self) -> tuple[str, ...]:
        if self.key == "label":
            return APP_IDS
        if self.key == "record_count":
            return COUNT_BUCKETS
        return OS_VERSIONS


@dataclass(frozen=True)
class NoisyHistogram:
    buckets: tuple[str, ...]
    counts: np.ndarray
    sensitivity: float = 1.0

    def rows(self) -> list[dict]:
        return [{"bucket": b, "noisy_count": float(c)} for b, c in zip(self.buckets, self.counts)]


@dataclass(frozen=True)
class EligibilityReport:
    noisy_count: float
    required: float
    feasible: bool


def count_bucket(n: int) -> str:
    if n <= 1:
        return COUNT_BUCKETS[n]
    return "2-5" if n <= 5 else "6+"


def _label_of(shard: DeviceShard, population: FederatedPopulation) -> str:
    # the device's most frequent label app; ties go to the smallest id
    labels = Counter()
    for i in shard.indices:
        rec = population.records[int(i)]
        labels[rec.app_ids[rec.label]] += 1
    top = max(labels.values())
    return min(app for app, c in labels.items() if c == top)


def device_contribution(shard: DeviceShard, query: HistogramQuery,
                        population: FederatedPopulation | None = None) -> np.ndarray:
    """One-hot over ``query.buckets``, or zeros when the shard fails the filter.

    Label queries need ``population`` to look the device's records up; a device
    with no records has no label and contributes zeros.
    """
    out = np.zeros(len(query.buckets))
    if not query.task_filter.matches(shard.os_version, shard.asset_version):
        return out
    if query.key == "record_count":
        bucket = count_bucket(shard.n_records)
    elif query.key == "os_version":
        bucket = shard.os_version
    else:
        if shard.n_records == 0:
            return out
        if population is None:
            raise ValueError("label queries need the population's records")
        bucket = _label_of(shard, population)
    out[query.buckets.index(bucket)] = 1.0
    return out


def aggregate_histogram(contributions: Sequence[np.ndarray], noise_scale: float, seed: int,
                        buckets: Sequence[str] | None = None) -> NoisyHistogram:
    if len(contributions) == 0:
        raise ValueError("no contributions to aggregate")
    stacked = np.asarray(contributions, dtype=np.float64)
    if stacked.ndim != 2:
        raise ValueError("contributions must be congruent vectors")
    if not noise_scale >= 0:
        raise ValueError("noise_scale must be nonnegative")
    counts = stacked.sum(axis=0)
    if noise_scale > 0:
        counts = counts + rng_for(seed, "fedstats").normal(0.0, noise_scale, size=counts.shape)
    if buckets is None:
        buckets = tuple(str(i) for i in range(counts.size))
    return NoisyHistogram(tuple(buckets), counts)


def run_query(population: FederatedPopulation, query: HistogramQuery, seed: int) -> NoisyHistogram:
    contribs = [device_contribution(s, query, population) for s in population.shards]
    return aggregate_histogram(contribs, query.noise_scale, seed, query.buckets)


def is_feasible(noisy_count: float, devices_per_iteration: int,
                safety_factor: float = SAFETY_FACTOR) -> bool:
    """``noisy_count >= devices_per_iteration * safety_factor``.

    The product is rounded to 9 decimals so that, e.g., 5 x 1.2 is exactly 6.
    """
    return noisy_count >= round(devices_per_iteration * safety_factor, 9)


def count_eligible_devices(population: FederatedPopulation, task_filter: TaskFilter = ANY_DEVICE,
                           noise_scale: float = 0.0, seed: int = 0,
                           devices_per_iteration: int = 1,
                           safety_factor: float = SAFETY_FACTOR) -> EligibilityReport:
    if not population.shards:
        raise ValueError("population has no devices")
    true = float(sum(1 for s in population.shards if s.eligible(task_filter)))
    noisy = aggregate_histogram([[true]], noise_scale, seed).counts[0]
    required = round(devices_per_iteration * safety_factor, 9)
    return EligibilityReport(float(noisy), required,
                             is_feasible(noisy, devices_per_iteration, safety_factor))
