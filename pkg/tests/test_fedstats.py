from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from appsel_pfl import engine, fedstats, synth
from appsel_pfl.engine import DeviceShard, FederatedPopulation, TaskFilter
from appsel_pfl.fedstats import HistogramQuery
from appsel_pfl.model import Batch


def _shard(i, n, os="18.0", asset="asset-1"):
    return DeviceShard(i, np.arange(n, dtype=np.int64), os, asset)


@pytest.fixture(scope="module")
def thousand():
    ds = synth.make_experiment_datasets(synth.DataConfig(num_users=300, train_size=1000,
                                                         valid_size=10, seed=4))
    pop = engine.partition_population(ds["train_stale"], 1.0, seed=4)
    return FederatedPopulation(pop.batch, pop.shards[:1000], pop.records)


def test_contribution_examples():
    q = HistogramQuery("record_count")
    assert q.buckets[int(np.argmax(fedstats.device_contribution(_shard(0, 3), q)))] == "2-5"
    assert q.buckets[int(np.argmax(fedstats.device_contribution(_shard(0, 0), q)))] == "0"
    only_old = HistogramQuery("record_count", TaskFilter(os_versions=frozenset({"17.4"})))
    assert not fedstats.device_contribution(_shard(0, 3), only_old).any()
    assert [fedstats.count_bucket(n) for n in (0, 1, 2, 5, 6, 40)] == ["0", "1", "2-5", "2-5",
                                                                        "6+", "6+"]


def test_aggregate_examples():
    e1, e2 = np.eye(4)[0], np.eye(4)[1]
    assert fedstats.aggregate_histogram([e1, e1, e2], 0.0, 0).counts.tolist() == [2, 1, 0, 0]
    assert not fedstats.aggregate_histogram([np.zeros(4)] * 3, 0.0, 0).counts.any()
    with pytest.raises(ValueError):
        fedstats.aggregate_histogram([], 0.0, 0)


def test_noise_variance_monte_carlo():
    zeros = [np.zeros(1000)]
    draws = np.concatenate([fedstats.aggregate_histogram(zeros, 10.0, s).counts
                            for s in range(100)])
    assert draws.size == 10 ** 5
    assert abs(draws.var() / 100.0 - 1) < 0.05


@pytest.mark.parametrize("key", fedstats.BUCKET_KEYS)
def test_zero_noise_equals_brute_force(thousand, key):
    pop = thousand
    assert len(pop.shards) == 1000
    flt = TaskFilter(os_versions=frozenset({"17.5", "18.0"}))
    q = HistogramQuery(key, flt)
    hist = fedstats.run_query(pop, q, seed=0)
    want = Counter()
    for s in pop.shards:
        if s.os_version not in flt.os_versions:
            continue
        if key == "record_count":
            want[fedstats.count_bucket(s.n_records)] += 1
        elif key == "os_version":
            want[s.os_version] += 1
        elif s.n_records:
            labels = Counter(pop.records[i].app_ids[pop.records[i].label] for i in s.indices)
            top = max(labels.values())
            want[min(a for a, c in labels.items() if c == top)] += 1
    assert hist.counts.tolist() == [float(want[b]) for b in q.buckets]
    assert all(np.linalg.norm(fedstats.device_contribution(s, q, pop)) <= 1 for s in pop.shards)


def test_rows_keep_negative_counts():
    hist = fedstats.aggregate_histogram([np.zeros(3)], 50.0, 1, ("a", "b", "c"))
    rows = hist.rows()
    assert [r["bucket"] for r in rows] == ["a", "b", "c"]
    assert any(r["noisy_count"] < 0 for r in rows)


def _pop(n_eligible, total=10):
    shards = [_shard(i, 1 if i < n_eligible else 0) for i in range(total)]
    return FederatedPopulation(Batch.from_pairs([(np.zeros((2, 16)), 0)]), shards)


def test_eligibility_examples():
    rep = fedstats.count_eligible_devices(_pop(6), devices_per_iteration=5)
    assert rep.noisy_count == 6 and rep.required == 6 and rep.feasible
    rep = fedstats.count_eligible_devices(_pop(5), devices_per_iteration=5)
    assert rep.noisy_count == 5 and not rep.feasible


@given(st.integers(0, 30), st.integers(0, 30), st.integers(1, 20))
def test_verdict_is_monotone(a, b, dpi):
    lo, hi = sorted((a, b))
    if fedstats.is_feasible(lo, dpi):
        assert fedstats.is_feasible(hi, dpi)


def test_query_validation():
    with pytest.raises(ValueError):
        HistogramQuery("colour")
    with pytest.raises(ValueError):
        HistogramQuery("label", noise_scale=-1.0)
    with pytest.raises(ValueError):
        fedstats.count_eligible_devices(FederatedPopulation(Batch.from_pairs(
            [(np.zeros((2, 16)), 0)]), []))
