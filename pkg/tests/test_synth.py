from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2_contingency

from appsel_pfl import synth
from appsel_pfl.synth import APP_IDS, DataConfig, DriftSchedule, UserProfile


def _profile(prefs):
    return UserProfile(0, tuple(np.asarray(p, dtype=float) for p in prefs), 1.0)


def test_population_is_seeded():
    a = synth.generate_population(50, 4)
    b = synth.generate_population(50, 4)
    assert all(np.array_equal(x, y) for u, v in zip(a, b) for x, y in zip(u.preferences, v.preferences))
    c = synth.generate_population(50, 5)
    assert not np.array_equal(a[0].preferences[0], c[0].preferences[0])


def test_preferences_are_simplices_and_skewed():
    users = synth.generate_population(1000, 0)
    for u in users:
        for p in u.preferences:
            assert abs(p.sum() - 1) <= 1e-9 and np.all(p >= 0)
    top = np.mean([p.max() for u in users for p in u.preferences])
    assert top > 0.5
    with pytest.raises(ValueError):
        synth.generate_population(0, 0)


def test_infinite_concentration_is_uniform():
    for u in synth.generate_population(5, 0, concentration=np.inf):
        for p in u.preferences:
            assert np.allclose(p, 1 / len(p))


def test_preferences_at_examples():
    base, tgt = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    prof = _profile([base])
    sched = DriftSchedule(0.5, (tgt,))
    assert np.allclose(synth.preferences_at(prof, sched, 1.0)[0], [0.5, 0.5])
    assert synth.preferences_at(prof, sched, 0.0)[0] is base
    assert np.array_equal(synth.preferences_at(prof, DriftSchedule(1.0, (tgt,)), 1.0)[0], tgt)
    still = DriftSchedule(0.0, (tgt,))
    for t in (0.0, 0.3, 1.0):
        assert np.array_equal(synth.preferences_at(prof, still, t)[0], base)
    with pytest.raises(ValueError):
        synth.preferences_at(prof, sched, 1.5)
    with pytest.raises(ValueError):
        DriftSchedule(1.2, (tgt,))


@settings(max_examples=50)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.integers(0, 1000))
def test_drift_is_lipschitz_and_stays_on_simplex(lam, t1, t2, seed):
    rng = np.random.default_rng(seed)
    base, tgt = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
    prof, sched = _profile([base]), DriftSchedule(lam, (tgt,))
    p1 = synth.preferences_at(prof, sched, t1)[0]
    p2 = synth.preferences_at(prof, sched, t2)[0]
    assert abs(p1.sum() - 1) <= 1e-9
    bound = lam * np.abs(tgt - base).sum() * abs(t1 - t2)
    assert np.abs(p1 - p2).sum() <= bound + 1e-12


def test_generate_records_examples():
    users = synth.generate_population(3, 1)
    sched = synth.make_drift(0.0, 1)
    assert synth.generate_records(users[0], sched, 0.2, 0, seed=1) == []
    a = synth.generate_records(users[0], sched, 0.2, 20, seed=1)
    b = synth.generate_records(users[0], sched, 0.2, 20, seed=1)
    assert [(r.features.tobytes(), r.label) for r in a] == [(r.features.tobytes(), r.label) for r in b]
    for r in a:
        assert 0 <= r.label < len(r.app_ids) == r.features.shape[0]
        assert r.features.shape[1] == synth.N_FEATURES
    with pytest.raises(ValueError):
        synth.generate_records(users[0], sched, 0.2, -1, seed=1)


def test_peaked_preference_dominates_labels():
    prefs = []
    for apps in synth.INTENT_APPS:
        p = np.full(len(apps), 0.01 / (len(apps) - 1))
        p[0] = 0.99
        prefs.append(p)
    prof = _profile(prefs)
    recs = synth.generate_records(prof, synth.make_drift(0.0, 0), 0.0, 100, seed=3, noiseless=True)
    top = {APP_IDS[apps[0]] for apps in synth.INTENT_APPS}
    hits = sum(r.app_ids[r.label] in top for r in recs)
    assert hits >= 95


def test_splits_sizes_and_determinism():
    cfg = DataConfig(num_users=100, train_size=300, valid_size=120, seed=2)
    a = synth.make_experiment_datasets(cfg)
    b = synth.make_experiment_datasets(cfg)
    assert {k: len(v) for k, v in a.items()} == {"train_stale": 300, "train_fresh": 300,
                                                 "valid_fresh": 120, "valid_fixed": 120}
    assert all(synth.dataset_hash(a[k]) == synth.dataset_hash(b[k]) for k in a)
    assert len({synth.dataset_hash(v) for v in a.values()}) == 4
    for name, (lo, hi) in synth.SPLIT_TIMES.items():
        assert all(lo <= r.timestamp <= hi for r in a[name])


def _label_counts(records):
    c = Counter(r.app_ids[r.label] for r in records)
    return [c[a] for a in APP_IDS]


def test_stale_and_fresh_are_exchangeable_without_drift():
    ds = synth.make_experiment_datasets(DataConfig(num_users=500, train_size=4000,
                                                   valid_size=10, seed=7))
    table = np.array([_label_counts(ds["train_stale"]), _label_counts(ds["train_fresh"])])
    table = table[:, table.sum(axis=0) > 0]
    assert chi2_contingency(table).pvalue > 0.01


def test_drift_shifts_fresh_labels():
    ds = synth.make_experiment_datasets(DataConfig(num_users=500, train_size=4000,
                                                   valid_size=10, seed=7, drift_strength=0.8))
    table = np.array([_label_counts(ds["train_stale"]), _label_counts(ds["train_fresh"])])
    table = table[:, table.sum(axis=0) > 0]
    assert chi2_contingency(table).pvalue < 0.01


def test_record_files_round_trip(tmp_path):
    recs = synth.make_experiment_datasets(DataConfig(num_users=20, train_size=30, valid_size=5))
    path = tmp_path / "r.jsonl"
    synth.write_records(recs["train_stale"], path)
    back = synth.read_records(path)
    assert synth.dataset_hash(back) == synth.dataset_hash(recs["train_stale"])
    assert [r.app_ids for r in back] == [r.app_ids for r in recs["train_stale"]]
    path.write_text('{"schema": "other", "version": 1}\n')
    with pytest.raises(ValueError):
        synth.read_records(path)
