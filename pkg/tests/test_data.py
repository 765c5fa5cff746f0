import json

import numpy as np
import pytest

from medrep import data
from medrep.data import (
    Dataset,
    PatientRecord,
    SyntheticConfig,
    Vocabulary,
    build_vocabulary,
    generate_synthetic,
    ids_from_multihot,
    label_heart_failure,
    label_los,
    label_readmission,
    load_dataset,
    make_splits,
    make_visit,
    multihot,
    save_dataset,
)


def _patient(pid, visit_specs):
    visits = [make_visit(*spec)[0] for spec in visit_specs]
    return PatientRecord(pid, tuple(visits))


def _toy_dataset():
    recs = [
        _patient("a", [(0.0, 2.0, ["428.0", "401.9"], ["A01AB05"]),
                       (100.0, 1.0, ["428.0"], ["A01AB05", "B02BC01"])]),
        _patient("b", [(5.0, 0.5, ["250.1"], ["C03CA01"])]),
    ]
    return Dataset(recs, build_vocabulary(recs))


def test_empty_file_gives_empty_dataset(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    ds = load_dataset(p)
    assert ds.records == []
    assert len(ds.vocabulary) == 0


def test_duplicate_codes_deduplicated_and_counted():
    visit, dups = make_visit(0.0, 1.0, ["428.0", "428.0"], ["A01"])
    assert visit.codes_d == ("428.0",)
    assert dups == 1


def test_round_trip_save_load(tmp_path):
    ds = _toy_dataset()
    path = tmp_path / "corpus.jsonl"
    save_dataset(ds, path)
    loaded = load_dataset(path)
    assert loaded.records == ds.records
    assert loaded.vocabulary.ids == ds.vocabulary.ids


def test_load_reports_line_number_on_bad_times(tmp_path):
    rec = {
        "schema": 1,
        "patient_id": "x",
        "visits": [
            {"time_days": 5.0, "duration_days": 1, "codes_d": [], "codes_m": ["A"]},
            {"time_days": 5.0, "duration_days": 1, "codes_d": [], "codes_m": ["A"]},
        ],
    }
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps(rec) + "\n")
    with pytest.raises(data.DataError, match=":1:"):
        load_dataset(p)


def test_load_rejects_wrong_schema(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"schema": 99, "patient_id": "x", "visits": []}\n')
    with pytest.raises(data.DataError, match="schema"):
        load_dataset(p)


def test_vocabulary_type_partition():
    ds = _toy_dataset()
    v = ds.vocabulary
    sl_d, sl_m = v.type_slice("d"), v.type_slice("m")
    assert all(v.types[i] == "d" for i in sl_d)
    assert all(v.types[i] == "m" for i in sl_m)
    assert len(sl_d) + len(sl_m) + len(v.type_slice("n")) == len(v)
    assert sorted(v.index.values()) == list(range(len(v)))


def test_heart_failure_label_prefix_rule():
    p = _patient("x", [(0.0, 1.0, [], ["A"]), (10.0, 1.0, ["428.3"], ["A"])])
    assert label_heart_failure(p, 1) == 1
    p = _patient("x", [(0.0, 1.0, [], ["A"]), (10.0, 1.0, ["4280"], ["A"])])
    assert label_heart_failure(p, 1) == 1
    p = _patient("x", [(0.0, 1.0, [], ["A"]), (10.0, 1.0, ["42"], ["A"])])
    assert label_heart_failure(p, 1) == 0


def test_readmission_label():
    p = _patient("x", [(0.0, 1.0, [], ["A"]), (200.0, 1.0, [], ["A"]), (245.0, 1.0, [], ["A"])])
    assert label_readmission(p, 0, 365) == 1
    assert label_readmission(p, 1, 30) == 0  # 45-day gap
    assert label_readmission(p, 2, 365) is None  # censored terminal visit


def test_los_classes():
    cases = [(0.5, 0), (1.0, 1), (7.5, 7), (7.99, 7), (8.0, 8), (10.0, 8), (14.9, 8), (20.0, 9)]
    for days, expected in cases:
        visit, _ = make_visit(0.0, days, [], ["A"])
        assert label_los(visit) == expected, days


def test_splits_all_single_visit():
    recs = [_patient(f"p{i}", [(0.0, 1.0, ["428"], ["A"])]) for i in range(5)]
    ds = Dataset(recs, build_vocabulary(recs))
    s = make_splits(ds, seed=0)
    assert s.train == s.validation == s.test == ()
    assert len(s.pretrain) == 5


def test_splits_disjoint_and_deterministic():
    recs = [
        _patient(f"p{i}", [(0.0, 1.0, ["428"], ["A"]), (50.0, 1.0, ["401"], ["A"])])
        for i in range(100)
    ]
    ds = Dataset(recs, build_vocabulary(recs))
    s1 = make_splits(ds, seed=0)
    s2 = make_splits(ds, seed=0)
    assert s1 == s2
    assert not (set(s1.train) & set(s1.validation))
    assert not (set(s1.train) & set(s1.test))
    assert not (set(s1.validation) & set(s1.test))
    assert set(s1.train) <= set(s1.pretrain)
    assert not (set(s1.pretrain) & set(s1.test))


def test_splits_exclude_patients_without_medication():
    recs = [
        _patient("meds", [(0.0, 1.0, ["1"], ["A"]), (9.0, 1.0, ["1"], ["A"])]),
        _patient("nomeds", [(0.0, 1.0, ["1"], []), (9.0, 1.0, ["1"], [])]),
        _patient("meds2", [(0.0, 1.0, ["1"], ["A"]), (9.0, 1.0, ["1"], ["A"])]),
        _patient("meds3", [(0.0, 1.0, ["1"], ["A"]), (9.0, 1.0, ["1"], ["A"])]),
    ]
    ds = Dataset(recs, build_vocabulary(recs))
    s = make_splits(ds, fractions=(0.34, 0.33, 0.33), seed=1)
    everyone = set(s.pretrain) | set(s.train) | set(s.validation) | set(s.test)
    assert "nomeds" not in everyone


def test_multihot_basics():
    ds = _toy_dataset()
    v = ds.vocabulary
    assert np.all(multihot([], v, "d") == 0.0)
    all_d = [v.ids[i] for i in v.type_slice("d")]
    assert np.all(multihot(all_d, v, "d") == 1.0)
    vec = multihot(["428.0"], v, "d")
    assert ids_from_multihot(vec, v, "d") == ("428.0",)
    with pytest.raises(KeyError):
        multihot(["nope"], v, "d")


def test_synthetic_same_seed_identical_bytes(tmp_path):
    cfg = SyntheticConfig(n_patients=30, seed=7)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_dataset(generate_synthetic(cfg).dataset, p1)
    save_dataset(generate_synthetic(cfg).dataset, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_synthetic_zero_noise_keeps_text_in_cluster():
    cfg = SyntheticConfig(n_patients=40, seed=3, note_noise_rate=0.0)
    corpus = generate_synthetic(cfg)
    for rec in corpus.dataset.records:
        allowed = set()
        for c in corpus.cluster_of_patient[rec.patient_id]:
            allowed.update(corpus.pools[c]["n"])
        for visit in rec.visits:
            assert set(visit.concept_ids("n")) <= allowed


def test_synthetic_times_strictly_increase():
    corpus = generate_synthetic(SyntheticConfig(n_patients=50, seed=2))
    for rec in corpus.dataset.records:
        times = [v.time_days for v in rec.visits]
        assert all(b > a for a, b in zip(times, times[1:]))


def test_synthetic_same_cluster_codes_cooccur_more():
    corpus = generate_synthetic(SyntheticConfig(n_patients=1000, seed=0))
    cluster_of_code = {}
    for c, pools in corpus.pools.items():
        for code in pools["d"]:
            cluster_of_code[code] = c
    same = cross = 0
    same_n = cross_n = 0
    for rec in corpus.dataset.records:
        for visit in rec.visits:
            codes = visit.codes_d
            for i in range(len(codes)):
                for j in range(i + 1, len(codes)):
                    if cluster_of_code[codes[i]] == cluster_of_code[codes[j]]:
                        same += 1
                    else:
                        cross += 1
    # normalize by the number of possible pairs in each group
    n_codes = len(cluster_of_code)
    per_cluster = n_codes // len(corpus.pools)
    same_pairs = len(corpus.pools) * per_cluster * (per_cluster - 1) / 2
    cross_pairs = n_codes * (n_codes - 1) / 2 - same_pairs
    assert same / same_pairs > cross / max(cross_pairs, 1)


def test_synthetic_statistics_near_configured_targets():
    cfg = SyntheticConfig(n_patients=1000, seed=0)
    corpus = generate_synthetic(cfg)
    visit_counts = np.array([len(r.visits) for r in corpus.dataset.records])
    expected = 1 + cfg.mean_extra_visits
    # truncation at max_visits pulls the mean down slightly; 3 sigma band
    sigma = visit_counts.std() / np.sqrt(len(visit_counts))
    assert abs(visit_counts.mean() - expected) < max(3 * sigma, 0.15)
    neg = [t.negated for r in corpus.dataset.records for v in r.visits for t in v.text_concepts]
    neg = np.array(neg, dtype=float)
    assert abs(neg.mean() - cfg.negation_rate) < 3 * neg.std() / np.sqrt(len(neg))


def test_patient_record_requires_visits():
    with pytest.raises(data.DataError):
        PatientRecord("x", ())
