"""Patient/visit data model, JSONL persistence, synthetic corpora, labels, splits.

Concept collections are stored as sorted tuples (not Python sets) so every
iteration order is deterministic across processes; this is what makes
generated files and downstream training byte-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

SCHEMA_VERSION = 1

CONCEPT_TYPES = ("d", "m", "n")
NOTE_TYPES = ("Discharge summary", "Nursing", "Radiology", "ECG", "Respiratory")
NOTE_TYPE_WEIGHTS = (0.35, 0.25, 0.2, 0.1, 0.1)


class DataError(ValueError):
    """Schema violation or inconsistent record content."""


class TextConcept(NamedTuple):
    concept_id: str
    negated: int
    note_type: str


@dataclass(frozen=True)
class Visit:
    time_days: float
    duration_days: float
    codes_d: tuple
    codes_m: tuple
    text_concepts: tuple

    def concept_ids(self, ctype):
        if ctype == "d":
            return self.codes_d
        if ctype == "m":
            return self.codes_m
        if ctype == "n":
            return tuple(t.concept_id for t in self.text_concepts)
        raise KeyError(ctype)

    def negation_flags(self, ctype):
        if ctype == "n":
            return tuple(t.negated for t in self.text_concepts)
        return tuple(0 for _ in self.concept_ids(ctype))


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple

    def __post_init__(self):
        if not self.visits:
            raise DataError(f"patient {self.patient_id} has no visits")
        times = [v.time_days for v in self.visits]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DataError(f"patient {self.patient_id}: visit times not strictly increasing")

    def has_medication(self):
        return any(v.codes_m for v in self.visits)


def make_visit(time_days, duration_days, codes_d, codes_m, text_concepts=()):
    """Normalize raw collections into a Visit (dedup + sort). Returns
    (visit, n_duplicates_dropped)."""
    if duration_days < 0:
        raise DataError("duration_days must be nonnegative")
    dups = 0
    d = tuple(sorted(set(codes_d)))
    m = tuple(sorted(set(codes_m)))
    dups += len(list(codes_d)) - len(d) + len(list(codes_m)) - len(m)
    tc = tuple(sorted(set(TextConcept(str(c), int(neg), str(nt)) for c, neg, nt in text_concepts)))
    dups += len(list(text_concepts)) - len(tc)
    return Visit(float(time_days), float(duration_days), d, m, tc), dups


# ---------------------------------------------------------------------------
# vocabulary

_TYPE_ORDER = {"d": 0, "m": 1, "n": 2, "internal": 3}


@dataclass
class Vocabulary:
    """Dense, type-partitioned concept index. Concepts are ordered by type
    (d, m, n, internal) and lexicographically within a type."""

    ids: tuple
    types: tuple
    index: dict = field(repr=False)

    @classmethod
    def from_pairs(cls, pairs):
        seen = {}
        for cid, ctype in pairs:
            if ctype not in _TYPE_ORDER:
                raise DataError(f"unknown concept type '{ctype}' for '{cid}'")
            if cid in seen:
                if seen[cid] != ctype:
                    raise DataError(f"concept '{cid}' declared with two types")
                continue
            seen[cid] = ctype
        ordered = sorted(seen.items(), key=lambda kv: (_TYPE_ORDER[kv[1]], kv[0]))
        ids = tuple(k for k, _ in ordered)
        types = tuple(v for _, v in ordered)
        return cls(ids=ids, types=types, index={cid: i for i, cid in enumerate(ids)})

    def __len__(self):
        return len(self.ids)

    def type_slice(self, ctype):
        """Contiguous dense-index range holding all concepts of one type."""
        lo = None
        hi = 0
        for i, t in enumerate(self.types):
            if t == ctype:
                if lo is None:
                    lo = i
                hi = i + 1
        if lo is None:
            return range(0, 0)
        return range(lo, hi)

    def type_of(self, dense_index):
        return self.types[dense_index]


def multihot(concept_ids, vocab, ctype, strict=True):
    """Bit vector over the vocabulary's slice for one concept type."""
    sl = vocab.type_slice(ctype)
    out = np.zeros(len(sl))
    for cid in concept_ids:
        idx = vocab.index.get(cid)
        if idx is None or idx not in sl:
            if strict:
                raise KeyError(f"concept '{cid}' not in vocabulary type '{ctype}'")
            continue
        out[idx - sl.start] = 1.0
    return out


def ids_from_multihot(vector, vocab, ctype):
    sl = vocab.type_slice(ctype)
    return tuple(vocab.ids[sl.start + i] for i in np.flatnonzero(vector))


# ---------------------------------------------------------------------------
# dataset container + JSONL persistence


@dataclass
class Dataset:
    records: list
    vocabulary: Vocabulary
    duplicates_dropped: int = 0

    def __post_init__(self):
        self.by_id = {r.patient_id: r for r in self.records}
        if len(self.by_id) != len(self.records):
            raise DataError("duplicate patient ids")

    def patients(self, patient_ids=None):
        if patient_ids is None:
            return list(self.records)
        return [self.by_id[p] for p in patient_ids]


def build_vocabulary(records):
    pairs = []
    for rec in records:
        for v in rec.visits:
            pairs.extend((c, "d") for c in v.codes_d)
            pairs.extend((c, "m") for c in v.codes_m)
            pairs.extend((t.concept_id, "n") for t in v.text_concepts)
    return Vocabulary.from_pairs(pairs)


def load_dataset(path):
    records = []
    dups = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            if obj.get("schema") != SCHEMA_VERSION:
                raise DataError(f"{path}:{lineno}: unsupported schema {obj.get('schema')!r}")
            try:
                visits = []
                for v in obj["visits"]:
                    visit, n = make_visit(
                        v["time_days"],
                        v["duration_days"],
                        v["codes_d"],
                        v["codes_m"],
                        [tuple(t) for t in v.get("text_concepts", [])],
                    )
                    visits.append(visit)
                    dups += n
                records.append(PatientRecord(obj["patient_id"], tuple(visits)))
            except (KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from None
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return Dataset(records, build_vocabulary(records), duplicates_dropped=dups)


def save_dataset(dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in dataset.records:
            obj = {
                "schema": SCHEMA_VERSION,
                "patient_id": rec.patient_id,
                "visits": [
                    {
                        "time_days": v.time_days,
                        "duration_days": v.duration_days,
                        "codes_d": list(v.codes_d),
                        "codes_m": list(v.codes_m),
                        "text_concepts": [list(t) for t in v.text_concepts],
                    }
                    for v in rec.visits
                ],
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# task labels


def normalize_code(code):
    return "".join(ch for ch in code if ch.isalnum())


def label_heart_failure(patient, t, prefix="428"):
    """1 iff any disease code of visit t, stripped of special characters,
    starts with the prefix."""
    if t < 1:
        raise ValueError("heart-failure labels need at least one history visit")
    return int(any(normalize_code(c).startswith(prefix) for c in patient.visits[t].codes_d))


def label_readmission(patient, t, horizon_days):
    """1 iff the next admission follows visit t within the horizon; None when
    no later visit exists (censored, excluded rather than negative)."""
    if t + 1 >= len(patient.visits):
        return None
    gap = patient.visits[t + 1].time_days - patient.visits[t].time_days
    return int(gap < horizon_days)


def label_los(visit):
    """Length-of-stay class: 0 under one day, 1..7 whole days, 8 for one to
    two weeks, 9 beyond two weeks."""
    d = visit.duration_days
    if d < 0:
        raise DataError("negative duration")
    if d < 1:
        return 0
    if d < 8:
        return int(math.floor(d))
    if d < 15:
        return 8
    return 9


LOS_CLASSES = 10


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitSet:
    pretrain: tuple
    train: tuple
    validation: tuple
    test: tuple

    def as_dict(self):
        return {
            "pretrain": list(self.pretrain),
            "train": list(self.train),
            "validation": list(self.validation),
            "test": list(self.test),
        }


def make_splits(dataset, fractions=(0.7, 0.1, 0.2), seed=0):
    """Partition multi-visit patients with medications into train/val/test;
    pretraining additionally receives single-visit patients with medications."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    eligible = [r for r in dataset.records if r.has_medication()]
    multi = [r.patient_id for r in eligible if len(r.visits) > 1]
    single = [r.patient_id for r in eligible if len(r.visits) == 1]
    rng = np.random.default_rng(seed)
    order = list(np.array(multi, dtype=object)[rng.permutation(len(multi))]) if multi else []
    n = len(order)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = n - n_val - n_test
    if n > 0 and (n_train < 1 or n_val < 1 or n_test < 1):
        raise ValueError(f"too few multi-visit patients ({n}) for fractions {fractions}")
    train = order[:n_train]
    val = order[n_train:n_train + n_val]
    test = order[n_train + n_val:]
    pretrain = sorted(train + single)
    return SplitSet(tuple(pretrain), tuple(train), tuple(val), tuple(test))


def save_splits(splits, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"schema": SCHEMA_VERSION, **splits.as_dict()}, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_splits(path):
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("schema") != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported split schema {obj.get('schema')!r}")
    return SplitSet(
        tuple(obj["pretrain"]), tuple(obj["train"]), tuple(obj["validation"]), tuple(obj["test"])
    )


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticConfig:
    n_patients: int = 200
    seed: int = 0
    n_clusters: int = 6
    codes_per_category: int = 5
    categories_per_cluster: int = 4
    meds_per_cluster: int = 12
    notes_per_cluster: int = 20
    mean_extra_visits: float = 1.8
    max_visits: int = 8
    chronic_prob: float = 0.85
    comorbid_prob: float = 0.3
    note_noise_rate: float = 0.1
    negation_rate: float = 0.15
    kg_neighbors: int = 3
    kg_cross_fraction: float = 0.05

    def validate(self):
        if self.n_patients < 1 or self.n_clusters < 2:
            raise ValueError("need at least 1 patient and 2 clusters")
        for name in ("chronic_prob", "comorbid_prob", "note_noise_rate", "negation_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1]")


@dataclass
class SyntheticCorpus:
    dataset: Dataset
    cluster_of_patient: dict  # patient_id -> tuple of cluster ids
    pools: dict  # cluster -> {"d": [...], "m": [...], "n": [...]}
    kg_edges: list  # (src_id, dst_id) over the dataset vocabulary
    config: SyntheticConfig


# Cluster 0 carries heart-failure style codes so the 428-prefix label has
# learnable chronic structure; the rest are arbitrary disease categories.
_SEED_CATEGORIES = ["428", "401", "250", "585"]
_ATC_LETTERS = "ABCDGJLMNPRSV"


def _disease_pools(cfg, rng):
    used = set(_SEED_CATEGORIES)
    pools = []
    for c in range(cfg.n_clusters):
        cats = []
        if c == 0:
            cats = list(_SEED_CATEGORIES[: cfg.categories_per_cluster])
        while len(cats) < cfg.categories_per_cluster:
            cand = str(rng.integers(100, 800))
            if cand not in used:
                used.add(cand)
                cats.append(cand)
        pools.append([f"{cat}.{i}" for cat in cats for i in range(cfg.codes_per_category)])
    return pools


def _med_pools(cfg, rng):
    used = set()
    pools = []
    for c in range(cfg.n_clusters):
        letter = _ATC_LETTERS[c % len(_ATC_LETTERS)]
        codes = []
        while len(codes) < cfg.meds_per_cluster:
            cand = (
                f"{letter}{rng.integers(1, 17):02d}"
                f"{chr(65 + rng.integers(0, 26))}{chr(65 + rng.integers(0, 26))}"
                f"{rng.integers(1, 100):02d}"
            )
            if cand not in used:
                used.add(cand)
                codes.append(cand)
        pools.append(codes)
    return pools


def _note_pools(cfg, rng):
    used = set()
    pools = []
    for _ in range(cfg.n_clusters):
        codes = []
        while len(codes) < cfg.notes_per_cluster:
            cand = f"C{rng.integers(0, 10_000_000):07d}"
            if cand not in used:
                used.add(cand)
                codes.append(cand)
        pools.append(codes)
    return pools


def _choice(rng, items, size):
    size = min(size, len(items))
    return [items[i] for i in rng.choice(len(items), size=size, replace=False)]


def generate_synthetic(cfg):
    """Deterministic clustered corpus: each patient draws one or two latent
    disease clusters that correlate codes, medications, and note concepts;
    chronic codes recur across visits."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d_pools = _disease_pools(cfg, rng)
    m_pools = _med_pools(cfg, rng)
    n_pools = _note_pools(cfg, rng)
    all_d = [c for pool in d_pools for c in pool]
    all_n = [c for pool in n_pools for c in pool]

    records = []
    assignments = {}
    for p in range(cfg.n_patients):
        pid = f"p{p:05d}"
        primary = int(rng.integers(cfg.n_clusters))
        clusters = [primary]
        if rng.random() < cfg.comorbid_prob:
            other = int(rng.integers(cfg.n_clusters - 1))
            clusters.append(other if other < primary else other + 1)
        assignments[pid] = tuple(clusters)
        pool_d = [c for cl in clusters for c in d_pools[cl]]
        pool_m = [c for cl in clusters for c in m_pools[cl]]
        pool_n = [c for cl in clusters for c in n_pools[cl]]

        chronic = _choice(rng, pool_d, int(rng.integers(2, 5)))
        n_visits = 1 + min(int(rng.poisson(cfg.mean_extra_visits)), cfg.max_visits - 1)
        time = float(rng.uniform(0.0, 30.0))
        visits = []
        for _ in range(n_visits):
            codes_d = [c for c in chronic if rng.random() < cfg.chronic_prob]
            codes_d += _choice(rng, pool_d, int(rng.integers(1, 4)))
            if rng.random() < 0.1:
                codes_d.append(all_d[int(rng.integers(len(all_d)))])
            codes_m = _choice(rng, pool_m, int(rng.integers(2, 5)))
            n_notes = int(rng.integers(3, 9))
            text = []
            for _ in range(n_notes):
                if rng.random() < cfg.note_noise_rate:
                    concept = all_n[int(rng.integers(len(all_n)))]
                else:
                    concept = pool_n[int(rng.integers(len(pool_n)))]
                negated = int(rng.random() < cfg.negation_rate)
                note_type = NOTE_TYPES[int(rng.choice(len(NOTE_TYPES), p=NOTE_TYPE_WEIGHTS))]
                text.append((concept, negated, note_type))
            duration = float(np.clip(rng.lognormal(mean=np.log(3.0), sigma=0.9), 0.1, 40.0))
            visit, _ = make_visit(time, duration, codes_d, codes_m, text)
            visits.append(visit)
            time += float(np.clip(rng.lognormal(mean=np.log(130.0), sigma=0.8), 5.0, 1500.0))
        records.append(PatientRecord(pid, tuple(visits)))

    dataset = Dataset(records, build_vocabulary(records))
    pools = {
        c: {"d": d_pools[c], "m": m_pools[c], "n": n_pools[c]} for c in range(cfg.n_clusters)
    }
    edges = _knowledge_edges(cfg, rng, pools, dataset.vocabulary)
    return SyntheticCorpus(dataset, assignments, pools, edges, cfg)


def _knowledge_edges(cfg, rng, pools, vocab):
    """Flat concept-graph edges: mostly within-cluster links (across types),
    plus a small fraction of cross-cluster noise. Only observed concepts."""
    present = set(vocab.ids)
    edges = set()
    for c in sorted(pools):
        members = [x for t in ("d", "m", "n") for x in pools[c][t] if x in present]
        for cid in members:
            for other in _choice(rng, members, cfg.kg_neighbors + 1):
                if other != cid:
                    edges.add((min(cid, other), max(cid, other)))
    n_cross = int(cfg.kg_cross_fraction * len(edges))
    ids = sorted(present)
    for _ in range(n_cross):
        a, b = _choice(rng, ids, 2)
        edges.add((min(a, b), max(a, b)))
    return sorted(edges)
