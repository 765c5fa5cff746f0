"""Knowledge graphs over medical concepts: flat relation graphs, code-prefix
tree hierarchies, and visit co-occurrence edge sets with incoming-normalized
weights. Graphs are immutable after construction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Vocabulary, normalize_code


class GraphError(ValueError):
    pass


@dataclass
class EdgeSet:
    """Directed edge arrays plus CSR over destinations (incoming adjacency).

    Symmetrized relation/hierarchy sets store both directions explicitly.
    Weighted sets keep raw counts so weights can be renormalized after
    node pruning.
    """

    tag: str
    src: np.ndarray
    dst: np.ndarray
    directed: bool = False
    weight: np.ndarray = None
    count: np.ndarray = None
    indptr: np.ndarray = field(default=None, repr=False)
    order: np.ndarray = field(default=None, repr=False)

    def finalize(self, n_nodes):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        if self.src.size and (min(self.src.min(), self.dst.min()) < 0
                              or max(self.src.max(), self.dst.max()) >= n_nodes):
            raise GraphError(f"edge endpoint out of range in set '{self.tag}'")
        order = np.lexsort((self.src, self.dst))
        self.src = self.src[order]
        self.dst = self.dst[order]
        if self.weight is not None:
            self.weight = np.asarray(self.weight, dtype=np.float64)[order]
        if self.count is not None:
            self.count = np.asarray(self.count, dtype=np.float64)[order]
        self.indptr = np.zeros(n_nodes + 1, dtype=np.int64)
        np.add.at(self.indptr, self.dst + 1, 1)
        np.cumsum(self.indptr, out=self.indptr)
        return self

    def in_neighbors(self, node):
        lo, hi = self.indptr[node], self.indptr[node + 1]
        return self.src[lo:hi]

    @property
    def n_edges(self):
        return int(self.src.size)


@dataclass
class KnowledgeGraph:
    vocabulary: Vocabulary
    edge_sets: list
    dropped_edges: int = 0
    base_node_count: int = None  # original size, remembered across pruning

    def __post_init__(self):
        for es in self.edge_sets:
            es.finalize(self.n_nodes)
        if self.base_node_count is None:
            self.base_node_count = self.n_nodes

    @property
    def n_nodes(self):
        return len(self.vocabulary)

    def edge_set(self, tag):
        for es in self.edge_sets:
            if es.tag == tag:
                return es
        raise KeyError(tag)

    def undirected_neighbors(self):
        """Adjacency lists over the union of all edge sets, both directions."""
        adj = [set() for _ in range(self.n_nodes)]
        for es in self.edge_sets:
            for s, t in zip(es.src, es.dst):
                adj[t].add(int(s))
                adj[s].add(int(t))
        return [sorted(a) for a in adj]


def _symmetric_pairs(pairs):
    """Dedup undirected pairs, drop self-loops, emit both directions."""
    undirected = sorted({(min(a, b), max(a, b)) for a, b in pairs if a != b})
    src = [a for a, b in undirected] + [b for a, b in undirected]
    dst = [b for a, b in undirected] + [a for a, b in undirected]
    return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)


# ---------------------------------------------------------------------------
# TSV interchange


def write_vocab_tsv(vocab, path):
    with open(path, "w", encoding="utf-8") as fh:
        for cid, ctype in zip(vocab.ids, vocab.types):
            fh.write(f"{cid}\t{ctype}\n")


def read_vocab_tsv(path):
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise GraphError(f"{path}:{lineno}: expected 'concept_id<TAB>type'")
            pairs.append((parts[0], parts[1]))
    return Vocabulary.from_pairs(pairs)


def write_edges_tsv(edges, path, edge_type="rel"):
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in edges:
            fh.write(f"{a}\t{b}\t{edge_type}\n")


def graph_from_edge_list(vocab, id_pairs, strict=False, tag="rel"):
    """Flat symmetrized concept graph from (src_id, dst_id) string pairs.
    Edges with an endpoint outside the vocabulary are dropped and counted
    unless strict."""
    pairs = []
    dropped = 0
    for a, b in id_pairs:
        ia, ib = vocab.index.get(a), vocab.index.get(b)
        if ia is None or ib is None:
            if strict:
                missing = a if ia is None else b
                raise GraphError(f"unknown concept '{missing}' in edge list")
            dropped += 1
            continue
        pairs.append((ia, ib))
    src, dst = _symmetric_pairs(pairs)
    return KnowledgeGraph(vocab, [EdgeSet(tag, src, dst)], dropped_edges=dropped)


def build_graph(vocab_path, edge_path, strict=False):
    """Flat symmetrized concept graph from vocab/edge TSV files.

    Edges with an endpoint outside the vocabulary are dropped (counted on the
    graph) unless strict, in which case they raise. Relation labels in the
    third column are collapsed into a single undirected edge set.
    """
    vocab = read_vocab_tsv(vocab_path)
    pairs = []
    dropped = 0
    with open(edge_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise GraphError(f"{edge_path}:{lineno}: expected 'src<TAB>dst[<TAB>type]'")
            a, b = parts[0], parts[1]
            ia, ib = vocab.index.get(a), vocab.index.get(b)
            if ia is None or ib is None:
                if strict:
                    missing = a if ia is None else b
                    raise GraphError(f"{edge_path}:{lineno}: unknown concept '{missing}'")
                dropped += 1
                continue
            pairs.append((ia, ib))
    src, dst = _symmetric_pairs(pairs)
    return KnowledgeGraph(vocab, [EdgeSet("rel", src, dst)], dropped_edges=dropped)


# ---------------------------------------------------------------------------
# tree hierarchies

TREE_ROOT = "<root>"

# prefix lengths that define hierarchy levels over the normalized code string
_SCHEME_LEVELS = {"icd-like": None, "atc-like": (1, 3, 4, 5)}
_SCHEME_LEAF_TYPE = {"icd-like": "d", "atc-like": "m"}


def _ancestor_prefixes(code, scheme):
    norm = normalize_code(code)
    if scheme == "icd-like":
        lengths = range(3, len(norm))
    else:
        lengths = [L for L in _SCHEME_LEVELS[scheme] if L < len(norm)]
    return [norm[:L] for L in lengths]


def build_tree_hierarchy(codes, scheme):
    """Forest synthesized from code-string prefixes, rooted at a synthetic
    root node; leaves are the input codes, ancestors are 'internal' concepts."""
    if scheme not in _SCHEME_LEVELS:
        raise GraphError(f"unknown scheme '{scheme}'")
    codes = sorted(set(codes))
    if not codes:
        raise GraphError("empty code list")
    leaf_type = _SCHEME_LEAF_TYPE[scheme]
    # a normalized input code may coincide with another code's ancestor
    # prefix; in that case the leaf node doubles as the hierarchy node
    norm_to_leaf = {normalize_code(c): c for c in codes}
    internal = set()
    chains = {}
    for code in codes:
        prefixes = _ancestor_prefixes(code, scheme)
        chains[code] = prefixes
        for p in prefixes:
            if p not in norm_to_leaf:
                internal.add(p)
    pairs = [(c, leaf_type) for c in codes]
    pairs += [(p, "internal") for p in sorted(internal)]
    pairs.append((TREE_ROOT, "internal"))
    vocab = Vocabulary.from_pairs(pairs)

    def node_id(prefix):
        return norm_to_leaf.get(prefix, prefix)

    edges = set()
    for code in codes:
        chain = [node_id(p) for p in chains[code]] + [code]
        parent = TREE_ROOT
        for node in chain:
            if node != parent:
                edges.add((vocab.index[node], vocab.index[parent]))
            parent = node
    src, dst = _symmetric_pairs(edges)
    return KnowledgeGraph(vocab, [EdgeSet("hier", src, dst)])


# ---------------------------------------------------------------------------
# co-occurrence


def build_cooccurrence(dataset, patient_ids, vocab,
                       across=(("d", "d"), ("m", "m"), ("d", "m"), ("m", "d"))):
    """Count within-visit concept pairs on the training split and normalize
    incoming weights per target node to sum to one. One directed weighted
    edge set per configured (source type, target type) pair."""
    patients = dataset.patients(patient_ids)
    if not patients:
        raise GraphError("empty training split for co-occurrence counting")
    counts = {pair: {} for pair in across}
    for rec in patients:
        for visit in rec.visits:
            for s_type, t_type in across:
                table = counts[(s_type, t_type)]
                for s in visit.concept_ids(s_type):
                    si = vocab.index.get(s)
                    if si is None:
                        continue
                    for t in visit.concept_ids(t_type):
                        if s == t:
                            continue
                        ti = vocab.index.get(t)
                        if ti is None:
                            continue
                        key = (si, ti)
                        table[key] = table.get(key, 0) + 1
    edge_sets = []
    for (s_type, t_type) in across:
        table = counts[(s_type, t_type)]
        items = sorted(table.items())
        src = np.array([k[0] for k, _ in items], dtype=np.int64)
        dst = np.array([k[1] for k, _ in items], dtype=np.int64)
        cnt = np.array([v for _, v in items], dtype=np.float64)
        weight = _normalize_incoming(dst, cnt, len(vocab))
        edge_sets.append(EdgeSet(f"co_{s_type}_{t_type}", src, dst, directed=True,
                                 weight=weight, count=cnt))
    return edge_sets


def _normalize_incoming(dst, counts, n_nodes):
    totals = np.zeros(n_nodes)
    np.add.at(totals, dst, counts)
    return counts / totals[dst]


# ---------------------------------------------------------------------------
# pruning


def concept_frequencies(dataset, patient_ids, vocab):
    """Per-concept visit counts over the given patients (dense-index array)."""
    freq = np.zeros(len(vocab))
    for rec in dataset.patients(patient_ids):
        for visit in rec.visits:
            for ctype in ("d", "m", "n"):
                for cid in visit.concept_ids(ctype):
                    idx = vocab.index.get(cid)
                    if idx is not None:
                        freq[idx] += 1
    return freq


def prune_by_frequency(graph, dataset, patient_ids, keep_fraction):
    """Keep the ceil(keep_fraction * original size) most frequent concepts
    (ties broken by lower dense index) and re-index the induced subgraph.

    The target count is taken against the graph's original node count, so
    re-pruning at the same fraction is a no-op.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise GraphError("keep_fraction must be in (0, 1]")
    freq = concept_frequencies(dataset, patient_ids, graph.vocabulary)
    n_keep = min(graph.n_nodes, math.ceil(keep_fraction * graph.base_node_count))
    order = sorted(range(graph.n_nodes), key=lambda i: (-freq[i], i))
    kept = sorted(order[:n_keep])
    remap = {old: new for new, old in enumerate(kept)}
    vocab = Vocabulary.from_pairs(
        [(graph.vocabulary.ids[i], graph.vocabulary.types[i]) for i in kept]
    )
    # canonical ordering is preserved on subsets, so dense positions of the
    # kept concepts match the sorted remap
    assert [graph.vocabulary.ids[i] for i in kept] == list(vocab.ids)
    new_sets = []
    for es in graph.edge_sets:
        mask = np.array([s in remap and t in remap for s, t in zip(es.src, es.dst)], dtype=bool)
        src = np.array([remap[int(s)] for s in es.src[mask]], dtype=np.int64)
        dst = np.array([remap[int(t)] for t in es.dst[mask]], dtype=np.int64)
        weight = count = None
        if es.weight is not None:
            count = es.count[mask] if es.count is not None else es.weight[mask]
            weight = _normalize_incoming(dst, count, len(vocab)) if src.size else count
        new_sets.append(EdgeSet(es.tag, src, dst, directed=es.directed,
                                weight=weight, count=count))
    return KnowledgeGraph(vocab, new_sets, base_node_count=graph.base_node_count)


# ---------------------------------------------------------------------------
# queries and statistics


def khop_neighborhood(graph, node, k):
    """All nodes reachable within k undirected hops, including the seed."""
    if not 0 <= node < graph.n_nodes:
        raise GraphError(f"invalid node {node}")
    if k < 0:
        raise GraphError("k must be nonnegative")
    adj = graph.undirected_neighbors()
    seen = {node}
    frontier = [node]
    for _ in range(k):
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
    return seen


@dataclass
class GraphStats:
    n_nodes: int
    n_edges_undirected: int
    degree_mean: float
    degree_std: float
    coverage: dict
    unseen_vs_train: dict

    def to_json(self, **extra):
        return json.dumps(
            {
                "n_nodes": self.n_nodes,
                "n_edges_undirected": self.n_edges_undirected,
                "degree_mean": self.degree_mean,
                "degree_std": self.degree_std,
                "coverage": self.coverage,
                "unseen_vs_train": self.unseen_vs_train,
                **extra,
            },
            sort_keys=True,
            indent=1,
        )


def _split_concepts(dataset, patient_ids):
    out = set()
    for rec in dataset.patients(patient_ids):
        for visit in rec.visits:
            for ctype in ("d", "m", "n"):
                out.update(visit.concept_ids(ctype))
    return out


def graph_stats(graph, dataset=None, splits=None):
    """Node/edge counts, degree moments, and per-split vocabulary coverage
    plus the fraction of split concepts unseen in the training split."""
    adj = graph.undirected_neighbors()
    degrees = np.array([len(a) for a in adj], dtype=np.float64)
    n_und = int(sum(len(a) for a in adj)) // 2
    concepts = {
        cid for cid, t in zip(graph.vocabulary.ids, graph.vocabulary.types) if t != "internal"
    }
    coverage = {}
    unseen = {}
    if dataset is not None and splits is not None:
        train_concepts = _split_concepts(dataset, splits.get("train", ()))
        for name, pids in splits.items():
            seen = _split_concepts(dataset, pids)
            coverage[name] = len(seen & concepts) / max(len(concepts), 1)
            unseen[name] = (
                len(seen - train_concepts) / len(seen) if seen else 0.0
            )
    return GraphStats(
        n_nodes=graph.n_nodes,
        n_edges_undirected=n_und,
        degree_mean=float(degrees.mean()) if degrees.size else 0.0,
        degree_std=float(degrees.std()) if degrees.size else 0.0,
        coverage=coverage,
        unseen_vs_train=unseen,
    )
