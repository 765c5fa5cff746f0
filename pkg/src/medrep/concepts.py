"""Concept embedders: map every dataset concept to a learned vector.

Variants: a GNN over a flat concept knowledge graph with two max-pooled
layer stacks, per-ontology tree GNNs with a row-concatenated lookup, a
heterogeneous tree+co-occurrence GNN with per-edge-type convolutions, and
a plain trainable embedding matrix. After ``freeze`` the node table is
computed once and served as a constant to downstream training.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .data import Vocabulary
from .graphs import EdgeSet, KnowledgeGraph, build_cooccurrence, build_tree_hierarchy

VARIANTS = ("umls", "icd_atc", "icd_atc_co", "matrix")


def sage_layer(tape, H, edge_set, w_self, w_neigh, bias, apply_relu, edge_mask=None):
    """GraphSAGE-style convolution: act(H W_self + agg(neighbors) W_neigh + b).

    Unweighted edge sets aggregate incoming messages by mean (nodes without
    neighbors contribute a zero term); weighted sets scale each message by
    its edge weight and sum. ``edge_mask`` (E,1 Tensor) multiplies messages
    without changing mean denominators, for explanation masking.
    """
    n = H.data.shape[0]
    msgs = ad.gather_rows(tape, H, edge_set.src)
    if edge_mask is not None:
        msgs = ad.mul_colvec(tape, msgs, edge_mask)
    if edge_set.weight is not None:
        msgs = ad.mul_colvec(tape, msgs, tape.constant(edge_set.weight[:, None]))
        agg = ad.segment_sum(tape, msgs, edge_set.dst, n)
    else:
        agg = ad.segment_mean(tape, msgs, edge_set.dst, n)
    out = ad.add_bias(
        tape,
        ad.add(tape, ad.matmul(tape, H, w_self), ad.matmul(tape, agg, w_neigh)),
        bias,
    )
    return ad.relu(tape, out) if apply_relu else out


def _sage_params(rng, k_in, k_out, prefix):
    return {
        f"{prefix}/self": nn.glorot(rng, k_in, k_out),
        f"{prefix}/neigh": nn.glorot(rng, k_in, k_out),
        f"{prefix}/bias": np.zeros((1, k_out)),
    }


def _run_stack(tape, P, prefix, H, edge_set, depth, edge_mask=None):
    for layer in range(depth):
        H = sage_layer(
            tape,
            H,
            edge_set,
            P[f"{prefix}/l{layer}/self"],
            P[f"{prefix}/l{layer}/neigh"],
            P[f"{prefix}/l{layer}/bias"],
            apply_relu=layer < depth - 1,
            edge_mask=edge_mask,
        )
    return H


# ---------------------------------------------------------------------------
# node-feature files (stand-in for description-derived initializations)


def write_node_features(path, matrix, binary=False):
    matrix = np.asarray(matrix, dtype=np.float64)
    n, k0 = matrix.shape
    mode = "binary" if binary else "text"
    with open(path, "wb") as fh:
        fh.write(f"medrep-features {n} {k0} {mode}\n".encode())
        if binary:
            fh.write(matrix.astype("<f8").tobytes())
        else:
            for row in matrix:
                fh.write((" ".join(repr(float(x)) for x in row) + "\n").encode())


def read_node_features(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        if len(header) != 4 or header[0] != "medrep-features":
            raise ValueError(f"{path}: not a node-feature file")
        n, k0, mode = int(header[1]), int(header[2]), header[3]
        if mode == "binary":
            data = np.frombuffer(fh.read(8 * n * k0), dtype="<f8")
        elif mode == "text":
            data = np.loadtxt(fh, ndmin=2)
        else:
            raise ValueError(f"{path}: unknown feature mode '{mode}'")
    matrix = np.asarray(data, dtype=np.float64).reshape(n, k0)
    return matrix


# ---------------------------------------------------------------------------
# embedder variants


class ConceptEmbedder:
    """Base class: owns named parameter arrays under the 'embedder/' prefix."""

    supports_text = True

    def __init__(self, vocab, k):
        self.vocab = vocab
        self.k = k
        self.params = {}
        self.frozen_arrays = {}  # constants (e.g. file-provided node features)
        self.frozen = False
        self._cache = None

    def tape_params(self, tape):
        if self.frozen:
            return None
        return {name: tape.parameter(name, arr) for name, arr in self.params.items()}

    def tape_frozen(self, tape):
        return {name: tape.constant(arr) for name, arr in self.frozen_arrays.items()}

    def table(self, tape, edge_masks=None):
        """Node table aligned with the dataset vocabulary (|C| x k)."""
        if self.frozen and edge_masks is None:
            if self._cache is None:
                self._cache = self.compute_table()
            return tape.constant(self._cache)
        P = self.tape_params(tape)
        if P is None:  # frozen but masked: serve parameters as constants
            P = {name: tape.constant(arr) for name, arr in self.params.items()}
        P.update(self.tape_frozen(tape))
        return self._table(tape, P, edge_masks or {})

    def compute_table(self):
        tape = ad.Tape()
        P = {name: tape.constant(arr) for name, arr in self.params.items()}
        P.update(self.tape_frozen(tape))
        return self._table(tape, P, {}).data

    def freeze(self):
        """Exclude all embedder parameters from training; cache the table."""
        self.frozen = True
        self._cache = self.compute_table()
        return self

    def invalidate(self):
        self._cache = None

    def _table(self, tape, P, edge_masks):
        raise NotImplementedError


class MatrixEmbedder(ConceptEmbedder):
    """Structureless baseline: one trainable row per concept."""

    def __init__(self, vocab, k, rng):
        super().__init__(vocab, k)
        self.params["embedder/matrix"] = rng.normal(scale=0.1, size=(len(vocab), k))

    def _table(self, tape, P, edge_masks):
        return P["embedder/matrix"]


class DualStackGraphEmbedder(ConceptEmbedder):
    """GNN over a flat concept graph; several independent layer stacks whose
    outputs are combined by elementwise max after the final layer."""

    def __init__(self, vocab, k, graph, rng, depth=2, stacks=2, node_features=None):
        super().__init__(vocab, k)
        self.graph = graph
        self.depth = max(1, depth)
        self.stacks = max(1, stacks)
        missing = [c for c in vocab.ids if c not in graph.vocabulary.index]
        if missing:
            raise ValueError(f"graph is missing {len(missing)} dataset concepts "
                             f"(first: {missing[0]})")
        self.node_map = np.array([graph.vocabulary.index[c] for c in vocab.ids], dtype=np.int64)
        self._identity_map = bool(
            len(vocab) == graph.n_nodes and np.array_equal(self.node_map, np.arange(len(vocab)))
        )
        if node_features is None:
            self.params["embedder/feat"] = rng.normal(scale=0.1, size=(graph.n_nodes, k))
            self.projected = False
        else:
            feats = np.asarray(node_features, dtype=np.float64)
            if feats.shape[0] != graph.n_nodes:
                raise ValueError(f"feature rows {feats.shape[0]} != graph nodes {graph.n_nodes}")
            self.frozen_arrays["embedder/feat"] = feats
            self.projected = feats.shape[1] != k
            if self.projected:
                self.params.update(nn.linear_params(rng, feats.shape[1], k, "embedder/proj"))
        k_in = k
        for s in range(self.stacks):
            for layer in range(self.depth):
                self.params.update(
                    _sage_params(rng, k_in if layer == 0 else k, k, f"embedder/s{s}/l{layer}")
                )

    def _features(self, tape, P):
        feat = P["embedder/feat"]
        if self.projected:
            feat = nn.linear(tape, P, "embedder/proj", feat)
        return feat

    def _table(self, tape, P, edge_masks):
        es = self.graph.edge_sets[0]
        mask = edge_masks.get(es.tag)
        feat = self._features(tape, P)
        outs = [
            _run_stack(tape, P, f"embedder/s{s}", feat, es, self.depth, edge_mask=mask)
            for s in range(self.stacks)
        ]
        table = outs[0]
        for other in outs[1:]:
            table = ad.maximum(tape, table, other)
        if self._identity_map:
            return table
        return ad.gather_rows(tape, table, self.node_map)


class TreePairEmbedder(ConceptEmbedder):
    """Separate tree-hierarchy GNNs for disease and medication codes; the
    concept table is a lookup into the row-concatenated node tables. Note
    concepts are not representable by this variant."""

    supports_text = False

    def __init__(self, vocab, k, rng, depth=2):
        super().__init__(vocab, k)
        self.depth = max(1, depth)
        d_codes = [vocab.ids[i] for i in vocab.type_slice("d")]
        m_codes = [vocab.ids[i] for i in vocab.type_slice("m")]
        self.trees = {
            "icd": build_tree_hierarchy(d_codes, "icd-like"),
            "atc": build_tree_hierarchy(m_codes, "atc-like"),
        }
        for name, tree in self.trees.items():
            self.params[f"embedder/{name}/feat"] = rng.normal(
                scale=0.1, size=(tree.n_nodes, k)
            )
            for layer in range(self.depth):
                self.params.update(_sage_params(rng, k, k, f"embedder/{name}/l{layer}"))
        self.maps = {
            "icd": np.array([self.trees["icd"].vocabulary.index[c] for c in d_codes], np.int64),
            "atc": np.array([self.trees["atc"].vocabulary.index[c] for c in m_codes], np.int64),
        }
        self.n_text = len(vocab.type_slice("n"))

    def _table(self, tape, P, edge_masks):
        parts = []
        for name in ("icd", "atc"):
            tree = self.trees[name]
            es = tree.edge_sets[0]
            full = _run_stack(
                tape, P, f"embedder/{name}", P[f"embedder/{name}/feat"], es, self.depth,
                edge_mask=edge_masks.get(f"{name}:{es.tag}"),
            )
            parts.append(ad.gather_rows(tape, full, self.maps[name]))
        if self.n_text:
            parts.append(tape.constant(np.zeros((self.n_text, self.k))))
        return ad.concat_rows(tape, parts)


def build_hetero_graph(vocab, dataset, train_ids):
    """Combined ICD+ATC node set with hierarchy edges plus four directed,
    weighted within-visit co-occurrence edge sets."""
    d_codes = [vocab.ids[i] for i in vocab.type_slice("d")]
    m_codes = [vocab.ids[i] for i in vocab.type_slice("m")]
    icd = build_tree_hierarchy(d_codes, "icd-like")
    atc = build_tree_hierarchy(m_codes, "atc-like")
    pairs = []
    for name, tree in (("icd", icd), ("atc", atc)):
        for cid, ctype in zip(tree.vocabulary.ids, tree.vocabulary.types):
            pairs.append((f"{name}:{cid}" if ctype == "internal" else cid, ctype))
    combined = Vocabulary.from_pairs(pairs)

    def remap(tree, name):
        def full_id(i):
            cid = tree.vocabulary.ids[i]
            if tree.vocabulary.types[i] == "internal":
                cid = f"{name}:{cid}"
            return combined.index[cid]

        es = tree.edge_sets[0]
        src = np.array([full_id(int(s)) for s in es.src], dtype=np.int64)
        dst = np.array([full_id(int(t)) for t in es.dst], dtype=np.int64)
        return EdgeSet(f"{name}_hier", src, dst)

    edge_sets = [remap(icd, "icd"), remap(atc, "atc")]
    edge_sets += build_cooccurrence(dataset, train_ids, combined)
    return KnowledgeGraph(combined, edge_sets)


class HeteroTreeCoEmbedder(ConceptEmbedder):
    """One GNN over the combined tree+co-occurrence graph; every edge set has
    its own convolution parameters per layer and the per-edge-set outputs are
    summed. Weighted co-occurrence messages are scaled by their weights."""

    supports_text = False

    def __init__(self, vocab, k, dataset, train_ids, rng, depth=2):
        super().__init__(vocab, k)
        self.depth = max(1, depth)
        self.graph = build_hetero_graph(vocab, dataset, train_ids)
        self.params["embedder/feat"] = rng.normal(scale=0.1, size=(self.graph.n_nodes, k))
        for layer in range(self.depth):
            for es in self.graph.edge_sets:
                self.params.update(_sage_params(rng, k, k, f"embedder/l{layer}/{es.tag}"))
        gv = self.graph.vocabulary.index
        idx = [gv[vocab.ids[i]] for i in vocab.type_slice("d")]
        idx += [gv[vocab.ids[i]] for i in vocab.type_slice("m")]
        self.node_map = np.array(idx, dtype=np.int64)
        self.n_text = len(vocab.type_slice("n"))

    def _table(self, tape, P, edge_masks):
        H = P["embedder/feat"]
        for layer in range(self.depth):
            terms = []
            for es in self.graph.edge_sets:
                prefix = f"embedder/l{layer}/{es.tag}"
                terms.append(
                    sage_layer(
                        tape, H, es,
                        P[f"{prefix}/self"], P[f"{prefix}/neigh"], P[f"{prefix}/bias"],
                        apply_relu=False, edge_mask=edge_masks.get(es.tag),
                    )
                )
            H = terms[0]
            for t in terms[1:]:
                H = ad.add(tape, H, t)
            if layer < self.depth - 1:
                H = ad.relu(tape, H)
        parts = [ad.gather_rows(tape, H, self.node_map)]
        if self.n_text:
            parts.append(tape.constant(np.zeros((self.n_text, self.k))))
        return ad.concat_rows(tape, parts)


def lookup(tape, table, concept_indices):
    """Gather concept rows; gradients scatter back additively."""
    return ad.gather_rows(tape, table, concept_indices)


def build_embedder(variant, vocab, k, rng, graph=None, dataset=None, train_ids=None,
                   depth=2, stacks=2, feature_file=None):
    if variant == "matrix":
        return MatrixEmbedder(vocab, k, rng)
    if variant == "umls":
        if graph is None:
            raise ValueError("the flat-graph variant needs a knowledge graph")
        feats = read_node_features(feature_file) if feature_file else None
        return DualStackGraphEmbedder(vocab, k, graph, rng, depth=depth, stacks=stacks,
                                      node_features=feats)
    if variant == "icd_atc":
        return TreePairEmbedder(vocab, k, rng, depth=depth)
    if variant == "icd_atc_co":
        if dataset is None:
            raise ValueError("the co-occurrence variant needs the training dataset")
        return HeteroTreeCoEmbedder(vocab, k, dataset, train_ids, rng, depth=depth)
    raise ValueError(f"unknown embedder variant '{variant}' (choose from {VARIANTS})")
