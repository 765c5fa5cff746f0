import numpy as np
import pytest

from medrep import autodiff as ad
from medrep import concepts
from medrep.concepts import (
    DualStackGraphEmbedder,
    HeteroTreeCoEmbedder,
    MatrixEmbedder,
    TreePairEmbedder,
    build_embedder,
    read_node_features,
    sage_layer,
    write_node_features,
)
from medrep.data import (
    Dataset,
    PatientRecord,
    Vocabulary,
    build_vocabulary,
    make_visit,
)
from medrep.graphs import EdgeSet, KnowledgeGraph


def _path_graph(features):
    """a-b-c path over single-feature nodes."""
    n = len(features)
    vocab = Vocabulary.from_pairs([(f"c{i}", "d") for i in range(n)])
    pairs = [(i, i + 1) for i in range(n - 1)]
    src = [a for a, b in pairs] + [b for a, b in pairs]
    dst = [b for a, b in pairs] + [a for a, b in pairs]
    graph = KnowledgeGraph(vocab, [EdgeSet("rel", np.array(src), np.array(dst))])
    return graph, np.array(features, dtype=np.float64).reshape(n, 1)


def test_sage_layer_hand_computed_path_graph():
    graph, feats = _path_graph([1.0, 2.0, 3.0])
    tape = ad.Tape()
    H = tape.constant(feats)
    out = sage_layer(
        tape, H, graph.edge_sets[0],
        tape.constant(np.eye(1)), tape.constant(np.eye(1)), tape.constant(np.zeros((1, 1))),
        apply_relu=False,
    )
    # node 0: 1 + mean(2) = 3; node 1: 2 + mean(1,3) = 4; node 2: 3 + mean(2) = 5
    assert np.allclose(out.data[:, 0], [3.0, 4.0, 5.0])


def test_sage_layer_isolated_node_zero_neighbor_term():
    vocab = Vocabulary.from_pairs([("a", "d"), ("b", "d"), ("iso", "d")])
    ia, ib = vocab.index["a"], vocab.index["b"]
    graph = KnowledgeGraph(vocab, [EdgeSet("rel", np.array([ia, ib]), np.array([ib, ia]))])
    rng = np.random.default_rng(0)
    H0 = rng.normal(size=(3, 2))
    ws, wn, b = rng.normal(size=(2, 2)), rng.normal(size=(2, 2)), rng.normal(size=(1, 2))
    tape = ad.Tape()
    out = sage_layer(
        tape, tape.constant(H0), graph.edge_sets[0],
        tape.constant(ws), tape.constant(wn), tape.constant(b), apply_relu=True,
    )
    iso = vocab.index["iso"]
    expected = np.maximum(H0[iso] @ ws + b[0], 0.0)
    assert np.allclose(out.data[iso], expected)


def test_sage_layer_weighted_matches_dense_oracle():
    rng = np.random.default_rng(1)
    n, k = 6, 3
    vocab = Vocabulary.from_pairs([(f"c{i}", "d") for i in range(n)])
    src = np.array([0, 1, 2, 3, 4, 5, 1, 2])
    dst = np.array([1, 2, 3, 4, 5, 0, 0, 0])
    raw = rng.uniform(0.5, 2.0, size=src.size)
    # incoming-normalized weights
    totals = np.zeros(n)
    np.add.at(totals, dst, raw)
    weight = raw / totals[dst]
    es = EdgeSet("co", src, dst, directed=True, weight=weight, count=raw)
    graph = KnowledgeGraph(vocab, [es])
    H0 = rng.normal(size=(n, k))
    ws, wn, b = rng.normal(size=(k, k)), rng.normal(size=(k, k)), rng.normal(size=(1, k))
    tape = ad.Tape()
    out = sage_layer(
        tape, tape.constant(H0), graph.edge_sets[0],
        tape.constant(ws), tape.constant(wn), tape.constant(b), apply_relu=False,
    )
    # oracle: dense normalized adjacency product
    A = np.zeros((n, n))
    fes = graph.edge_sets[0]
    for s, t, w in zip(fes.src, fes.dst, fes.weight):
        A[t, s] += w
    expected = H0 @ ws + (A @ H0) @ wn + b
    assert np.allclose(out.data, expected, atol=1e-12)


def test_sage_gradients_match_finite_differences():
    graph, feats = _path_graph([0.3, -1.2, 0.8, 0.1])
    rng = np.random.default_rng(2)
    arrays = {
        "feat": rng.normal(size=(4, 3)),
        "self": rng.normal(size=(3, 3)),
        "neigh": rng.normal(size=(3, 3)),
        "bias": rng.normal(size=(1, 3)),
    }

    def fn(params):
        tape = ad.Tape()
        P = tape.parameters(params)
        out = sage_layer(tape, P["feat"], graph.edge_sets[0], P["self"], P["neigh"],
                         P["bias"], apply_relu=False)
        return tape, ad.sum_all(tape, ad.mul(tape, out, out))

    assert ad.finite_diff_check(fn, arrays) < 1e-6


def _toy_dataset():
    recs = [
        PatientRecord("p0", (
            make_visit(0.0, 1.0, ["428.0", "401.1"], ["A01AB05"],
                       [("C0000001", 0, "Nursing")])[0],
            make_visit(40.0, 2.0, ["428.0"], ["A01AB05", "B02BA01"],
                       [("C0000002", 1, "Radiology")])[0],
        )),
        PatientRecord("p1", (
            make_visit(3.0, 1.0, ["250.2"], ["B02BA01"], [("C0000002", 0, "ECG")])[0],
        )),
    ]
    return Dataset(recs, build_vocabulary(recs))


def _flat_graph(vocab, rng):
    ids = list(range(len(vocab)))
    pairs = set()
    for i in ids:
        for j in rng.choice(len(vocab), size=2, replace=False):
            if i != int(j):
                pairs.add((min(i, int(j)), max(i, int(j))))
    src = [a for a, b in pairs] + [b for a, b in pairs]
    dst = [b for a, b in pairs] + [a for a, b in pairs]
    return KnowledgeGraph(vocab, [EdgeSet("rel", np.array(src), np.array(dst))])


def test_dual_stack_identical_parameters_equals_single_stack():
    ds = _toy_dataset()
    rng = np.random.default_rng(3)
    graph = _flat_graph(ds.vocabulary, rng)
    emb = DualStackGraphEmbedder(ds.vocabulary, 4, graph, np.random.default_rng(4),
                                 depth=2, stacks=2)
    # copy stack 0 parameters into stack 1
    for name in list(emb.params):
        if name.startswith("embedder/s0/"):
            emb.params[name.replace("/s0/", "/s1/")] = emb.params[name].copy()
    single = DualStackGraphEmbedder(ds.vocabulary, 4, graph, np.random.default_rng(4),
                                    depth=2, stacks=1)
    for name in list(single.params):
        if name.startswith("embedder/s0/") or name == "embedder/feat":
            single.params[name] = emb.params[name].copy()
    assert np.array_equal(emb.compute_table(), single.compute_table())


def test_dual_stack_output_dominates_each_stack():
    ds = _toy_dataset()
    rng = np.random.default_rng(5)
    graph = _flat_graph(ds.vocabulary, rng)
    emb = DualStackGraphEmbedder(ds.vocabulary, 4, graph, rng, depth=2, stacks=2)
    table = emb.compute_table()
    for s in range(2):
        solo = DualStackGraphEmbedder(ds.vocabulary, 4, graph, np.random.default_rng(0),
                                      depth=2, stacks=1)
        solo.params["embedder/feat"] = emb.params["embedder/feat"]
        for name, arr in emb.params.items():
            if name.startswith(f"embedder/s{s}/"):
                solo.params[name.replace(f"/s{s}/", "/s0/")] = arr
        assert np.all(table >= solo.compute_table() - 1e-12)


def test_matrix_embedder_table_is_parameter():
    ds = _toy_dataset()
    emb = MatrixEmbedder(ds.vocabulary, 5, np.random.default_rng(0))
    assert np.array_equal(emb.compute_table(), emb.params["embedder/matrix"])


def test_hetero_single_active_edge_set_equals_plain_stack():
    ds = _toy_dataset()
    emb = HeteroTreeCoEmbedder(ds.vocabulary, 3, ds, None, np.random.default_rng(6), depth=2)
    # silence every edge set except the disease hierarchy
    for name in emb.params:
        if name.startswith("embedder/l") and "/icd_hier/" not in name:
            emb.params[name][:] = 0.0
    table = emb.compute_table()

    # oracle: run a plain SAGE stack over just the icd_hier edge set
    icd = emb.graph.edge_set("icd_hier")
    tape = ad.Tape()
    H = tape.constant(emb.params["embedder/feat"])
    for layer in range(2):
        prefix = f"embedder/l{layer}/icd_hier"
        H = sage_layer(tape, H, icd,
                       tape.constant(emb.params[f"{prefix}/self"]),
                       tape.constant(emb.params[f"{prefix}/neigh"]),
                       tape.constant(emb.params[f"{prefix}/bias"]),
                       apply_relu=layer < 1)
    expected = H.data[emb.node_map]
    n_dm = emb.node_map.size
    assert np.allclose(table[:n_dm], expected, atol=1e-12)


def test_tree_pair_lookup_covers_both_ontologies():
    ds = _toy_dataset()
    emb = TreePairEmbedder(ds.vocabulary, 4, np.random.default_rng(7), depth=2)
    table = emb.compute_table()
    assert table.shape == (len(ds.vocabulary), 4)
    assert not emb.supports_text
    # note-concept rows are zero placeholders, never looked up
    for i in ds.vocabulary.type_slice("n"):
        assert np.all(table[i] == 0.0)


def test_embedder_permutation_equivariance():
    # renaming concepts permutes the canonical vocabulary order; with node
    # features permuted the same way, the table permutes identically
    ds = _toy_dataset()
    vocab = ds.vocabulary
    rng = np.random.default_rng(8)
    graph = _flat_graph(vocab, rng)
    emb = DualStackGraphEmbedder(vocab, 4, graph, rng, depth=2, stacks=2)
    table = emb.compute_table()

    rename = {cid: f"z{len(vocab) - i:03d}_{cid}" for i, cid in enumerate(vocab.ids)}
    new_vocab = Vocabulary.from_pairs([(rename[c], t) for c, t in zip(vocab.ids, vocab.types)])
    perm = np.array([new_vocab.index[rename[c]] for c in vocab.ids])
    es = graph.edge_sets[0]

    def remap_idx(i):
        return int(perm[i])

    new_graph = KnowledgeGraph(
        new_vocab,
        [EdgeSet("rel", np.array([remap_idx(s) for s in es.src]),
                 np.array([remap_idx(t) for t in es.dst]))],
    )
    emb2 = DualStackGraphEmbedder(new_vocab, 4, new_graph, np.random.default_rng(0),
                                  depth=2, stacks=2)
    feat = np.empty_like(emb.params["embedder/feat"])
    feat[perm] = emb.params["embedder/feat"]
    emb2.params["embedder/feat"] = feat
    for name, arr in emb.params.items():
        if name != "embedder/feat":
            emb2.params[name] = arr
    table2 = emb2.compute_table()
    # relabeling reorders neighbor summation, so equality is up to float
    # associativity, not bitwise
    assert np.allclose(table2[perm], table, atol=1e-9, rtol=1e-9)


def test_depth_l_locality_is_bitwise():
    ds = _toy_dataset()
    vocab = ds.vocabulary
    # long path graph: perturbing beyond L hops cannot reach the probe
    n = len(vocab)
    src = np.array(list(range(n - 1)) + list(range(1, n)))
    dst = np.array(list(range(1, n)) + list(range(n - 1)))
    graph = KnowledgeGraph(vocab, [EdgeSet("rel", src, dst)])
    depth = 2
    rng = np.random.default_rng(9)
    emb = DualStackGraphEmbedder(vocab, 3, graph, rng, depth=depth, stacks=2)
    before = emb.compute_table()
    probe, far = 0, depth + 1
    emb.params["embedder/feat"][far] += 10.0
    emb.invalidate()
    after = emb.compute_table()
    assert np.array_equal(before[probe], after[probe])
    assert not np.array_equal(before[far], after[far])


def test_frozen_embedder_serves_cached_constant():
    ds = _toy_dataset()
    emb = MatrixEmbedder(ds.vocabulary, 4, np.random.default_rng(10))
    emb.freeze()
    tape = ad.Tape()
    t = emb.table(tape)
    assert not t.needs_grad
    assert emb.tape_params(tape) is None
    assert np.array_equal(t.data, emb.params["embedder/matrix"])


def test_lookup_gradients_flow_to_table():
    ds = _toy_dataset()
    rng = np.random.default_rng(11)
    graph = _flat_graph(ds.vocabulary, rng)

    def fn(params):
        emb = DualStackGraphEmbedder(ds.vocabulary, 2, graph, np.random.default_rng(0),
                                     depth=1, stacks=1)
        emb.params = dict(params)
        tape = ad.Tape()
        table = emb.table(tape)
        rows = concepts.lookup(tape, table, [0, 0, 2])
        return tape, ad.sum_all(tape, ad.mul(tape, rows, rows))

    emb0 = DualStackGraphEmbedder(ds.vocabulary, 2, graph, np.random.default_rng(0),
                                  depth=1, stacks=1)
    assert ad.finite_diff_check(fn, emb0.params) < 1e-6


def test_node_feature_file_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    mat = rng.normal(size=(5, 3))
    for binary in (False, True):
        path = tmp_path / f"feats_{binary}.bin"
        write_node_features(path, mat, binary=binary)
        back = read_node_features(path)
        if binary:
            assert np.array_equal(back, mat)
        else:
            assert np.allclose(back, mat, atol=0)  # repr round-trips exactly
            assert np.array_equal(back, mat)


def test_file_features_frozen_and_projected(tmp_path):
    ds = _toy_dataset()
    rng = np.random.default_rng(13)
    graph = _flat_graph(ds.vocabulary, rng)
    feats = rng.normal(size=(graph.n_nodes, 7))  # k0 != k forces a projection
    path = tmp_path / "feats.txt"
    write_node_features(path, feats)
    emb = build_embedder("umls", ds.vocabulary, 4, rng, graph=graph,
                         feature_file=str(path))
    assert "embedder/feat" in emb.frozen_arrays
    assert "embedder/proj/w" in emb.params
    snapshot = emb.frozen_arrays["embedder/feat"].copy()
    emb.compute_table()
    assert np.array_equal(emb.frozen_arrays["embedder/feat"], snapshot)


def test_build_embedder_rejects_unknown_variant():
    ds = _toy_dataset()
    with pytest.raises(ValueError):
        build_embedder("nope", ds.vocabulary, 4, np.random.default_rng(0))


def test_graph_missing_dataset_concept_rejected():
    ds = _toy_dataset()
    small = Vocabulary.from_pairs([("428.0", "d")])
    graph = KnowledgeGraph(small, [EdgeSet("rel", np.array([], dtype=int),
                                           np.array([], dtype=int))])
    with pytest.raises(ValueError, match="missing"):
        DualStackGraphEmbedder(ds.vocabulary, 4, graph, np.random.default_rng(0))
