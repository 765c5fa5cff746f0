"""Task evaluation, attention interpretability, explanation subgraphs,
masking-robustness curves, and subgroup breakdowns.

All functions here treat models as frozen: forward passes run on constant
tensors, so nothing is recorded on a tape unless a gradient is needed
(only the explanation mask optimizer needs one).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .data import normalize_code
from .finetune import predict_split, task_samples
from .graphs import khop_neighborhood
from .metrics import (
    MetricReport,
    auprc_sample_avg,
    auroc,
    f1_binary,
    f1_sample_macro,
    f1_weighted,
    f1_weighted_inflated,
    recall_at_k,
    shannon_entropy,
    weighted_auroc,
)
from .optim import Adam
from .visits import MASK_ID, encode_token_set, extend_table


# ---------------------------------------------------------------------------
# task evaluation


def compute_task_metrics(scores, labels, task, threshold=0.5, recall_ks=(20, 40)):
    metrics = {}
    excluded = {}
    if task.name in ("heart_failure", "readmission"):
        metrics["auroc"] = auroc(scores[:, 0], labels)
        metrics["f1"] = f1_binary(scores[:, 0], labels, threshold)
    elif task.name == "medication_recommendation":
        metrics["auprc"], excluded["auprc"] = auprc_sample_avg(scores, labels)
        metrics["f1_samples"] = f1_sample_macro(scores, labels, threshold)
    elif task.name == "diagnosis":
        metrics["w_f1"] = f1_weighted(scores, labels, threshold)
        metrics["w_f1_inflated"] = f1_weighted_inflated(scores, labels)
        for k in recall_ks:
            kk = min(k, scores.shape[1])
            metrics[f"recall_at_{k}"], excluded[f"recall_at_{k}"] = recall_at_k(
                scores, labels, kk
            )
    elif task.name == "los":
        metrics["w_auroc"] = weighted_auroc(scores, labels)
    return metrics, excluded


def evaluate_task(model, dataset, patient_ids, threshold=0.5):
    samples = task_samples(dataset, patient_ids, model.task, model.base.vocab)
    scores, labels = predict_split(model, dataset, samples)
    metrics, excluded = compute_task_metrics(scores, labels, model.task, threshold)
    return MetricReport(task=model.task.name, metrics=metrics, n_samples=len(samples),
                        threshold=threshold, excluded=excluded)


def history_contains_prefix(prefix="428"):
    """Subgroup predicate: any code in visits 0..t-1 carries the prefix."""

    def predicate(patient, t):
        return any(
            normalize_code(c).startswith(prefix)
            for v in patient.visits[:t]
            for c in v.codes_d
        )

    return predicate


def subgroup_eval(model, dataset, patient_ids, predicate, threshold=0.5,
                  names=("subgroup", "complement")):
    """Metrics overall and per predicate partition, with counts/prevalences.
    Empty subgroups are reported with a count of zero, not an error."""
    samples = task_samples(dataset, patient_ids, model.task, model.base.vocab)
    scores, labels = predict_split(model, dataset, samples)
    overall, excluded = compute_task_metrics(scores, labels, model.task, threshold)
    report = MetricReport(task=model.task.name, metrics=overall, n_samples=len(samples),
                          threshold=threshold, excluded=excluded)
    flags = np.array([bool(predicate(dataset.by_id[s.patient_id], s.t)) for s in samples])
    for name, mask in ((names[0], flags), (names[1], ~flags)):
        entry = {"n_samples": int(mask.sum())}
        if mask.any():
            entry["prevalence"] = float(np.mean(np.asarray(labels)[mask] == 1)) \
                if model.task.loss == "binary" else float(np.mean(labels[mask]))
            try:
                sub_metrics, _ = compute_task_metrics(scores[mask], labels[mask],
                                                      model.task, threshold)
                entry.update(sub_metrics)
            except Exception as exc:  # degenerate slice (single class etc.)
                entry["error"] = str(exc)
        report.subgroups[name] = entry
    return report


def prevalence_prior_scores(labels):
    """Constant-score baseline; AuROC lands at 0.5 by tie handling."""
    labels = np.asarray(labels)
    return np.full(len(labels), float(np.mean(labels == 1)))


def frequency_prior_scores(dataset, patient_ids, vocab, ctype):
    """Scores proportional to training-split concept frequency (one static
    ranking for every sample)."""
    from .graphs import concept_frequencies

    freq = concept_frequencies(dataset, patient_ids, vocab)
    sl = vocab.type_slice(ctype)
    return freq[sl.start:sl.stop].copy()


# ---------------------------------------------------------------------------
# attention interpretability


def _eval_constants(tape, model):
    P = {name: tape.constant(arr) for name, arr in model.encoder.items()}
    for name, arr in model.heads.items():
        P[name] = tape.constant(arr)
    table = tape.constant(model.embedder.compute_table())
    return P, extend_table(tape, table, P)


def _visit_token_ids(model, visit, ctype):
    return [model.vocab.index[c] for c in visit.concept_ids(ctype)], \
        list(visit.negation_flags(ctype))


def visit_attention(model, visit, include_text=None):
    """CLS attention per concept type for one visit (no corruption)."""
    include_text = model.include_text if include_text is None else include_text
    tape = ad.Tape()
    P, table_ext = _eval_constants(tape, model)
    out = {}
    for ctype in ("d", "m", "n") if include_text else ("d", "m"):
        ids, flags = _visit_token_ids(model, visit, ctype)
        enc = encode_token_set(tape, P, model.encoder_cfg, table_ext, ids, flags, ctype)
        out[ctype] = enc
    return out


def attention_entropy_report(model, dataset, patient_ids):
    """Mean Shannon entropy (natural log) of CLS-to-token attention over all
    visits and concept types; visits without tokens of a type are skipped."""
    entropies = []
    for rec in dataset.patients(patient_ids):
        for visit in rec.visits:
            for ctype, enc in visit_attention(model, visit).items():
                if enc.attention is not None:
                    entropies.append(shannon_entropy(enc.attention))
    return float(np.mean(entropies)) if entropies else 0.0


def percentile_90(values):
    """Nearest-rank 90th percentile (deterministic sort-and-index)."""
    values = sorted(values)
    idx = max(math.ceil(0.9 * len(values)) - 1, 0)
    return values[idx]


def _category(concept_id, ctype, note_type=None):
    if ctype == "d":
        return normalize_code(concept_id)[:3]
    if ctype == "m":
        return concept_id[:1]
    return note_type or "note"


def rank_concepts(model, visit, include_text=None):
    """Concepts of one visit ranked by CLS attention, plus per-category
    90th-percentile aggregates (disease code prefix, medication prefix
    letter, or note type)."""
    encs = visit_attention(model, visit, include_text)
    note_types = {t.concept_id: t.note_type for t in visit.text_concepts}
    ranked = []
    for ctype, enc in encs.items():
        if enc.attention is None:
            continue
        for cid, score in zip(visit.concept_ids(ctype), enc.attention):
            ranked.append((cid, ctype, float(score)))
    ranked.sort(key=lambda x: (-x[2], x[0]))
    categories = {}
    for cid, ctype, score in ranked:
        cat = _category(cid, ctype, note_types.get(cid))
        categories.setdefault(cat, []).append(score)
    aggregates = {cat: percentile_90(scores) for cat, scores in categories.items()}
    return ranked, aggregates


def note_type_distribution(model, dataset, patient_ids, top_k=8):
    """Distribution of note types among each visit's top-k attended note
    tokens, next to the corpus-wide token distribution."""
    base_counts = {}
    top_counts = {}
    for rec in dataset.patients(patient_ids):
        for visit in rec.visits:
            if not visit.text_concepts:
                continue
            for tc in visit.text_concepts:
                base_counts[tc.note_type] = base_counts.get(tc.note_type, 0) + 1
            enc = visit_attention(model, visit)["n"]
            order = np.argsort(-enc.attention, kind="stable")[:top_k]
            tcs = list(visit.text_concepts)
            for i in order:
                nt = tcs[int(i)].note_type
                top_counts[nt] = top_counts.get(nt, 0) + 1
    total_base = sum(base_counts.values()) or 1
    total_top = sum(top_counts.values()) or 1
    out = {}
    for nt in sorted(set(base_counts) | set(top_counts)):
        out[nt] = {
            "corpus_fraction": base_counts.get(nt, 0) / total_base,
            "top_attended_fraction": top_counts.get(nt, 0) / total_top,
        }
    return out


# ---------------------------------------------------------------------------
# masking robustness

MODALITY_TYPES = {
    "d": ("d",),
    "m": ("m",),
    "n": ("n",),
    "structured": ("d", "m"),
    "all": ("d", "m", "n"),
}


def _masked_ids(ids, attention, fraction, strategy, rng):
    q = len(ids)
    n_mask = int(round(fraction * q))
    if n_mask == 0:
        return list(ids)
    if strategy == "attention":
        order = np.argsort(-np.asarray(attention), kind="stable")[:n_mask]
    else:
        order = rng.choice(q, size=n_mask, replace=False)
    out = list(ids)
    for i in order:
        out[int(i)] = MASK_ID
    return out


def reconstruction_metric(model, visits, fraction=0.0, modality="structured",
                          strategy="random", seed=0, batch_size=64):
    """Mean sample-averaged reconstruction AuPRC over the four directional
    decoders after masking a fraction of the chosen modality's tokens.

    strategy 'random' draws masked positions from the seed; 'attention'
    masks the highest-attended tokens of a clean forward pass first.
    """
    if modality not in MODALITY_TYPES:
        raise ValueError(f"unknown modality '{modality}'")
    if strategy not in ("random", "attention"):
        raise ValueError(f"unknown strategy '{strategy}'")
    affected = MODALITY_TYPES[modality]
    rng = np.random.default_rng(seed)
    types = ("d", "m", "n") if model.include_text else ("d", "m")
    all_scores = {(s, t): [] for s in ("d", "m") for t in ("d", "m")}
    all_targets = {"d": [], "m": []}
    from .data import multihot

    for lo in range(0, len(visits), batch_size):
        batch = visits[lo:lo + batch_size]
        tape = ad.Tape()
        P, table_ext = _eval_constants(tape, model)
        v_vecs = {t: [] for t in types}
        vocabulary = model.vocab
        for visit in batch:
            for ctype in types:
                ids, flags = _visit_token_ids(model, visit, ctype)
                if ctype in affected and fraction > 0 and ids:
                    if strategy == "attention":
                        clean = encode_token_set(tape, P, model.encoder_cfg, table_ext,
                                                 ids, flags, ctype)
                        ids = _masked_ids(ids, clean.attention, fraction, strategy, rng)
                    else:
                        ids = _masked_ids(ids, None, fraction, strategy, rng)
                enc = encode_token_set(tape, P, model.encoder_cfg, table_ext,
                                       ids, flags, ctype)
                v_vecs[ctype].append(enc.v)
            all_targets["d"].append(multihot(visit.concept_ids("d"), vocabulary, "d"))
            all_targets["m"].append(multihot(visit.concept_ids("m"), vocabulary, "m"))
        stacked = {t: ad.concat_rows(tape, v_vecs[t]) if len(v_vecs[t]) > 1 else v_vecs[t][0]
                   for t in types}
        for src in ("d", "m"):
            x = stacked[src]
            if model.include_text:
                x = ad.concat_cols(tape, [x, stacked["n"]])
            for dst in ("d", "m"):
                logits = nn.mlp(tape, P, f"heads/{src}{dst}", x)
                all_scores[(src, dst)].append(logits.data.copy())
    values = []
    for (src, dst), chunks in all_scores.items():
        scores = np.concatenate(chunks)
        targets = np.stack(all_targets[dst])
        value, _ = auprc_sample_avg(scores, targets)
        values.append(value)
    return float(np.mean(values))


def masking_robustness_curve(model, visits, modality, strategy, fractions, seed=0):
    """Rows of (fraction, metric) for progressively heavier masking."""
    if list(fractions) != sorted(fractions):
        raise ValueError("fractions must be ascending")
    rows = []
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise ValueError("fractions must lie in [0, 1]")
        metric = reconstruction_metric(model, visits, fraction=f, modality=modality,
                                       strategy=strategy, seed=seed)
        rows.append({"fraction": float(f), "modality": modality,
                     "strategy": strategy, "metric": metric})
    return rows


def curve_csv(rows):
    cols = sorted({k for row in rows for k in row})
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                              for c in cols))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# explanation subgraphs


@dataclass
class ExplanationGraph:
    seed_concept: str
    edges: list  # (src_id, dst_id, weight) with weight in [0,1]
    threshold: float
    n_subgraph_nodes: int

    def to_tsv(self):
        lines = [f"# seed\t{self.seed_concept}\tthreshold\t{self.threshold}"]
        for src, dst, w in self.edges:
            lines.append(f"{src}\t{dst}\t{repr(float(w))}")
        return "\n".join(lines) + "\n"


def gnn_explain(embedder, seed_concept, hops, threshold=0.5, budget=200,
                alpha=0.005, beta=0.1, lr=0.1, seed=0):
    """Optimize a soft edge mask on the seed's k-hop subgraph so the masked
    embedding stays close to the full-graph embedding, under mask-size and
    mask-entropy regularization. Returns edges whose mask weight clears the
    threshold (undirected duplicates collapsed by max weight).
    """
    graph = getattr(embedder, "graph", None)
    if graph is None:
        raise ValueError("gnn_explain needs a graph-based embedder")
    depth = getattr(embedder, "depth", 1)
    if hops > depth:
        raise ValueError(f"hops ({hops}) must not exceed the GNN depth ({depth})")
    gindex = graph.vocabulary.index.get(seed_concept)
    if gindex is None:
        raise KeyError(f"concept '{seed_concept}' not in the graph")
    ball = khop_neighborhood(graph, gindex, hops)
    target_row = embedder.vocab.index[seed_concept]
    target = embedder.compute_table()[target_row]

    # per edge set: positions whose both endpoints live in the subgraph
    selections = {}
    n_masked = 0
    for es in graph.edge_sets:
        pos = np.flatnonzero(
            np.fromiter(((int(s) in ball and int(t) in ball)
                         for s, t in zip(es.src, es.dst)), dtype=bool, count=es.n_edges)
        )
        if pos.size:
            sel = np.zeros((es.n_edges, pos.size))
            sel[pos, np.arange(pos.size)] = 1.0
            base = np.ones((es.n_edges, 1))
            base[pos] = 0.0
            selections[es.tag] = (pos, sel, base)
            n_masked += pos.size
    if n_masked == 0:
        return ExplanationGraph(seed_concept, [], threshold, len(ball))

    # start at mask 0.5, the entropy-neutral point, so reconstruction and the
    # size penalty decide each edge's direction before the entropy term
    # polarizes it
    rng = np.random.default_rng(seed)
    logits = {tag: 0.1 * rng.normal(size=(sel.shape[1], 1))
              for tag, (pos, sel, base) in selections.items()}
    adam = Adam(lr)
    for _ in range(budget):
        tape = ad.Tape()
        masks = {}
        reg = None
        for tag, (pos, sel, base) in selections.items():
            lg = tape.parameter(f"mask/{tag}", logits[tag])
            m = ad.sigmoid(tape, lg)
            full = ad.add(tape, ad.matmul(tape, tape.constant(sel), m), tape.constant(base))
            masks[tag] = full
            size_term = ad.scale(tape, ad.sum_all(tape, m), alpha)
            one = tape.constant(np.ones_like(logits[tag]))
            ent = ad.neg(tape, ad.add(
                tape,
                ad.sum_all(tape, ad.mul(tape, m, ad.log(tape, m))),
                ad.sum_all(tape, ad.mul(tape, ad.sub(tape, one, m),
                                        ad.log(tape, ad.sub(tape, one, m)))),
            ))
            ent = ad.scale(tape, ent, beta / m.data.size)
            term = ad.add(tape, size_term, ent)
            reg = term if reg is None else ad.add(tape, reg, term)
        table = embedder.table(tape, edge_masks=masks)
        row = ad.slice_rows(tape, table, target_row, target_row + 1)
        diff = ad.sub(tape, row, tape.constant(target[None, :]))
        loss = ad.add(tape, ad.sum_all(tape, ad.mul(tape, diff, diff)), reg)
        grads = ad.backward(tape, loss)
        mask_params = {f"mask/{tag}": logits[tag] for tag in logits}
        adam.step(mask_params, {k: g for k, g in grads.items() if k in mask_params})

    edges = {}
    for tag, (pos, sel, base) in selections.items():
        es = graph.edge_set(tag)
        weights = 1.0 / (1.0 + np.exp(-logits[tag][:, 0]))
        for p, w in zip(pos, weights):
            if w < threshold:
                continue
            a = graph.vocabulary.ids[int(es.src[p])]
            b = graph.vocabulary.ids[int(es.dst[p])]
            key = (tag,) + ((a, b) if es.directed else (min(a, b), max(a, b)))
            edges[key] = max(edges.get(key, 0.0), float(w))
    out = [(a, b, w) for (tag, a, b), w in sorted(edges.items(), key=lambda kv: (-kv[1], kv[0]))]
    return ExplanationGraph(seed_concept, out, threshold, len(ball))
