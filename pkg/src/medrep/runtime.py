"""Assembles datasets, graphs, and models from a resolved configuration, and
handles checkpoint persistence with compatibility checks."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, vocab_fingerprint
from .concepts import build_embedder
from .config import config_hash
from .data import SyntheticConfig, generate_synthetic, load_dataset, load_splits, make_splits
from .finetune import FinetuneConfig, TaskModel, init_task_model, make_task_spec
from .graphs import build_graph, graph_from_edge_list
from .pretraining import LossWeights, PretrainConfig, PretrainModel, init_model
from .visits import CorruptionConfig, EncoderConfig

CORPUS_FILE = "corpus.jsonl"
SPLITS_FILE = "splits.json"
VOCAB_FILE = "vocab.tsv"
EDGES_FILE = "edges.tsv"
CLUSTERS_FILE = "clusters.json"


class MissingArtifactError(FileNotFoundError):
    """A prerequisite artifact (dataset, checkpoint) is absent."""


@dataclass
class DataBundle:
    dataset: object
    splits: object
    graph: object = None  # flat concept graph (only the umls variant needs it)
    corpus: object = None  # SyntheticCorpus when generated in-process
    files: dict = None  # paths actually read, for manifest input hashes


def synthetic_config_from(cfg):
    d = cfg["data"]
    return SyntheticConfig(
        n_patients=d["patients"],
        seed=d["seed"],
        n_clusters=d["clusters"],
        chronic_prob=d["chronic_prob"],
        comorbid_prob=d["comorbid_prob"],
        note_noise_rate=d["note_noise_rate"],
        negation_rate=d["negation_rate"],
        mean_extra_visits=d["mean_extra_visits"],
        max_visits=d["max_visits"],
    )


def resolve_data(cfg):
    """Load the dataset/splits/graph configured under [data].

    source=synthetic regenerates everything deterministically in process;
    source=files reads the artifacts a `generate` run wrote.
    """
    needs_graph = cfg["model"]["variant"] == "umls"
    if cfg["data"]["source"] == "synthetic":
        corpus = generate_synthetic(synthetic_config_from(cfg))
        dataset = corpus.dataset
        splits = make_splits(dataset, tuple(cfg["data"]["split_fractions"]),
                             cfg["data"]["split_seed"])
        graph = graph_from_edge_list(dataset.vocabulary, corpus.kg_edges) \
            if needs_graph else None
        return DataBundle(dataset, splits, graph, corpus, files={})
    root = cfg["data"]["dir"]
    if not root:
        raise MissingArtifactError(
            "data.source=files needs data.dir (or the MEDREP_DATA_DIR env var)")
    paths = {
        "corpus": os.path.join(root, CORPUS_FILE),
        "splits": os.path.join(root, SPLITS_FILE),
    }
    for label, p in paths.items():
        if not os.path.exists(p):
            raise MissingArtifactError(f"missing {label} file: {p}")
    dataset = load_dataset(paths["corpus"])
    splits = load_splits(paths["splits"])
    graph = None
    if needs_graph:
        paths["vocab"] = os.path.join(root, VOCAB_FILE)
        paths["edges"] = os.path.join(root, EDGES_FILE)
        for label in ("vocab", "edges"):
            if not os.path.exists(paths[label]):
                raise MissingArtifactError(f"missing {label} file: {paths[label]}")
        graph = build_graph(paths["vocab"], paths["edges"])
    return DataBundle(dataset, splits, graph, None, files=paths)


def build_base_model(cfg, data):
    """Fresh pretraining model from the [model] section."""
    m = cfg["model"]
    rng = np.random.default_rng(m["init_seed"])
    embedder = build_embedder(
        m["variant"], data.dataset.vocabulary, m["k"], rng,
        graph=data.graph, dataset=data.dataset, train_ids=data.splits.pretrain,
        depth=m["gnn_depth"], stacks=m["gnn_stacks"],
        feature_file=m["feature_file"] or None,
    )
    encoder_cfg = EncoderConfig(k=m["k"], n_heads=m["n_heads"], n_layers=m["n_layers"],
                                ffn_mult=m["ffn_mult"])
    return init_model(data.dataset.vocabulary, embedder, rng,
                      include_text=m["include_text"], encoder_cfg=encoder_cfg,
                      decoder_hidden=m["decoder_hidden"])


def pretrain_config_from(cfg):
    t = cfg["training"]
    return PretrainConfig(
        lr=t["lr"], batch_size=t["batch_size"], max_epochs=t["max_epochs"],
        patience=t["patience"], min_delta=t["min_delta"],
        weights=LossWeights(dd=t["w_dd"], md=t["w_md"], mm=t["w_mm"], dm=t["w_dm"],
                            lambda_sum=t["lambda_sum"]).validate(),
        corruption=CorruptionConfig(
            selection_rate=t["selection_rate"], mask_prob=t["mask_prob"],
            replace_prob=t["replace_prob"], keep_prob=t["keep_prob"],
        ).validate(),
        decoder_hidden=cfg["model"]["decoder_hidden"],
        seed=t["seed"],
    )


def finetune_config_from(cfg):
    f = cfg["finetune"]
    return FinetuneConfig(
        lr=f["lr"], batch_size=f["batch_size"], max_epochs=f["max_epochs"],
        patience=f["patience"], min_delta=f["min_delta"], n_queries=f["n_queries"],
        head_hidden=tuple(f["head_hidden"]), seed=f["seed"],
    )


def task_spec_from(cfg, vocab):
    t = cfg["task"]
    return make_task_spec(t["name"], vocab, horizon_days=t["horizon_days"],
                          hf_prefix=t["hf_prefix"])


# ---------------------------------------------------------------------------
# checkpoints


def save_pretrain_checkpoint(path, model, cfg, adam=None, rng_state=None, history=None):
    arrays = dict(model.all_arrays())
    if adam is not None:
        arrays.update(adam.state_arrays())
    meta = {
        "kind": "pretrain",
        "config_hash": config_hash(cfg),
        "model": cfg["model"],
        "include_text": model.include_text,
        "vocab_sha": vocab_fingerprint(model.vocab),
        "adam_t": adam.t if adam else 0,
        "rng_state": rng_state or {},
        "epochs": len(history or []),
    }
    save_checkpoint(path, arrays, meta)
    return meta


def _check_compatible(meta, cfg, data, kind):
    if meta.get("kind") != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, found {meta.get('kind')!r}")
    if meta["vocab_sha"] != vocab_fingerprint(data.dataset.vocabulary):
        raise CheckpointError("checkpoint vocabulary does not match the dataset")
    if meta["model"] != cfg["model"]:
        diff = {k for k in meta["model"]
                if meta["model"].get(k) != cfg["model"].get(k)}
        raise CheckpointError(f"checkpoint model config differs on {sorted(diff)}")


def load_pretrain_checkpoint(path, cfg, data):
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing checkpoint: {path}")
    arrays, meta = load_checkpoint(path)
    _check_compatible(meta, cfg, data, "pretrain")
    model = build_base_model(cfg, data)
    _restore_arrays(model.all_arrays(), arrays, path)
    model.embedder.invalidate()
    return model, meta


def _restore_arrays(targets, stored, path):
    missing = set(targets) - set(stored)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:4]}...")
    for name, arr in targets.items():
        if stored[name].shape != arr.shape:
            raise CheckpointError(
                f"{path}: tensor '{name}' shape {stored[name].shape} != {arr.shape}")
        np.copyto(arr, stored[name])


def save_task_checkpoint(path, task_model, cfg, history=None):
    arrays = task_model.all_arrays()
    meta = {
        "kind": "task",
        "config_hash": config_hash(cfg),
        "model": cfg["model"],
        "task": {
            "name": task_model.task.name,
            "label_width": task_model.task.label_width,
            "loss": task_model.task.loss,
            "horizon_days": task_model.task.horizon_days,
            "hf_prefix": task_model.task.hf_prefix,
        },
        "n_queries": task_model.n_queries,
        "head_hidden": list(cfg["finetune"]["head_hidden"]),
        "include_text": task_model.base.include_text,
        "vocab_sha": vocab_fingerprint(task_model.base.vocab),
        "epochs": len(history or []),
    }
    save_checkpoint(path, arrays, meta)
    return meta


def load_task_checkpoint(path, cfg, data):
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing task checkpoint: {path}")
    arrays, meta = load_checkpoint(path)
    _check_compatible(meta, cfg, data, "task")
    base = build_base_model(cfg, data)
    task = make_task_spec(meta["task"]["name"], base.vocab,
                          horizon_days=meta["task"]["horizon_days"] or 365.0,
                          hf_prefix=meta["task"]["hf_prefix"])
    fin = FinetuneConfig(n_queries=meta["n_queries"],
                         head_hidden=tuple(meta["head_hidden"]))
    model = init_task_model(base, task, fin, np.random.default_rng(0))
    _restore_arrays(model.all_arrays(), arrays, path)
    base.embedder.invalidate()
    base.embedder.freeze()
    return model, meta
