"""Command-line entry point: generate / pretrain / finetune / evaluate /
explain / sweep, driven by a TOML config with dotted-path overrides.

Every command writes its artifacts plus a manifest (config hash, input
hashes, seed, wall time) into the output directory. Exit codes: 0 success,
2 missing prerequisite artifact, 3 invalid configuration, 4 numerical
divergence, 1 unexpected error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .autodiff import NumericsError
from .checkpoint import CheckpointError, file_sha256
from .config import ConfigError, config_hash, load_config
from .data import save_dataset, save_splits
from .explain import (
    attention_entropy_report,
    curve_csv,
    evaluate_task,
    gnn_explain,
    history_contains_prefix,
    masking_robustness_curve,
    note_type_distribution,
    rank_concepts,
    reconstruction_metric,
    subgroup_eval,
)
from .finetune import finetune
from .graphs import graph_stats, write_edges_tsv, write_vocab_tsv
from .pretraining import history_csv, pretrain
from .runtime import (
    CLUSTERS_FILE,
    CORPUS_FILE,
    EDGES_FILE,
    SPLITS_FILE,
    VOCAB_FILE,
    MissingArtifactError,
    build_base_model,
    finetune_config_from,
    load_pretrain_checkpoint,
    load_task_checkpoint,
    pretrain_config_from,
    resolve_data,
    save_pretrain_checkpoint,
    save_task_checkpoint,
    task_spec_from,
)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_MISSING = 2
EXIT_CONFIG = 3
EXIT_DIVERGED = 4

PRETRAIN_CKPT = "pretrain.ckpt"


def _out_dir(cfg):
    path = cfg["output"]["dir"]
    os.makedirs(path, exist_ok=True)
    return path


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


def _manifest(out, command, cfg, seed, inputs, outputs, t0):
    payload = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "input_hashes": {p: file_sha256(p) for p in sorted(inputs) if os.path.exists(p)},
        "outputs": sorted(os.path.basename(p) for p in outputs),
        "wall_time_s": round(time.time() - t0, 3),
    }
    path = os.path.join(out, "manifest.json")
    _write(path, json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return path


def cmd_generate(cfg):
    t0 = time.time()
    if cfg["data"]["source"] != "synthetic":
        raise ConfigError("generate requires data.source = 'synthetic'")
    out = _out_dir(cfg)
    data = resolve_data(cfg)
    corpus = data.corpus
    outputs = []
    outputs.append(_save_to(out, CORPUS_FILE, save_dataset, data.dataset))
    outputs.append(_save_to(out, SPLITS_FILE, save_splits, data.splits))
    outputs.append(_save_to(out, VOCAB_FILE, write_vocab_tsv, data.dataset.vocabulary))
    edges_path = os.path.join(out, EDGES_FILE)
    write_edges_tsv(corpus.kg_edges, edges_path)
    outputs.append(edges_path)
    clusters_path = os.path.join(out, CLUSTERS_FILE)
    _write(clusters_path, json.dumps(
        {"schema": 1, "clusters": {k: list(v) for k, v in corpus.cluster_of_patient.items()}},
        sort_keys=True, indent=1) + "\n")
    outputs.append(clusters_path)
    graph = data.graph
    if graph is None:
        from .graphs import graph_from_edge_list

        graph = graph_from_edge_list(data.dataset.vocabulary, corpus.kg_edges)
    stats = graph_stats(graph, data.dataset, {
        "pretrain": data.splits.pretrain, "train": data.splits.train,
        "validation": data.splits.validation, "test": data.splits.test,
    })
    stats_path = os.path.join(out, "graph_stats.json")
    _write(stats_path, stats.to_json(n_patients=len(data.dataset.records)) + "\n")
    outputs.append(stats_path)
    _manifest(out, "generate", cfg, cfg["data"]["seed"], [], outputs, t0)
    print(f"generated {len(data.dataset.records)} patients, "
          f"{len(data.dataset.vocabulary)} concepts -> {out}")
    return EXIT_OK


def _save_to(out, name, fn, obj):
    path = os.path.join(out, name)
    fn(obj, path)
    return path


def cmd_pretrain(cfg):
    t0 = time.time()
    out = _out_dir(cfg)
    data = resolve_data(cfg)
    model = build_base_model(cfg, data)
    pcfg = pretrain_config_from(cfg)
    history, adam, rng_state = pretrain(
        data.dataset, data.splits, model, pcfg,
        log=lambda row: print(_fmt_row("pretrain", row)),
    )
    ckpt = os.path.join(out, PRETRAIN_CKPT)
    save_pretrain_checkpoint(ckpt, model, cfg, adam=adam, rng_state=rng_state,
                             history=history)
    hist = _write(os.path.join(out, "pretrain_history.csv"), history_csv(history))
    _manifest(out, "pretrain", cfg, pcfg.seed, list((data.files or {}).values()),
              [ckpt, hist], t0)
    print(f"pretrained {len(history)} epochs -> {ckpt}")
    return EXIT_OK


def cmd_finetune(cfg):
    t0 = time.time()
    out = _out_dir(cfg)
    data = resolve_data(cfg)
    ckpt_in = cfg["finetune"]["checkpoint"]
    if not ckpt_in:
        raise MissingArtifactError("finetune.checkpoint is required")
    base, _ = load_pretrain_checkpoint(ckpt_in, cfg, data)
    task = task_spec_from(cfg, base.vocab)
    fcfg = finetune_config_from(cfg)
    model, history = finetune(
        data.dataset, data.splits, base, task, fcfg,
        log=lambda row: print(_fmt_row(task.name, row)),
    )
    ckpt = os.path.join(out, f"task_{task.name}.ckpt")
    save_task_checkpoint(ckpt, model, cfg, history=history)
    hist = _write(os.path.join(out, "finetune_history.csv"), history_csv(history))
    inputs = [ckpt_in] + list((data.files or {}).values())
    _manifest(out, "finetune", cfg, fcfg.seed, inputs, [ckpt, hist], t0)
    print(f"fine-tuned {task.name} ({len(history)} epochs) -> {ckpt}")
    return EXIT_OK


def cmd_evaluate(cfg):
    t0 = time.time()
    out = _out_dir(cfg)
    data = resolve_data(cfg)
    ckpt_in = cfg["task"]["checkpoint"]
    if not ckpt_in:
        raise MissingArtifactError("task.checkpoint is required for evaluate")
    model, _ = load_task_checkpoint(ckpt_in, cfg, data)
    threshold = cfg["task"]["threshold"]
    if cfg["task"]["subgroup"] == "hf_history":
        report = subgroup_eval(model, data.dataset, data.splits.test,
                               history_contains_prefix(cfg["task"]["hf_prefix"]),
                               threshold=threshold,
                               names=("hf_history", "no_hf_history"))
    else:
        report = evaluate_task(model, data.dataset, data.splits.test, threshold=threshold)
    outputs = []
    outputs.append(_write(os.path.join(out, "metrics.json"), report.to_json() + "\n"))
    rows = sorted(report.metrics.items())
    csv = "metric,value\n" + "".join(f"{k},{repr(float(v))}\n" for k, v in rows)
    outputs.append(_write(os.path.join(out, "metrics.csv"), csv))
    from .plotting import bar_chart

    fig = bar_chart(os.path.join(out, "metrics.svg"), [k for k, _ in rows],
                    [v for _, v in rows], title=f"{model.task.name} (test)",
                    ylabel="value", rotate=30)
    outputs.append(fig)
    inputs = [ckpt_in] + list((data.files or {}).values())
    _manifest(out, "evaluate", cfg, cfg["finetune"]["seed"], inputs, outputs, t0)
    print(report.to_json())
    return EXIT_OK


def cmd_explain(cfg):
    t0 = time.time()
    out = _out_dir(cfg)
    data = resolve_data(cfg)
    ckpt_in = cfg["explain"]["checkpoint"]
    if not ckpt_in:
        raise MissingArtifactError("explain.checkpoint is required")
    model, _ = load_pretrain_checkpoint(ckpt_in, cfg, data)
    e = cfg["explain"]
    if not e["concept"] and not e["patient"]:
        raise ConfigError("explain needs explain.concept and/or explain.patient")
    outputs = []
    from .plotting import bar_chart, grouped_bar_chart

    if e["concept"]:
        ex = gnn_explain(model.embedder, e["concept"], hops=min(e["hops"],
                         getattr(model.embedder, "depth", 1)),
                         threshold=e["threshold"], budget=e["budget"], seed=e["seed"])
        outputs.append(_write(os.path.join(out, "explanation_edges.tsv"), ex.to_tsv()))
        top = ex.edges[:15]
        if top:
            outputs.append(bar_chart(
                os.path.join(out, "explanation_weights.svg"),
                [f"{a}-{b}" for a, b, _ in top], [w for _, _, w in top],
                title=f"edge mask weights around {e['concept']}", ylabel="mask",
                rotate=60))
        print(f"explanation around {e['concept']}: {len(ex.edges)} edges "
              f"over {ex.n_subgraph_nodes} subgraph nodes")
    if e["patient"]:
        rec = data.dataset.by_id.get(e["patient"])
        if rec is None:
            raise MissingArtifactError(f"patient '{e['patient']}' not in the dataset")
        if e["visit"] >= len(rec.visits):
            raise ConfigError(f"patient has {len(rec.visits)} visits; "
                              f"explain.visit={e['visit']} is out of range")
        visit = rec.visits[e["visit"]]
        ranked, aggregates = rank_concepts(model, visit)
        csv = "concept,type,score\n" + "".join(
            f"{c},{t},{repr(s)}\n" for c, t, s in ranked)
        outputs.append(_write(os.path.join(out, "attention_ranking.csv"), csv))
        agg_rows = sorted(aggregates.items(), key=lambda kv: -kv[1])
        csv = "category,score_p90\n" + "".join(
            f"{c},{repr(s)}\n" for c, s in agg_rows)
        outputs.append(_write(os.path.join(out, "attention_categories.csv"), csv))
        top = ranked[:15]
        outputs.append(bar_chart(
            os.path.join(out, "attention_scores.svg"),
            [c for c, _, _ in top], [s for _, _, s in top],
            title=f"attention, patient {e['patient']} visit {e['visit']}",
            ylabel="CLS attention", rotate=60))
        dist = note_type_distribution(model, data.dataset, data.splits.test)
        if dist:
            csv = "note_type,corpus_fraction,top_attended_fraction\n" + "".join(
                f"{nt},{repr(v['corpus_fraction'])},{repr(v['top_attended_fraction'])}\n"
                for nt, v in sorted(dist.items()))
            outputs.append(_write(os.path.join(out, "note_type_distribution.csv"), csv))
            outputs.append(grouped_bar_chart(
                os.path.join(out, "note_types.svg"), list(sorted(dist)),
                {"corpus": [dist[nt]["corpus_fraction"] for nt in sorted(dist)],
                 "top attended": [dist[nt]["top_attended_fraction"] for nt in sorted(dist)]},
                title="note-type distribution", ylabel="fraction"))
    inputs = [ckpt_in] + list((data.files or {}).values())
    _manifest(out, "explain", cfg, e["seed"], inputs, outputs, t0)
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweeps


def _pretrain_for_sweep(cfg, data, lam=None, weights=None, seed=None):
    sub = copy.deepcopy(cfg)
    if lam is not None:
        sub["training"]["lambda_sum"] = float(lam)
    if weights is not None:
        for name, value in zip(("w_dd", "w_md", "w_mm", "w_dm"), weights):
            sub["training"][name] = float(value)
    if seed is not None:
        sub["training"]["seed"] = int(seed)
    model = build_base_model(sub, data)
    pretrain(data.dataset, data.splits, model, pretrain_config_from(sub))
    return sub, model


def _lambda_cell(cfg, lam, seed):
    """One (lambda, seed) pretraining cell; safe to run in a worker process
    (everything is rebuilt from the config)."""
    data = resolve_data(cfg)
    _, model = _pretrain_for_sweep(cfg, data, lam=lam, seed=seed)
    test_visits = [v for p in data.splits.test for v in data.dataset.by_id[p].visits]
    entropy = attention_entropy_report(model, data.dataset, data.splits.test)
    recon = reconstruction_metric(model, test_visits, fraction=0.0)
    return {"lambda": float(lam), "seed": int(seed),
            "cls_attention_entropy": entropy, "recon_auprc": recon}


def _sweep_lambda(cfg, data, out):
    cells = [(lam, seed) for lam in cfg["sweep"]["values"]
             for seed in cfg["sweep"]["seeds"]]
    workers = cfg["sweep"]["workers"]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_lambda_cell, *zip(*[(cfg, l, s) for l, s in cells])))
    else:
        rows = [_lambda_cell(cfg, lam, seed) for lam, seed in cells]
    for r in rows:
        print(f"sweep lambda={r['lambda']} seed={r['seed']} "
              f"entropy={r['cls_attention_entropy']:.4f} "
              f"recon_auprc={r['recon_auprc']:.4f}")
    lams = sorted({r["lambda"] for r in rows})
    mean = {m: [float(np.mean([r[m] for r in rows if r["lambda"] == l])) for l in lams]
            for m in ("cls_attention_entropy", "recon_auprc")}
    from .plotting import line_chart

    fig = line_chart(os.path.join(out, "sweep.svg"), lams, mean,
                     title="sum-loss weight sweep", xlabel="lambda", logx=True)
    return rows, [fig]


def _sweep_horizon(cfg, data, out):
    ckpt = cfg["sweep"]["checkpoint"]
    if not ckpt:
        raise MissingArtifactError("sweep.checkpoint is required for a horizon sweep")
    rows = []
    for horizon in cfg["sweep"]["values"]:
        sub = copy.deepcopy(cfg)
        sub["task"]["name"] = "readmission"
        sub["task"]["horizon_days"] = float(horizon)
        base, _ = load_pretrain_checkpoint(ckpt, sub, data)
        task = task_spec_from(sub, base.vocab)
        model, _ = finetune(data.dataset, data.splits, base, task,
                            finetune_config_from(sub))
        report = evaluate_task(model, data.dataset, data.splits.test,
                               threshold=sub["task"]["threshold"])
        rows.append({"horizon_days": float(horizon), **report.metrics})
        print(f"sweep horizon={horizon}d auroc={report.metrics['auroc']:.4f}")
    from .plotting import line_chart

    fig = line_chart(os.path.join(out, "sweep.svg"),
                     [r["horizon_days"] for r in rows],
                     {"auroc": [r["auroc"] for r in rows]},
                     title="readmission horizons", xlabel="horizon (days)")
    return rows, [fig]


def _sweep_loss_weights(cfg, data, out):
    rows = []
    for weights in cfg["sweep"]["values"]:
        if not isinstance(weights, list) or len(weights) != 4:
            raise ConfigError("loss_weights sweep values must be 4-element lists")
        sub, model = _pretrain_for_sweep(cfg, data, weights=weights)
        test_visits = [v for p in data.splits.test for v in data.dataset.by_id[p].visits]
        recon = reconstruction_metric(model, test_visits, fraction=0.0)
        rows.append({"w_dd": weights[0], "w_md": weights[1], "w_mm": weights[2],
                     "w_dm": weights[3], "recon_auprc": recon})
        print(f"sweep weights={weights} recon_auprc={recon:.4f}")
    from .plotting import bar_chart

    fig = bar_chart(os.path.join(out, "sweep.svg"),
                    ["/".join(str(v) for v in (r["w_dd"], r["w_md"], r["w_mm"], r["w_dm"]))
                     for r in rows],
                    [r["recon_auprc"] for r in rows],
                    title="reconstruction-weight presets", ylabel="recon AuPRC", rotate=30)
    return rows, [fig]


def _sweep_masking(cfg, data, out):
    ckpt = cfg["sweep"]["checkpoint"]
    if not ckpt:
        raise MissingArtifactError("sweep.checkpoint is required for a masking sweep")
    model, _ = load_pretrain_checkpoint(ckpt, cfg, data)
    test_visits = [v for p in data.splits.test for v in data.dataset.by_id[p].visits]
    fractions = [float(f) for f in cfg["sweep"]["fractions"]]
    rows = []
    series = {}
    for strategy in ("random", "attention"):
        curve = masking_robustness_curve(model, test_visits, cfg["sweep"]["modality"],
                                         strategy, fractions,
                                         seed=cfg["training"]["seed"])
        rows.extend(curve)
        series[strategy] = [r["metric"] for r in curve]
        print(f"sweep masking {strategy}: " +
              " ".join(f"{r['metric']:.3f}" for r in curve))
    from .plotting import line_chart

    fig = line_chart(os.path.join(out, "sweep.svg"), fractions, series,
                     title=f"masking robustness ({cfg['sweep']['modality']})",
                     xlabel="masked fraction", ylabel="recon AuPRC")
    return rows, [fig]


def cmd_sweep(cfg):
    t0 = time.time()
    out = _out_dir(cfg)
    data = resolve_data(cfg)
    kind = cfg["sweep"]["kind"]
    runner = {"lambda": _sweep_lambda, "horizon": _sweep_horizon,
              "loss_weights": _sweep_loss_weights, "masking": _sweep_masking}[kind]
    rows, figures = runner(cfg, data, out)
    csv_path = _write(os.path.join(out, "sweep.csv"), curve_csv(rows))
    inputs = list((data.files or {}).values())
    if cfg["sweep"]["checkpoint"]:
        inputs.append(cfg["sweep"]["checkpoint"])
    _manifest(out, "sweep", cfg, cfg["training"]["seed"], inputs,
              [csv_path] + figures, t0)
    print(f"sweep '{kind}': {len(rows)} rows -> {csv_path}")
    return EXIT_OK


def _fmt_row(tag, row):
    parts = [f"{tag} epoch {row['epoch']}"]
    for key in ("train_loss", "val_loss"):
        if key in row:
            parts.append(f"{key}={row[key]:.4f}")
    return " ".join(parts)


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "sweep": cmd_sweep,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="medrep",
        description="knowledge-graph concept embeddings and EHR visit-sequence models",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the command's primary seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE", help="set a config key (repeatable)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides=args.override, seed=args.seed,
                          out=args.out, command=args.command)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericsError as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
