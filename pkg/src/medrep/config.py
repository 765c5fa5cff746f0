"""Run configuration: TOML file with sections, schema-validated defaults,
dotted-path command-line overrides, and a content hash recorded in every
artifact."""

from __future__ import annotations

import copy
import hashlib
import json
import os

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

ENV_DATA_DIR = "MEDREP_DATA_DIR"


class ConfigError(ValueError):
    pass


def _enum(*values):
    def check(v):
        if v not in values:
            raise ConfigError(f"must be one of {values}, got {v!r}")
    return check


def _positive(v):
    if v <= 0:
        raise ConfigError(f"must be positive, got {v}")


def _nonneg(v):
    if v < 0:
        raise ConfigError(f"must be nonnegative, got {v}")


def _unit(v):
    if not 0.0 <= v <= 1.0:
        raise ConfigError(f"must be in [0, 1], got {v}")


def _noop(v):
    return None


# key -> (type, default, validator); bool checked before int (bool is int)
SCHEMA = {
    "data.source": (str, "synthetic", _enum("synthetic", "files")),
    "data.dir": (str, "", _noop),
    "data.patients": (int, 200, _positive),
    "data.seed": (int, 0, _nonneg),
    "data.clusters": (int, 6, _positive),
    "data.chronic_prob": (float, 0.85, _unit),
    "data.comorbid_prob": (float, 0.3, _unit),
    "data.note_noise_rate": (float, 0.1, _unit),
    "data.negation_rate": (float, 0.15, _unit),
    "data.mean_extra_visits": (float, 1.8, _nonneg),
    "data.max_visits": (int, 8, _positive),
    "data.split_fractions": (list, [0.7, 0.1, 0.2], _noop),
    "data.split_seed": (int, 0, _nonneg),
    "model.variant": (str, "umls", _enum("umls", "icd_atc", "icd_atc_co", "matrix")),
    "model.k": (int, 256, _positive),
    "model.gnn_depth": (int, 2, _positive),
    "model.gnn_stacks": (int, 2, _positive),
    "model.n_heads": (int, 2, _positive),
    "model.n_layers": (int, 1, _positive),
    "model.ffn_mult": (int, 4, _positive),
    "model.include_text": (bool, True, _noop),
    "model.decoder_hidden": (int, 128, _positive),
    "model.feature_file": (str, "", _noop),
    "model.init_seed": (int, 0, _nonneg),
    "training.lr": (float, 5e-4, _nonneg),
    "training.batch_size": (int, 32, _positive),
    "training.max_epochs": (int, 50, _positive),
    "training.patience": (int, 5, _positive),
    "training.min_delta": (float, 1e-4, _nonneg),
    "training.lambda_sum": (float, 0.25, _nonneg),
    "training.w_dd": (float, 1.0, _nonneg),
    "training.w_md": (float, 1.0, _nonneg),
    "training.w_mm": (float, 1.0, _nonneg),
    "training.w_dm": (float, 1.0, _nonneg),
    "training.selection_rate": (float, 0.15, _unit),
    "training.mask_prob": (float, 0.8, _unit),
    "training.replace_prob": (float, 0.1, _unit),
    "training.keep_prob": (float, 0.1, _unit),
    "training.seed": (int, 0, _nonneg),
    "finetune.checkpoint": (str, "", _noop),
    "finetune.lr": (float, 1e-4, _nonneg),
    "finetune.batch_size": (int, 32, _positive),
    "finetune.max_epochs": (int, 30, _positive),
    "finetune.patience": (int, 5, _positive),
    "finetune.min_delta": (float, 1e-4, _nonneg),
    "finetune.n_queries": (int, 1, _positive),
    "finetune.head_hidden": (list, [128, 128], _noop),
    "finetune.seed": (int, 0, _nonneg),
    "task.name": (str, "heart_failure",
                  _enum("medication_recommendation", "heart_failure", "diagnosis",
                        "readmission", "los")),
    "task.horizon_days": (float, 365.0, _positive),
    "task.hf_prefix": (str, "428", _noop),
    "task.threshold": (float, 0.5, _unit),
    "task.subgroup": (str, "", _enum("", "hf_history")),
    "task.checkpoint": (str, "", _noop),
    "explain.checkpoint": (str, "", _noop),
    "explain.concept": (str, "", _noop),
    "explain.hops": (int, 2, _positive),
    "explain.threshold": (float, 0.5, _nonneg),
    "explain.budget": (int, 200, _positive),
    "explain.patient": (str, "", _noop),
    "explain.visit": (int, 0, _nonneg),
    "explain.seed": (int, 0, _nonneg),
    "sweep.kind": (str, "lambda", _enum("lambda", "horizon", "loss_weights", "masking")),
    "sweep.values": (list, [0.0, 0.25, 1.0, 10.0], _noop),
    "sweep.fractions": (list, [0.0, 0.2, 0.4, 0.6, 0.8], _noop),
    "sweep.modality": (str, "structured",
                       _enum("d", "m", "n", "structured", "all")),
    "sweep.seeds": (list, [0], _noop),
    "sweep.workers": (int, 1, _positive),
    "sweep.checkpoint": (str, "", _noop),
    "output.dir": (str, "runs", _noop),
}

# per-task fine-tuning presets; explicit config values win over these
TASK_FINETUNE_DEFAULTS = {
    "heart_failure": {"lr": 1e-5, "n_queries": 1, "head_hidden": [128, 128]},
    "diagnosis": {"lr": 1e-4, "n_queries": 4, "head_hidden": []},
    "medication_recommendation": {"lr": 1e-4, "n_queries": 1, "head_hidden": [128]},
    "readmission": {"lr": 1e-4, "n_queries": 1, "head_hidden": [128, 128]},
    "los": {"lr": 1e-4, "n_queries": 1, "head_hidden": [128, 128]},
}


def default_config():
    cfg = {}
    for key, (_, default, _check) in SCHEMA.items():
        section, name = key.split(".")
        cfg.setdefault(section, {})[name] = copy.deepcopy(default)
    return cfg


def _coerce(key, value):
    typ, _default, check = SCHEMA[key]
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {value!r}")
    elif typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected int, got {value!r}")
    elif typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected float, got {value!r}")
        value = float(value)
    elif typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected string, got {value!r}")
    elif typ is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected list, got {value!r}")
    check(value)
    return value


def _apply(cfg, key, value):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key '{key}'")
    section, name = key.split(".")
    cfg[section][name] = _coerce(key, value)


def parse_override(text):
    """'section.key=value' with a TOML-style literal value; keys typed as
    strings in the schema take the raw text (quotes optional)."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' must look like section.key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    raw = raw.strip()
    if key in SCHEMA and SCHEMA[key][0] is str:
        if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "'\"":
            raw = raw[1:-1]
        return key, raw
    try:
        doc = tomllib.loads(f"v = {raw}")
        value = doc["v"]
    except tomllib.TOMLDecodeError:
        value = raw  # bare string
    return key, value


def load_config(path=None, overrides=(), seed=None, out=None, command=None):
    """Resolve defaults -> task presets -> file -> overrides -> flags."""
    cfg = default_config()
    file_doc = {}
    if path:
        try:
            with open(path, "rb") as fh:
                file_doc = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    parsed_overrides = [parse_override(o) for o in overrides]

    # task-specific fine-tuning presets apply beneath explicit settings
    task_name = cfg["task"]["name"]
    task_name = file_doc.get("task", {}).get("name", task_name)
    for key, value in parsed_overrides:
        if key == "task.name":
            task_name = value
    _apply(cfg, "task.name", task_name)
    for name, value in TASK_FINETUNE_DEFAULTS[task_name].items():
        cfg["finetune"][name] = copy.deepcopy(value)

    for section, entries in file_doc.items():
        if not isinstance(entries, dict):
            raise ConfigError(f"top-level key '{section}' must be a section")
        for name, value in entries.items():
            _apply(cfg, f"{section}.{name}", value)
    for key, value in parsed_overrides:
        _apply(cfg, key, value)

    if not cfg["data"]["dir"]:
        cfg["data"]["dir"] = os.environ.get(ENV_DATA_DIR, "")
    if out is not None:
        cfg["output"]["dir"] = str(out)
    if seed is not None:
        section = _SEED_SECTION.get(command, "training")
        _apply(cfg, f"{section}.seed", int(seed))
    validate_config(cfg)
    return cfg


_SEED_SECTION = {
    "generate": "data",
    "pretrain": "training",
    "finetune": "finetune",
    "evaluate": "finetune",
    "explain": "explain",
    "sweep": "training",
}


def validate_config(cfg):
    for key in SCHEMA:
        section, name = key.split(".")
        _coerce(key, cfg[section][name])
    fr = cfg["data"]["split_fractions"]
    if len(fr) != 3 or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError("data.split_fractions must be three values summing to 1")
    probs = cfg["training"]
    if abs(probs["mask_prob"] + probs["replace_prob"] + probs["keep_prob"] - 1.0) > 1e-9:
        raise ConfigError("mask/replace/keep probabilities must sum to 1")
    if cfg["model"]["include_text"] and cfg["model"]["variant"] in ("icd_atc", "icd_atc_co"):
        raise ConfigError(f"variant '{cfg['model']['variant']}' cannot embed note "
                          "concepts; set model.include_text = false")
    if cfg["model"]["k"] % cfg["model"]["n_heads"] != 0:
        raise ConfigError("model.k must be divisible by model.n_heads")
    return cfg


def config_hash(cfg):
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def write_config(cfg, path):
    lines = []
    for section in sorted(cfg):
        lines.append(f"[{section}]")
        for name in sorted(cfg[section]):
            lines.append(f"{name} = {_toml_literal(cfg[section][name])}")
        lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


def _toml_literal(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_literal(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {value!r}")
