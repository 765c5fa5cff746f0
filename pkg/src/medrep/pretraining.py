"""Masked auto-encoder pretraining over single visits.

Corrupted concept sets are encoded per type; four directional MLP decoders
reconstruct the original disease/medication sets from the CLS
representations (optionally concatenated with the note representation),
and two sum-decoders reconstruct them from the unweighted token sums. The
weighted reconstruction terms plus the lambda-scaled sum term form the
training objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .data import multihot
from .optim import Adam, EarlyStopper
from .visits import CorruptionConfig, EncoderConfig, encode_visit, extend_table, init_encoder_params


@dataclass
class LossWeights:
    """Reconstruction term weights, indexed source -> target."""

    dd: float = 1.0
    md: float = 1.0
    mm: float = 1.0
    dm: float = 1.0
    lambda_sum: float = 0.25

    @classmethod
    def disease_focused(cls, lambda_sum=0.25):
        """Keep only the terms that predict diseases."""
        return cls(dd=1.0, md=1.0, mm=0.0, dm=0.0, lambda_sum=lambda_sum)

    def validate(self):
        for name in ("dd", "md", "mm", "dm", "lambda_sum"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and nonnegative")
        return self

    def directions(self):
        return (("d", "d", self.dd), ("m", "d", self.md),
                ("m", "m", self.mm), ("d", "m", self.dm))


@dataclass
class PretrainConfig:
    lr: float = 5e-4
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    min_delta: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    decoder_hidden: int = 128
    seed: int = 0


@dataclass
class PretrainModel:
    """Embedder + shared visit encoder + pretraining decoder heads."""

    vocab: object
    embedder: object
    encoder_cfg: EncoderConfig
    encoder: dict
    heads: dict
    include_text: bool

    def trainable_arrays(self):
        out = {}
        if not self.embedder.frozen:
            out.update(self.embedder.params)
        out.update(self.encoder)
        out.update(self.heads)
        return out

    def all_arrays(self):
        out = dict(self.embedder.params)
        out.update(self.encoder)
        out.update(self.heads)
        return out


def init_model(vocab, embedder, rng, include_text=True, encoder_cfg=None, decoder_hidden=128):
    if include_text and not embedder.supports_text:
        raise ValueError("this embedder variant cannot represent note concepts; "
                         "set include_text=false")
    cfg = encoder_cfg or EncoderConfig(k=embedder.k)
    if cfg.k != embedder.k:
        raise ValueError(f"encoder width {cfg.k} != embedder width {embedder.k}")
    encoder = init_encoder_params(rng, cfg)
    n_d = len(vocab.type_slice("d"))
    n_m = len(vocab.type_slice("m"))
    widths = {"d": n_d, "m": n_m}
    in_dim = cfg.k * (2 if include_text else 1)
    heads = {}
    for src in ("d", "m"):
        for dst in ("d", "m"):
            heads.update(nn.mlp_params(rng, [in_dim, decoder_hidden, widths[dst]],
                                       f"heads/{src}{dst}"))
    for dst in ("d", "m"):
        heads.update(nn.mlp_params(rng, [cfg.k, decoder_hidden, widths[dst]],
                                   f"heads/sum_{dst}"))
    return PretrainModel(vocab, embedder, cfg, encoder, heads, include_text)


# ---------------------------------------------------------------------------
# forward + losses


def batch_forward(tape, model, visits, corruption=None, rng=None, edge_masks=None):
    """Encode a batch of visits on one tape (the embedder table is computed
    once per batch). Returns (visit reprs, tensor param dict)."""
    P = dict(tape.parameters(model.encoder))
    P.update(tape.parameters(model.heads))
    ep = model.embedder.tape_params(tape)
    if ep:
        P.update(ep)
    table = model.embedder.table(tape, edge_masks=edge_masks)
    table_ext = extend_table(tape, table, P)
    reprs = [
        encode_visit(tape, P, model.encoder_cfg, table_ext, model.vocab, v,
                     model.include_text, corruption=corruption, rng=rng)
        for v in visits
    ]
    return reprs, P


def batch_targets(model, visits):
    """Stacked multi-hot reconstruction targets per type (original sets,
    untouched by corruption)."""
    return {
        t: np.stack([multihot(v.concept_ids(t), model.vocab, t) for v in visits])
        for t in ("d", "m")
    }


def _stack(tape, tensors):
    return tensors[0] if len(tensors) == 1 else ad.concat_rows(tape, tensors)


def recon_loss(tape, P, model, reprs, targets, weights):
    """Weighted sum of the four directional reconstruction BCE terms; terms
    with zero weight are skipped entirely (their decoders stay off the tape)."""
    v_by_type = {t: _stack(tape, [r[t].v for r in reprs]) for t in reprs[0].types()}
    parts = {}
    total = None
    for src, dst, w in weights.directions():
        if w == 0.0:
            continue
        x = v_by_type[src]
        if model.include_text:
            x = ad.concat_cols(tape, [x, v_by_type["n"]])
        logits = nn.mlp(tape, P, f"heads/{src}{dst}", x)
        term = ad.bce_with_logits(tape, logits, targets[dst])
        parts[f"recon_{src}{dst}"] = float(term.data)
        term = ad.scale(tape, term, w) if w != 1.0 else term
        total = term if total is None else ad.add(tape, total, term)
    if total is None:
        total = tape.constant(np.asarray(0.0))
    return total, parts


def sum_loss(tape, P, model, reprs, targets):
    """Decode the unweighted token-sum aggregates back to their own type."""
    total = None
    parts = {}
    for dst in ("d", "m"):
        x = _stack(tape, [r[dst].v_sum for r in reprs])
        logits = nn.mlp(tape, P, f"heads/sum_{dst}", x)
        term = ad.bce_with_logits(tape, logits, targets[dst])
        parts[f"sum_{dst}"] = float(term.data)
        total = term if total is None else ad.add(tape, total, term)
    return total, parts


def total_loss(tape, P, model, reprs, targets, weights):
    """Reconstruction plus lambda-scaled sum regularizer."""
    loss, parts = recon_loss(tape, P, model, reprs, targets, weights)
    lam = weights.lambda_sum
    if lam != 0.0:
        s_term, s_parts = sum_loss(tape, P, model, reprs, targets)
        parts.update(s_parts)
        loss = ad.add(tape, loss, ad.scale(tape, s_term, lam))
    parts["total"] = float(loss.data)
    return loss, parts


def pretrain_batch_loss(model, visits, weights, corruption=None, rng=None):
    """One full forward pass; returns (tape, loss Tensor, parts)."""
    tape = ad.Tape()
    reprs, P = batch_forward(tape, model, visits, corruption=corruption, rng=rng)
    targets = batch_targets(model, visits)
    loss, parts = total_loss(tape, P, model, reprs, targets, weights)
    return tape, loss, parts


# ---------------------------------------------------------------------------
# training loop


def _split_visits(dataset, patient_ids):
    out = []
    for rec in dataset.patients(patient_ids):
        out.extend(rec.visits)
    return out


def evaluate_loss(model, visits, weights, corruption, seed, batch_size=64):
    """Mean total loss over visits with a fixed corruption stream, so values
    are comparable across epochs."""
    rng = np.random.default_rng(seed)
    total = 0.0
    count = 0
    for lo in range(0, len(visits), batch_size):
        batch = visits[lo:lo + batch_size]
        _, loss, _ = pretrain_batch_loss(model, batch, weights, corruption, rng)
        total += float(loss.data) * len(batch)
        count += len(batch)
    return total / max(count, 1)


def pretrain(dataset, splits, model, cfg, log=None):
    """Run masked auto-encoder pretraining; the model's arrays end at the
    best-validation state. Returns the per-epoch history (list of dicts)."""
    cfg.weights.validate()
    cfg.corruption.validate()
    train_visits = _split_visits(dataset, splits.pretrain)
    if not train_visits:
        raise ValueError("pretraining split has no visits")
    val_visits = _split_visits(dataset, splits.validation)
    seq = np.random.SeedSequence(cfg.seed)
    shuffle_rng, corrupt_rng, val_seed_seq = [np.random.default_rng(s) for s in seq.spawn(3)]
    val_seed = int(val_seed_seq.integers(2 ** 31))

    trainable = model.trainable_arrays()
    adam = Adam(cfg.lr)
    stopper = EarlyStopper(cfg.patience, cfg.min_delta)
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_visits))
        epoch_loss = 0.0
        part_sums = {}
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train_visits[i] for i in order[lo:lo + cfg.batch_size]]
            try:
                tape, loss, parts = pretrain_batch_loss(
                    model, batch, cfg.weights, cfg.corruption, corrupt_rng
                )
                grads = ad.backward(tape, loss)
            except ad.NumericsError as exc:
                raise ad.NumericsError(
                    f"pretraining diverged at epoch {epoch}, batch {n_batches}: {exc}"
                ) from exc
            adam.step(trainable, grads)
            model.embedder.invalidate()
            epoch_loss += float(loss.data)
            for k, v in parts.items():
                part_sums[k] = part_sums.get(k, 0.0) + v
            n_batches += 1
        row = {"epoch": epoch, "train_loss": epoch_loss / n_batches}
        for k in sorted(part_sums):
            row[k] = part_sums[k] / n_batches
        if val_visits:
            row["val_loss"] = evaluate_loss(model, val_visits, cfg.weights,
                                            cfg.corruption, val_seed)
        history.append(row)
        if log:
            log(row)
        if val_visits and stopper.update(row["val_loss"], trainable):
            break
    if stopper.restore(trainable):
        model.embedder.invalidate()
    rng_state = {
        "shuffle": shuffle_rng.bit_generator.state,
        "corrupt": corrupt_rng.bit_generator.state,
    }
    return history, adam, rng_state


def history_csv(history):
    """Render the epoch history as CSV text (stable column order)."""
    if not history:
        return ""
    cols = ["epoch", "train_loss", "val_loss"]
    extra = sorted({k for row in history for k in row} - set(cols))
    cols += extra
    lines = [",".join(cols)]
    for row in history:
        lines.append(",".join(_fmt(row.get(c)) for c in cols))
    return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def disease_focused_config(cfg):
    """Preset: only disease-predicting reconstruction terms stay active."""
    return replace(cfg, weights=LossWeights.disease_focused(cfg.weights.lambda_sum))
