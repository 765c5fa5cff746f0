"""Downstream sequence predictors over visit histories.

Medication recommendation pools the encoded history by mean and concatenates
the current visit's disease representation. All other tasks run a GRU over
the visit sequence and aggregate its hidden states with trainable temporal
attention queries (mean over queries when there are several). The concept
embedder is frozen during fine-tuning; only the visit encoder, the sequence
model, and the task head train.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .data import (
    LOS_CLASSES,
    Visit,
    label_heart_failure,
    label_los,
    label_readmission,
    multihot,
)
from .optim import Adam, EarlyStopper
from .visits import encode_visit, extend_table

TASKS = ("medication_recommendation", "heart_failure", "diagnosis", "readmission", "los")


@dataclass
class TaskSpec:
    name: str
    label_width: int
    loss: str  # binary | multilabel | multiclass
    horizon_days: float = None
    hf_prefix: str = "428"

    def validate(self):
        if self.name not in TASKS:
            raise ValueError(f"unknown task '{self.name}' (choose from {TASKS})")
        if self.name == "readmission" and not self.horizon_days:
            raise ValueError("readmission needs a horizon")
        return self


def make_task_spec(name, vocab, horizon_days=365.0, hf_prefix="428"):
    if name == "medication_recommendation":
        return TaskSpec(name, len(vocab.type_slice("m")), "multilabel")
    if name == "heart_failure":
        return TaskSpec(name, 1, "binary", hf_prefix=hf_prefix)
    if name == "diagnosis":
        return TaskSpec(name, len(vocab.type_slice("d")), "multilabel")
    if name == "readmission":
        return TaskSpec(name, 1, "binary", horizon_days=horizon_days)
    if name == "los":
        return TaskSpec(name, LOS_CLASSES, "multiclass")
    raise ValueError(f"unknown task '{name}' (choose from {TASKS})")


@dataclass
class Sample:
    patient_id: str
    t: int  # target visit index; history is visits 0..t-1
    label: object  # int for binary/multiclass, vector for multilabel


def task_samples(dataset, patient_ids, task, vocab):
    """One sample per (patient, target visit t>=1).

    History-only tasks see visits 0..t-1; medication recommendation also
    consumes the diseases of visit t (handled at forward time). Readmission
    predicts whether the admission after the last observed visit arrives
    within the horizon; terminal gaps are censored and skipped.
    """
    samples = []
    for rec in dataset.patients(patient_ids):
        for t in range(1, len(rec.visits)):
            if task.name == "heart_failure":
                label = label_heart_failure(rec, t, task.hf_prefix)
            elif task.name == "diagnosis":
                label = multihot(rec.visits[t].codes_d, vocab, "d")
            elif task.name == "medication_recommendation":
                label = multihot(rec.visits[t].codes_m, vocab, "m")
            elif task.name == "readmission":
                label = label_readmission(rec, t - 1, task.horizon_days)
                if label is None:
                    continue
            elif task.name == "los":
                label = label_los(rec.visits[t])
            samples.append(Sample(rec.patient_id, t, label))
    return samples


# ---------------------------------------------------------------------------
# model


@dataclass
class FinetuneConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 5
    min_delta: float = 1e-4
    n_queries: int = 1
    head_hidden: tuple = (128, 128)
    seed: int = 0


@dataclass
class TaskModel:
    base: object  # PretrainModel with a frozen embedder
    task: TaskSpec
    params: dict  # sequence model + task head arrays
    n_queries: int

    @property
    def r(self):
        return 3 if self.base.include_text else 2

    def trainable_arrays(self):
        out = dict(self.base.encoder)
        out.update(self.params)
        return out

    def all_arrays(self):
        out = self.base.all_arrays()
        out.update(self.params)
        return out


def init_task_model(base, task, cfg, rng):
    """Freeze the concept embedder and initialize task-specific parameters."""
    task.validate()
    if not base.embedder.frozen:
        base.embedder.freeze()
    k = base.encoder_cfg.k
    r = 3 if base.include_text else 2
    params = {}
    if task.name == "medication_recommendation":
        head_in = k * r + k  # pooled history plus current disease representation
    else:
        hidden = k * r
        params.update(nn.gru_params(rng, k * r, hidden, "seq/gru"))
        for i in range(cfg.n_queries):
            params[f"seq/query{i}"] = rng.normal(scale=0.1, size=(1, hidden))
        head_in = hidden
    dims = [head_in, *cfg.head_hidden, task.label_width]
    params.update(nn.mlp_params(rng, dims, "task_head"))
    return TaskModel(base, task, params, cfg.n_queries)


def _visit_vector(tape, P, model, table_ext, visit):
    base = model.base
    repr_ = encode_visit(tape, P, base.encoder_cfg, table_ext, base.vocab, visit,
                         base.include_text)
    parts = [repr_[t].v for t in repr_.types()]
    return ad.concat_cols(tape, parts), repr_


def _tape_params(tape, model):
    P = dict(tape.parameters(model.base.encoder))
    P.update(tape.parameters(model.params))
    table = model.base.embedder.table(tape)  # frozen: constant
    table_ext = extend_table(tape, table, P)
    return P, table_ext


def gru_temporal_predict(tape, P, model, history):
    """GRU over the history matrix (t, k*r); each trainable query attends over
    the hidden states, contexts are averaged, the head maps to logits.
    Returns (logits, temporal attention (n_queries, t))."""
    hs = nn.gru_sequence(tape, P, "seq/gru", history)
    contexts = []
    attn = []
    for i in range(model.n_queries):
        scores = ad.transpose(tape, ad.matmul(tape, hs, ad.transpose(tape, P[f"seq/query{i}"])))
        weights = ad.softmax_rows(tape, scores)  # (1, t)
        attn.append(weights.data[0].copy())
        contexts.append(ad.matmul(tape, weights, hs))
    ctx = contexts[0]
    if len(contexts) > 1:
        for other in contexts[1:]:
            ctx = ad.add(tape, ctx, other)
        ctx = ad.scale(tape, ctx, 1.0 / len(contexts))
    logits = nn.mlp(tape, P, "task_head", ctx)
    return logits, np.stack(attn)


def pooled_history(tape, P, model, table_ext, patient, t):
    """Mean over the encoded history visits (each a concatenation of the
    per-type representations). Returns (pooled (1, k*r), visit traces)."""
    if t < 1:
        raise ValueError("need at least one history visit")
    rows = []
    traces = []
    for visit in patient.visits[:t]:
        vec, repr_ = _visit_vector(tape, P, model, table_ext, visit)
        rows.append(vec)
        traces.append(repr_)
    stacked = rows[0] if len(rows) == 1 else ad.concat_rows(tape, rows)
    return ad.scale(tape, ad.sum_rows(tape, stacked), 1.0 / len(rows)), traces


def avg_pool_predict(tape, P, model, table_ext, patient, t):
    """Mean-pool the encoded history and concatenate the current visit's
    disease representation; the head maps to medication logits."""
    pooled, traces = pooled_history(tape, P, model, table_ext, patient, t)
    base = model.base
    current = encode_visit(
        tape, P, base.encoder_cfg, table_ext, base.vocab,
        _diseases_only(patient.visits[t]), include_text=False,
    )
    traces.append(current)
    x = ad.concat_cols(tape, [pooled, current["d"].v])
    return nn.mlp(tape, P, "task_head", x), traces


def _diseases_only(visit):
    return Visit(visit.time_days, visit.duration_days, visit.codes_d, (), ())


def forward_sample(tape, P, model, table_ext, patient, t):
    """Logits plus attention traces (per-visit CLS attention; temporal
    attention for GRU tasks)."""
    if model.task.name == "medication_recommendation":
        logits, traces = avg_pool_predict(tape, P, model, table_ext, patient, t)
        return logits, {"visits": traces, "temporal": None}
    rows = []
    traces = []
    for visit in patient.visits[:t]:
        vec, repr_ = _visit_vector(tape, P, model, table_ext, visit)
        rows.append(vec)
        traces.append(repr_)
    history = rows[0] if len(rows) == 1 else ad.concat_rows(tape, rows)
    logits, temporal = gru_temporal_predict(tape, P, model, history)
    return logits, {"visits": traces, "temporal": temporal}


def predict_patient(model, patient, t):
    """Inference for one patient history prefix; returns (logits vector,
    attention traces). Deterministic for a fixed model."""
    if t < 1:
        raise ValueError("need at least one history visit (t >= 1)")
    tape = ad.Tape()
    P, table_ext = _tape_params(tape, model)
    logits, traces = forward_sample(tape, P, model, table_ext, patient, t)
    return logits.data[0].copy(), traces


def batch_loss(model, dataset, samples):
    """Forward a batch of samples on one tape; returns (tape, loss)."""
    tape = ad.Tape()
    P, table_ext = _tape_params(tape, model)
    logit_rows = []
    for s in samples:
        logits, _ = forward_sample(tape, P, model, table_ext, dataset.by_id[s.patient_id], s.t)
        logit_rows.append(logits)
    stacked = logit_rows[0] if len(logit_rows) == 1 else ad.concat_rows(tape, logit_rows)
    if model.task.loss == "binary":
        targets = np.array([[float(s.label)] for s in samples])
        loss = ad.bce_with_logits(tape, stacked, targets)
    elif model.task.loss == "multilabel":
        targets = np.stack([s.label for s in samples])
        loss = ad.bce_with_logits(tape, stacked, targets)
    else:
        loss = ad.softmax_cross_entropy(tape, stacked, [int(s.label) for s in samples])
    return tape, loss


def evaluate_sample_loss(model, dataset, samples, batch_size=64):
    total = 0.0
    for lo in range(0, len(samples), batch_size):
        batch = samples[lo:lo + batch_size]
        _, loss = batch_loss(model, dataset, batch)
        total += float(loss.data) * len(batch)
    return total / max(len(samples), 1)


def finetune(dataset, splits, base, task, cfg, log=None):
    """Fine-tune on the task's training samples with early stopping on the
    validation loss. The embedder stays frozen; returns (TaskModel, history)."""
    rng_seq = np.random.SeedSequence(cfg.seed)
    init_rng, shuffle_rng = [np.random.default_rng(s) for s in rng_seq.spawn(2)]
    model = init_task_model(base, task, cfg, init_rng)
    train = task_samples(dataset, splits.train, task, base.vocab)
    val = task_samples(dataset, splits.validation, task, base.vocab)
    if not train:
        raise ValueError(f"no training samples for task '{task.name}'")
    trainable = model.trainable_arrays()
    adam = Adam(cfg.lr)
    stopper = EarlyStopper(cfg.patience, cfg.min_delta)
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train))
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[lo:lo + cfg.batch_size]]
            try:
                tape, loss = batch_loss(model, dataset, batch)
                grads = ad.backward(tape, loss)
            except ad.NumericsError as exc:
                raise ad.NumericsError(
                    f"fine-tuning diverged at epoch {epoch}, batch {n_batches}: {exc}"
                ) from exc
            adam.step(trainable, grads)
            epoch_loss += float(loss.data)
            n_batches += 1
        row = {"epoch": epoch, "train_loss": epoch_loss / n_batches}
        if val:
            row["val_loss"] = evaluate_sample_loss(model, dataset, val)
        history.append(row)
        if log:
            log(row)
        if val and stopper.update(row["val_loss"], trainable):
            break
    stopper.restore(trainable)
    return model, history


def predict_split(model, dataset, samples):
    """Score every sample; returns (score matrix, labels).

    Binary scores are sigmoid probabilities, multilabel scores sigmoid
    per label, multiclass scores a softmax row.
    """
    scores = []
    labels = []
    for s in samples:
        logits, _ = predict_patient(model, dataset.by_id[s.patient_id], s.t)
        if model.task.loss == "multiclass":
            z = logits - logits.max()
            e = np.exp(z)
            scores.append(e / e.sum())
        else:
            scores.append(1.0 / (1.0 + np.exp(-logits)))
        labels.append(s.label)
    scores = np.stack(scores) if scores else np.zeros((0, model.task.label_width))
    if model.task.loss == "multilabel":
        labels = np.stack(labels) if labels else np.zeros_like(scores)
    else:
        labels = np.array(labels)
    return scores, labels
