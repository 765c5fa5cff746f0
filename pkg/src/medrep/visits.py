"""Transformer set-aggregation of visit concept sets.

One shared transformer (learned CLS token, no positional encoding) encodes
each concept type of a visit separately; a per-type input projection folds
the negation bit into the embedding. Tokens are canonically sorted before
encoding so the output is bit-identical under input permutations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn

MASK_ID = -1  # sentinel for a masked token; resolved to the learned MASK row


@dataclass
class EncoderConfig:
    k: int = 256
    n_heads: int = 2
    n_layers: int = 1
    ffn_mult: int = 4
    types: tuple = ("d", "m", "n")


@dataclass
class CorruptionConfig:
    selection_rate: float = 0.15
    mask_prob: float = 0.8
    replace_prob: float = 0.1
    keep_prob: float = 0.1

    def validate(self):
        if not 0.0 <= self.selection_rate <= 1.0:
            raise ValueError("selection_rate must be in [0,1]")
        for p in (self.mask_prob, self.replace_prob, self.keep_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("corruption probabilities must be in [0,1]")
        if abs(self.mask_prob + self.replace_prob + self.keep_prob - 1.0) > 1e-9:
            raise ValueError("mask/replace/keep probabilities must sum to 1")
        return self


def init_encoder_params(rng, cfg):
    params = {
        "encoder/cls": rng.normal(scale=0.1, size=(1, cfg.k)),
        "encoder/mask_token": rng.normal(scale=0.1, size=(1, cfg.k)),
    }
    for ctype in cfg.types:
        params.update(nn.linear_params(rng, cfg.k + 1, cfg.k, f"encoder/proj_{ctype}"))
    for layer in range(cfg.n_layers):
        params.update(
            nn.attention_layer_params(rng, cfg.k, cfg.ffn_mult * cfg.k, f"encoder/layer{layer}")
        )
    return params


def corrupt_tokens(token_ids, ctype, vocab, corruption, rng):
    """BERT-style corruption of a token-id sequence.

    Each token is independently selected at the selection rate; selected
    tokens become MASK_ID, a random same-type token, or stay unchanged.
    Returns (corrupted ids, selected flags). Deterministic given rng state.
    """
    corruption.validate()
    sl = vocab.type_slice(ctype)
    out = []
    selected = []
    for tid in token_ids:
        if rng.random() >= corruption.selection_rate:
            out.append(tid)
            selected.append(False)
            continue
        selected.append(True)
        r = rng.random()
        if r < corruption.mask_prob:
            out.append(MASK_ID)
        elif r < corruption.mask_prob + corruption.replace_prob and len(sl) > 0:
            out.append(int(sl.start + rng.integers(len(sl))))
        else:
            out.append(tid)
    return out, selected


@dataclass
class TypeEncoding:
    v: object  # CLS output, (1,k) Tensor
    v_sum: object  # sum over non-CLS token outputs, (1,k) Tensor
    attention: np.ndarray  # CLS->token weights in input order, or None if empty
    token_ids: tuple
    tokens: object = None  # non-CLS transformer outputs in canonical order


@dataclass
class VisitRepr:
    by_type: dict = field(default_factory=dict)

    def types(self):
        return tuple(self.by_type)

    def __getitem__(self, ctype):
        return self.by_type[ctype]


def extend_table(tape, table, P):
    """Append the learned MASK row so MASK_ID can be gathered like a concept."""
    return ad.concat_rows(tape, [table, P["encoder/mask_token"]])


def encode_token_set(tape, P, cfg, table_ext, token_ids, flags, ctype):
    """Encode one concept-type set into its CLS vector.

    The token order is canonicalized by (id, negation flag) before the
    transformer runs, which makes the encoding exactly permutation
    invariant; returned attention weights are mapped back to input order.
    An empty set encodes as the CLS token alone (v_sum is the zero vector).
    """
    q = len(token_ids)
    n_rows = table_ext.data.shape[0]
    cls = P["encoder/cls"]
    if q == 0:
        h = cls
        attn_out = None
        order = np.zeros(0, dtype=np.int64)
    else:
        ids = np.asarray(token_ids, dtype=np.int64)
        fl = np.asarray(flags, dtype=np.float64)
        if fl.shape != (q,):
            raise ValueError("one negation flag per token required")
        order = np.lexsort((fl, ids))
        ids_sorted = ids[order]
        rows = np.where(ids_sorted == MASK_ID, n_rows - 1, ids_sorted)
        emb = ad.gather_rows(tape, table_ext, rows)
        feats = ad.concat_cols(tape, [emb, tape.constant(fl[order][:, None])])
        x = nn.linear(tape, P, f"encoder/proj_{ctype}", feats)
        h = ad.concat_rows(tape, [cls, x])
    weights = None
    for layer in range(cfg.n_layers):
        h, weights = nn.transformer_layer(tape, P, f"encoder/layer{layer}", h, cfg.n_heads)
    v = ad.slice_rows(tape, h, 0, 1)
    tokens = None
    if q == 0:
        v_sum = tape.constant(np.zeros((1, cfg.k)))
    else:
        tokens = ad.slice_rows(tape, h, 1, q + 1)
        v_sum = ad.sum_rows(tape, tokens)
        cls_row = weights[:, 0, 1:].mean(axis=0)
        cls_row = cls_row / cls_row.sum()
        attn_out = np.empty(q)
        attn_out[order] = cls_row
    return TypeEncoding(v=v, v_sum=v_sum, attention=attn_out, token_ids=tuple(token_ids),
                        tokens=tokens)


def encode_visit(tape, P, cfg, table_ext, vocab, visit, include_text,
                 corruption=None, rng=None):
    """Encode each concept type of a visit with the shared transformer.

    include_text=False drops the note-concept component entirely. With a
    corruption config, token ids are corrupted before encoding (targets stay
    the caller's responsibility).
    """
    types = ("d", "m", "n") if include_text else ("d", "m")
    repr_ = VisitRepr()
    for ctype in types:
        ids = []
        for cid in visit.concept_ids(ctype):
            idx = vocab.index.get(cid)
            if idx is None:
                raise KeyError(f"concept '{cid}' not in vocabulary")
            ids.append(idx)
        flags = list(visit.negation_flags(ctype))
        if corruption is not None:
            ids, _ = corrupt_tokens(ids, ctype, vocab, corruption, rng)
        repr_.by_type[ctype] = encode_token_set(tape, P, cfg, table_ext, ids, flags, ctype)
    return repr_
