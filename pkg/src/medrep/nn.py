"""Neural building blocks composed from autodiff ops.

Parameters live in flat {name: ndarray} dicts with '/'-separated names;
apply functions take the matching {name: Tensor} dict produced by
``Tape.parameters``. Initialization is Glorot-uniform for weights and
zeros for biases.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def glorot(rng, n_in, n_out):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


def linear_params(rng, n_in, n_out, prefix):
    return {prefix + "/w": glorot(rng, n_in, n_out), prefix + "/b": np.zeros((1, n_out))}


def linear(tape, P, prefix, x):
    return ad.add_bias(tape, ad.matmul(tape, x, P[prefix + "/w"]), P[prefix + "/b"])


def mlp_params(rng, dims, prefix):
    """Dense stack dims[0] -> ... -> dims[-1]; ReLU between layers."""
    params = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        params.update(linear_params(rng, a, b, f"{prefix}/l{i}"))
    return params


def mlp(tape, P, prefix, x):
    i = 0
    h = x
    while f"{prefix}/l{i}/w" in P:
        last = f"{prefix}/l{i + 1}/w" not in P
        h = linear(tape, P, f"{prefix}/l{i}", h)
        if not last:
            h = ad.relu(tape, h)
        i += 1
    if i == 0:
        raise KeyError(f"no layers found under '{prefix}'")
    return h


def multihead_attention(tape, queries, keys, values, n_heads):
    """Scaled dot-product attention with per-head column splits.

    queries (nq,k), keys/values (nk,k); k must divide by n_heads. Returns
    (output Tensor (nq,k), weights ndarray (n_heads, nq, nk)). Weight rows
    are row-stochastic.
    """
    k = queries.data.shape[1]
    if k % n_heads != 0:
        raise ValueError(f"model dim {k} not divisible by {n_heads} heads")
    dh = k // n_heads
    outs, weights = [], []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ad.slice_cols(tape, queries, lo, hi)
        kh = ad.slice_cols(tape, keys, lo, hi)
        vh = ad.slice_cols(tape, values, lo, hi)
        scores = ad.scale(tape, ad.matmul(tape, qh, ad.transpose(tape, kh)), 1.0 / np.sqrt(dh))
        attn = ad.softmax_rows(tape, scores)
        outs.append(ad.matmul(tape, attn, vh))
        weights.append(attn.data)
    out = outs[0] if n_heads == 1 else ad.concat_cols(tape, outs)
    return out, np.stack(weights)


def attention_layer_params(rng, k, ffn_dim, prefix):
    params = {}
    for name in ("wq", "wk", "wv", "wo"):
        params.update(linear_params(rng, k, k, f"{prefix}/{name}"))
    params.update(linear_params(rng, k, ffn_dim, f"{prefix}/ffn0"))
    params.update(linear_params(rng, ffn_dim, k, f"{prefix}/ffn1"))
    for ln in ("ln1", "ln2"):
        params[f"{prefix}/{ln}/g"] = np.ones((1, k))
        params[f"{prefix}/{ln}/b"] = np.zeros((1, k))
    return params


def transformer_layer(tape, P, prefix, h, n_heads):
    """Post-norm encoder layer; returns (hidden, attention (n_heads, n, n))."""
    q = linear(tape, P, f"{prefix}/wq", h)
    k = linear(tape, P, f"{prefix}/wk", h)
    v = linear(tape, P, f"{prefix}/wv", h)
    att, weights = multihead_attention(tape, q, k, v, n_heads)
    att = linear(tape, P, f"{prefix}/wo", att)
    h = ad.layer_norm(tape, ad.add(tape, h, att), P[f"{prefix}/ln1/g"], P[f"{prefix}/ln1/b"])
    ffn = linear(tape, P, f"{prefix}/ffn1", ad.relu(tape, linear(tape, P, f"{prefix}/ffn0", h)))
    h = ad.layer_norm(tape, ad.add(tape, h, ffn), P[f"{prefix}/ln2/g"], P[f"{prefix}/ln2/b"])
    return h, weights


def gru_params(rng, n_in, n_hidden, prefix):
    params = {}
    for gate in ("z", "r", "n"):
        params[f"{prefix}/wx{gate}"] = glorot(rng, n_in, n_hidden)
        params[f"{prefix}/wh{gate}"] = glorot(rng, n_hidden, n_hidden)
        params[f"{prefix}/bx{gate}"] = np.zeros((1, n_hidden))
        params[f"{prefix}/bh{gate}"] = np.zeros((1, n_hidden))
    return params


def gru_sequence(tape, P, prefix, xs):
    """Run a GRU over rows of xs (T, d); returns all hidden states (T, hidden)."""
    steps = xs.data.shape[0]
    hidden = P[f"{prefix}/whz"].data.shape[0]
    h = tape.constant(np.zeros((1, hidden)))
    states = []
    for t in range(steps):
        x = ad.slice_rows(tape, xs, t, t + 1)
        z = ad.sigmoid(tape, _gate(tape, P, prefix, "z", x, h))
        r = ad.sigmoid(tape, _gate(tape, P, prefix, "r", x, h))
        hn = ad.add_bias(tape, ad.matmul(tape, h, P[f"{prefix}/whn"]), P[f"{prefix}/bhn"])
        n = ad.tanh(
            tape,
            ad.add(
                tape,
                ad.add_bias(tape, ad.matmul(tape, x, P[f"{prefix}/wxn"]), P[f"{prefix}/bxn"]),
                ad.mul(tape, r, hn),
            ),
        )
        one = tape.constant(np.ones((1, hidden)))
        h = ad.add(tape, ad.mul(tape, ad.sub(tape, one, z), n), ad.mul(tape, z, h))
        states.append(h)
    return ad.concat_rows(tape, states) if len(states) > 1 else states[0]


def _gate(tape, P, prefix, gate, x, h):
    xp = ad.add_bias(tape, ad.matmul(tape, x, P[f"{prefix}/wx{gate}"]), P[f"{prefix}/bx{gate}"])
    hp = ad.add_bias(tape, ad.matmul(tape, h, P[f"{prefix}/wh{gate}"]), P[f"{prefix}/bh{gate}"])
    return ad.add(tape, xp, hp)
