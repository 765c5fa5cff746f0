"""Reverse-mode autodiff on a flat tape of float64 numpy arrays.

Tensors are 2-D matrices (losses are 0-d scalars). Every op validates its
output for NaN/Inf so numerical blowups surface at the op that produced
them instead of corrupting a training run. Parameters are named leaves;
``backward`` returns a gradient per parameter name, zero-filled for
parameters the loss does not depend on.
"""

from __future__ import annotations

import numpy as np

# Per-op NaN/Inf validation. Arrays at desk scale are small, so the check
# costs little; disable for profiling runs only.
CHECK_FINITE = True


class NumericsError(RuntimeError):
    """A forward op produced NaN/Inf, or backward yielded non-finite grads."""


def _validate(data, op):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by op '{op}'")
    return data


class Tensor:
    __slots__ = ("data", "needs_grad", "_backfn", "_grad")

    def __init__(self, data, needs_grad=False, backfn=None):
        self.data = data
        self.needs_grad = needs_grad
        self._backfn = backfn
        self._grad = None

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, grad):
        if self._grad is None:
            self._grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self._grad += grad

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, needs_grad={self.needs_grad})"


class Tape:
    """Computation graph: op records in creation order, plus named parameters."""

    def __init__(self):
        self._nodes = []
        self._params = {}

    def parameter(self, name, array):
        """Register (or re-fetch) a named trainable leaf."""
        if name in self._params:
            existing = self._params[name]
            if existing.data is not array:
                raise ValueError(f"parameter '{name}' rebound to a different array")
            return existing
        arr = np.asarray(array, dtype=np.float64)
        t = Tensor(arr, needs_grad=True)
        self._params[name] = t
        return t

    def parameters(self, arrays, prefix=""):
        """Register a dict of named arrays; returns dict of leaf Tensors."""
        return {k: self.parameter(prefix + k, v) for k, v in arrays.items()}

    def constant(self, array):
        arr = np.asarray(array, dtype=np.float64)
        return Tensor(arr, needs_grad=False)

    def _record(self, data, parents, backfn, op):
        _validate(data, op)
        needs = any(p.needs_grad for p in parents)
        t = Tensor(data, needs_grad=needs, backfn=backfn if needs else None)
        if needs:
            self._nodes.append(t)
        return t


def backward(tape, loss):
    """Run reverse-mode accumulation from a scalar loss.

    Returns {param_name: gradient array}, same shape as each parameter;
    parameters the loss does not reach get zeros.
    """
    if loss.data.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    for t in tape._nodes:
        t._grad = None
    for t in tape._params.values():
        t._grad = None
    loss._grad = np.array(1.0)
    for node in reversed(tape._nodes):
        if node._grad is None or node._backfn is None:
            continue
        node._backfn(node._grad)
    grads = {}
    for name, p in tape._params.items():
        g = p._grad if p._grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter '{name}'")
        grads[name] = g
    return grads


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(tape, a, b):
    out = a.data + b.data

    def back(g):
        if a.needs_grad:
            a._accumulate(g)
        if b.needs_grad:
            b._accumulate(g)

    return tape._record(out, (a, b), back, "add")


def add_bias(tape, a, bias):
    """Row-wise bias add: (n,k) + (1,k). The only broadcast this engine allows."""
    if a.data.ndim != 2 or bias.data.shape != (1, a.data.shape[1]):
        raise ValueError(f"add_bias shapes {a.data.shape} vs {bias.data.shape}")
    out = a.data + bias.data

    def back(g):
        if a.needs_grad:
            a._accumulate(g)
        if bias.needs_grad:
            bias._accumulate(g.sum(axis=0, keepdims=True))

    return tape._record(out, (a, bias), back, "add_bias")


def sub(tape, a, b):
    out = a.data - b.data

    def back(g):
        if a.needs_grad:
            a._accumulate(g)
        if b.needs_grad:
            b._accumulate(-g)

    return tape._record(out, (a, b), back, "sub")


def mul(tape, a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shapes {a.data.shape} vs {b.data.shape}")
    out = a.data * b.data

    def back(g):
        if a.needs_grad:
            a._accumulate(g * b.data)
        if b.needs_grad:
            b._accumulate(g * a.data)

    return tape._record(out, (a, b), back, "mul")


def mul_colvec(tape, a, w):
    """Scale row i of (n,k) matrix a by scalar w[i] from an (n,1) column."""
    if w.data.shape != (a.data.shape[0], 1):
        raise ValueError(f"mul_colvec shapes {a.data.shape} vs {w.data.shape}")
    out = a.data * w.data

    def back(g):
        if a.needs_grad:
            a._accumulate(g * w.data)
        if w.needs_grad:
            w._accumulate((g * a.data).sum(axis=1, keepdims=True))

    return tape._record(out, (a, w), back, "mul_colvec")


def scale(tape, a, c):
    c = float(c)
    out = a.data * c

    def back(g):
        if a.needs_grad:
            a._accumulate(g * c)

    return tape._record(out, (a,), back, "scale")


def neg(tape, a):
    return scale(tape, a, -1.0)


def matmul(tape, a, b):
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shapes {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def back(g):
        if a.needs_grad:
            a._accumulate(g @ b.data.T)
        if b.needs_grad:
            b._accumulate(a.data.T @ g)

    return tape._record(out, (a, b), back, "matmul")


def transpose(tape, a):
    out = a.data.T.copy()

    def back(g):
        if a.needs_grad:
            a._accumulate(g.T)

    return tape._record(out, (a,), back, "transpose")


# ---------------------------------------------------------------------------
# nonlinearities


def relu(tape, a):
    # Subgradient at 0 is 0.
    out = np.maximum(a.data, 0.0)

    def back(g):
        if a.needs_grad:
            a._accumulate(g * (a.data > 0.0))

    return tape._record(out, (a,), back, "relu")


def sigmoid(tape, a):
    out = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))

    def back(g):
        if a.needs_grad:
            a._accumulate(g * out * (1.0 - out))

    return tape._record(out, (a,), back, "sigmoid")


def tanh(tape, a):
    out = np.tanh(a.data)

    def back(g):
        if a.needs_grad:
            a._accumulate(g * (1.0 - out * out))

    return tape._record(out, (a,), back, "tanh")


def log(tape, a):
    if np.any(a.data <= 0.0):
        raise NumericsError("log of non-positive value")
    out = np.log(a.data)

    def back(g):
        if a.needs_grad:
            a._accumulate(g / a.data)

    return tape._record(out, (a,), back, "log")


def maximum(tape, a, b):
    """Elementwise max of two same-shape tensors; ties route gradient to a."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"maximum shapes {a.data.shape} vs {b.data.shape}")
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def back(g):
        if a.needs_grad:
            a._accumulate(g * take_a)
        if b.needs_grad:
            b._accumulate(g * ~take_a)

    return tape._record(out, (a, b), back, "maximum")


def softmax_rows(tape, a):
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        if a.needs_grad:
            dot = (g * out).sum(axis=1, keepdims=True)
            a._accumulate(out * (g - dot))

    return tape._record(out, (a,), back, "softmax_rows")


# ---------------------------------------------------------------------------
# shape manipulation


def concat_rows(tape, tensors):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=0)
    offsets = np.cumsum([0] + [t.data.shape[0] for t in tensors])

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.needs_grad:
                t._accumulate(g[lo:hi])

    return tape._record(out, tuple(tensors), back, "concat_rows")


def concat_cols(tape, tensors):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.data.shape[1] for t in tensors])

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.needs_grad:
                t._accumulate(g[:, lo:hi])

    return tape._record(out, tuple(tensors), back, "concat_cols")


def slice_rows(tape, a, start, stop):
    out = a.data[start:stop].copy()

    def back(g):
        if a.needs_grad:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            a._accumulate(full)

    return tape._record(out, (a,), back, "slice_rows")


def slice_cols(tape, a, start, stop):
    out = a.data[:, start:stop].copy()

    def back(g):
        if a.needs_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            a._accumulate(full)

    return tape._record(out, (a,), back, "slice_cols")


def gather_rows(tape, a, idx):
    """Row lookup a[idx]; gradients scatter-add back, so repeated ids accumulate."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(f"gather index out of range [0, {a.data.shape[0]})")
    out = a.data[idx] if idx.size else np.zeros((0, a.data.shape[1]))

    def back(g):
        if a.needs_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

    return tape._record(out, (a,), back, "gather_rows")


# ---------------------------------------------------------------------------
# reductions and segment ops


def segment_mean(tape, values, segment_ids, n_segments):
    """Mean of rows grouped by segment id; empty segments yield zero rows."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= n_segments):
        raise IndexError(f"segment id out of range [0, {n_segments})")
    k = values.data.shape[1]
    total = np.zeros((n_segments, k))
    np.add.at(total, ids, values.data)
    counts = np.bincount(ids, minlength=n_segments).astype(np.float64)
    denom = np.maximum(counts, 1.0)[:, None]
    out = total / denom

    def back(g):
        if values.needs_grad:
            values._accumulate(g[ids] / denom[ids])

    return tape._record(out, (values,), back, "segment_mean")


def segment_sum(tape, values, segment_ids, n_segments):
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= n_segments):
        raise IndexError(f"segment id out of range [0, {n_segments})")
    out = np.zeros((n_segments, values.data.shape[1]))
    np.add.at(out, ids, values.data)

    def back(g):
        if values.needs_grad:
            values._accumulate(g[ids])

    return tape._record(out, (values,), back, "segment_sum")


def sum_all(tape, a):
    out = np.asarray(a.data.sum())

    def back(g):
        if a.needs_grad:
            a._accumulate(np.full_like(a.data, float(g)))

    return tape._record(out, (a,), back, "sum_all")


def sum_rows(tape, a):
    """Column sums: (n,k) -> (1,k)."""
    out = a.data.sum(axis=0, keepdims=True)

    def back(g):
        if a.needs_grad:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return tape._record(out, (a,), back, "sum_rows")


def mean_all(tape, a):
    return scale(tape, sum_all(tape, a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(tape, logits, targets):
    """Mean binary cross-entropy from logits, in the stable log-sum-exp form.

    Finite for any finite logit. Targets are a constant {0,1} array.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.data.shape:
        raise ValueError(f"bce shapes {logits.data.shape} vs {t.shape}")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("bce targets must be 0 or 1")
    z = logits.data
    elem = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = max(z.size, 1)
    out = np.asarray(elem.sum() / n)

    def back(g):
        if logits.needs_grad:
            sig = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
            logits._accumulate(float(g) * (sig - t) / n)

    return tape._record(out, (logits,), back, "bce_with_logits")


def softmax_cross_entropy(tape, logits, class_ids):
    """Mean multi-class cross-entropy: rows of logits vs integer class ids."""
    ids = np.asarray(class_ids, dtype=np.int64)
    n, c = logits.data.shape
    if ids.shape != (n,) or (ids.size and (ids.min() < 0 or ids.max() >= c)):
        raise ValueError("class ids must be one per row, in [0, n_classes)")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    out = np.asarray((lse - z[np.arange(n), ids]).sum() / n)

    def back(g):
        if logits.needs_grad:
            p = np.exp(z - zmax)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), ids] -= 1.0
            logits._accumulate(float(g) * p / n)

    return tape._record(out, (logits,), back, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# normalization


def layer_norm(tape, a, gain, bias, eps=1e-5):
    """Row-wise layer normalization with learned gain/bias (both (1,k))."""
    k = a.data.shape[1]
    if gain.data.shape != (1, k) or bias.data.shape != (1, k):
        raise ValueError("layer_norm gain/bias must be (1, k)")
    mu = a.data.mean(axis=1, keepdims=True)
    var = a.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = xhat * gain.data + bias.data

    def back(g):
        if gain.needs_grad:
            gain._accumulate((g * xhat).sum(axis=0, keepdims=True))
        if bias.needs_grad:
            bias._accumulate(g.sum(axis=0, keepdims=True))
        if a.needs_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=1, keepdims=True)
            m2 = (gx * xhat).mean(axis=1, keepdims=True)
            a._accumulate((gx - m1 - xhat * m2) * inv)

    return tape._record(out, (a, gain, bias), back, "layer_norm")


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(fn, params, eps=1e-5):
    """Compare backward() gradients against central finite differences.

    ``fn`` maps a {name: array} dict to (tape, scalar loss Tensor) and must be
    deterministic. Returns the worst relative error over all coordinates,
    with the denominator floored at 1e-6 so zero-gradient coordinates
    compare on an absolute scale.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape, loss = fn(params)
    analytic = backward(tape, loss)
    worst = 0.0
    for name, base in params.items():
        grad = analytic.get(name)
        if grad is None:
            grad = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            _, lp = fn(params)
            flat[i] = orig - eps
            _, lm = fn(params)
            flat[i] = orig
            numeric = (float(lp.data) - float(lm.data)) / (2.0 * eps)
            a = grad.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst
