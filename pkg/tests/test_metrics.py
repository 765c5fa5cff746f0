import itertools

import numpy as np
import pytest

from medrep.metrics import (
    MetricError,
    MetricReport,
    auprc_sample_avg,
    auroc,
    average_precision,
    f1_scores,
    recall_at_k,
    shannon_entropy,
    weighted_auroc,
)


# -- brute-force oracles -----------------------------------------------------


def auroc_pairwise_oracle(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def ap_oracle(scores, labels):
    """Loop form: tie blocks in descending score order, step precision at the
    block end."""
    items = sorted(zip(scores, labels), key=lambda x: -x[0])
    n_pos = sum(l for _, l in items)
    ap = tp = seen = 0.0
    i = 0
    while i < len(items):
        j = i
        while j + 1 < len(items) and items[j + 1][0] == items[i][0]:
            j += 1
        block_pos = sum(l for _, l in items[i:j + 1])
        seen += j - i + 1
        tp += block_pos
        ap += (block_pos / n_pos) * (tp / seen)
        i = j + 1
    return ap


def topk_oracle(scores, k):
    pairs = sorted(enumerate(scores), key=lambda x: (-x[1], x[0]))
    return [i for i, _ in pairs[:k]]


# -- auroc --------------------------------------------------------------------


def test_auroc_perfect_and_reversed():
    assert auroc([0.9, 0.4, 0.6], [1, 0, 1]) == 1.0
    assert auroc([0.2, 0.8], [1, 0]) == 0.0


def test_auroc_constant_scores_half():
    assert auroc([0.5] * 10, [1, 0] * 5) == pytest.approx(0.5)


def test_auroc_single_class_rejected():
    with pytest.raises(MetricError):
        auroc([0.1, 0.2], [1, 1])


def test_auroc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n = int(rng.integers(5, 50))
        scores = np.round(rng.random(n), 2)  # rounding forces ties
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            continue
        assert auroc(scores, labels) == pytest.approx(
            auroc_pairwise_oracle(scores, labels), abs=1e-12
        )


def test_auroc_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    scores = rng.random(40)
    labels = rng.integers(0, 2, size=40)
    base = auroc(scores, labels)
    assert auroc(np.exp(3 * scores), labels) == pytest.approx(base, abs=1e-12)
    assert auroc(scores ** 3, labels) == pytest.approx(base, abs=1e-12)


# -- average precision --------------------------------------------------------


def test_ap_perfect_ranking():
    value, excluded = auprc_sample_avg([[0.9, 0.8, 0.1]], [[1, 1, 0]])
    assert value == 1.0
    assert excluded == 0


def test_ap_positives_ranked_last():
    n = 6
    scores = np.arange(n, 0, -1, dtype=float)
    labels = np.zeros(n)
    labels[-2:] = 1  # positions n-1, n at the bottom
    value = average_precision(scores, labels)
    assert value == pytest.approx(ap_oracle(list(scores), list(labels)), abs=1e-12)
    assert value == pytest.approx((1 / (n - 1) + 2 / n) / 2)


def test_ap_constant_scores_equal_prevalence():
    labels = np.array([1, 0, 0, 1, 0, 0, 0, 1])
    value = average_precision(np.full(8, 0.3), labels)
    assert value == pytest.approx(labels.mean(), abs=1e-12)


def test_ap_matches_oracle_random_instances():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(3, 40))
        scores = np.round(rng.random(n), 1)
        labels = rng.integers(0, 2, size=n)
        if labels.sum() == 0:
            labels[0] = 1
        assert average_precision(scores, labels) == pytest.approx(
            ap_oracle(list(scores), list(labels)), abs=1e-12
        )


def test_auprc_excludes_empty_samples():
    value, excluded = auprc_sample_avg(
        [[0.9, 0.1], [0.5, 0.6]], [[1, 0], [0, 0]]
    )
    assert excluded == 1
    assert value == 1.0


# -- F1 variants ---------------------------------------------------------------


def test_f1_perfect_every_variant():
    scores = np.array([[0.9, 0.9, 0.1], [0.1, 0.8, 0.9]])
    labels = np.array([[1, 1, 0], [0, 1, 1]])
    for variant in ("samples", "weighted", "weighted_inflated"):
        assert f1_scores(scores, labels, 0.5, variant) == 1.0
    assert f1_scores(scores.ravel(), labels.ravel(), 0.5, "binary") == 1.0


def test_f1_binary_formula():
    # TP=1, FP=1, FN=1 -> F1 = 2/(2+1+1) = 0.5
    scores = np.array([0.9, 0.9, 0.1])
    labels = np.array([1, 0, 1])
    assert f1_scores(scores, labels, 0.5, "binary") == 0.5


def test_f1_inflated_matches_confusion_oracle():
    scores = np.array([[0.9, 0.2, 0.5], [0.1, 0.7, 0.6]])
    labels = np.array([[1, 0, 1], [0, 1, 0]])
    # sample 0 has 2 positives -> top-2 {0, 2}; sample 1 has 1 -> top-1 {1}
    pred = np.array([[1, 0, 1], [0, 1, 0]], dtype=bool)
    support = labels.sum(axis=0)
    total = 0.0
    for j in range(3):
        tp = np.sum(pred[:, j] & (labels[:, j] == 1))
        fp = np.sum(pred[:, j] & (labels[:, j] == 0))
        fn = np.sum(~pred[:, j] & (labels[:, j] == 1))
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 1.0
        total += support[j] * f1
    expected = total / support.sum()
    assert f1_scores(scores, labels, variant="weighted_inflated") == pytest.approx(expected)


def test_f1_unknown_variant():
    with pytest.raises(MetricError):
        f1_scores([0.5], [1], 0.5, "nope")


# -- recall@k -------------------------------------------------------------------


def test_recall_at_k_basic():
    scores = np.array([[0.9, 0.1, 0.2, 0.8]])
    labels = np.array([[1, 1, 1, 0]])  # GT {0,1,2}, top-2 = {0,3}
    value, _ = recall_at_k(scores, labels, 2)
    assert value == pytest.approx(1 / 3)


def test_recall_at_k_saturates():
    rng = np.random.default_rng(3)
    scores = rng.random((5, 6))
    labels = (rng.random((5, 6)) < 0.4).astype(float)
    labels[labels.sum(axis=1) == 0, 0] = 1
    value, _ = recall_at_k(scores, labels, 6)
    assert value == 1.0


def test_recall_at_k_monotone_in_k():
    rng = np.random.default_rng(4)
    scores = rng.random((8, 10))
    labels = (rng.random((8, 10)) < 0.3).astype(float)
    labels[labels.sum(axis=1) == 0, 0] = 1
    values = [recall_at_k(scores, labels, k)[0] for k in range(1, 11)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_recall_at_k_matches_exhaustive_oracle():
    rng = np.random.default_rng(5)
    for _ in range(25):
        n = int(rng.integers(3, 12))
        scores = np.round(rng.random((4, n)), 1)
        labels = (rng.random((4, n)) < 0.4).astype(float)
        labels[labels.sum(axis=1) == 0, 0] = 1
        k = int(rng.integers(1, n + 1))
        value, _ = recall_at_k(scores, labels, k)
        expected = np.mean([
            len(set(topk_oracle(scores[i], k)) & set(np.flatnonzero(labels[i]).tolist()))
            / labels[i].sum()
            for i in range(4)
        ])
        assert value == pytest.approx(expected, abs=1e-12)


def test_recall_at_k_excludes_empty_ground_truth():
    scores = np.array([[0.9, 0.1], [0.2, 0.3]])
    labels = np.array([[1, 0], [0, 0]])
    value, excluded = recall_at_k(scores, labels, 1)
    assert excluded == 1
    assert value == 1.0


# -- weighted AuROC ----------------------------------------------------------------


def test_weighted_auroc_separable():
    scores = np.array([[5.0, 0.0], [4.0, 1.0], [0.0, 6.0], [1.0, 7.0]])
    ids = np.array([0, 0, 1, 1])
    assert weighted_auroc(scores, ids) == 1.0


def test_weighted_auroc_random_near_half():
    rng = np.random.default_rng(6)
    scores = rng.random((4000, 3))
    ids = rng.integers(0, 3, size=4000)
    assert abs(weighted_auroc(scores, ids) - 0.5) < 0.05


def test_weighted_auroc_support_weighting():
    rng = np.random.default_rng(7)
    scores = rng.random((4, 2))
    ids = np.array([0, 0, 0, 1])  # supports 3 and 1
    a0 = auroc(scores[:, 0], (ids == 0).astype(int))
    a1 = auroc(scores[:, 1], (ids == 1).astype(int))
    assert weighted_auroc(scores, ids) == pytest.approx((3 * a0 + a1) / 4, abs=1e-12)


def test_weighted_auroc_single_class_rejected():
    with pytest.raises(MetricError):
        weighted_auroc(np.ones((3, 2)), [0, 0, 0])


# -- entropy and report ---------------------------------------------------------


def test_entropy_uniform_and_onehot():
    assert shannon_entropy(np.full(4, 0.25)) == pytest.approx(np.log(4), abs=1e-12)
    assert shannon_entropy([1.0, 0.0, 0.0]) == 0.0


def test_entropy_matches_direct_formula():
    rng = np.random.default_rng(8)
    p = rng.random(17)
    p /= p.sum()
    direct = -sum(x * np.log(x) for x in p if x > 0)
    assert shannon_entropy(p) == pytest.approx(direct, abs=1e-12)


def test_entropy_bounded_by_log_q():
    rng = np.random.default_rng(9)
    for _ in range(20):
        q = int(rng.integers(1, 12))
        p = rng.random(q)
        p /= p.sum()
        assert shannon_entropy(p) <= np.log(q) + 1e-12


def test_metric_report_roundtrip():
    rep = MetricReport(task="heart_failure", metrics={"auroc": 0.8},
                       n_samples=42, threshold=0.5, subgroups={"hf": {"auroc": 0.9}})
    back = MetricReport.from_json(rep.to_json())
    assert back == rep
    # deterministic serialization
    assert rep.to_json() == MetricReport.from_json(rep.to_json()).to_json()
