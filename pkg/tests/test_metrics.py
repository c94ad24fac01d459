import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covernet import metrics
from covernet.classes import GENRES
from covernet.errors import InvalidParameterError, LabelError


def brute_force_topk(probs, labels, k):
    """Sort each row (descending prob, ascending index) and look for the label."""
    hits = 0
    for row, y in zip(probs, labels):
        ranked = sorted(range(len(row)), key=lambda c: (-row[c], c))
        hits += y in ranked[:k]
    return hits / len(labels)


def random_preds(rng, n, c=30, quantize=False):
    logits = rng.standard_normal((n, c))
    if quantize:
        logits = np.round(logits * 2) / 2  # force ties
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return metrics.PredictionSet(p, rng.integers(0, c, n), [f"c{i}" for i in range(c)])


def test_topk_k30_is_one(rng):
    assert metrics.topk_accuracy(random_preds(rng, 50), 30) == 1.0


def test_topk_hand_ranks():
    probs = np.array([
        [0.5, 0.3, 0.1, 0.1],
        [0.3, 0.5, 0.1, 0.1],
        [0.4, 0.3, 0.2, 0.1],
    ])
    preds = metrics.PredictionSet(probs, [0, 0, 3], "abcd")
    assert metrics.topk_accuracy(preds, 1) == pytest.approx(1 / 3)
    assert metrics.topk_accuracy(preds, 3) == pytest.approx(2 / 3)


@pytest.mark.parametrize("quantize", [False, True])
def test_topk_matches_brute_force_10000_rows(quantize):
    preds = random_preds(np.random.default_rng(10), 10_000, quantize=quantize)
    for k in (1, 2, 3):
        assert metrics.topk_accuracy(preds, k) == brute_force_topk(preds.probs, preds.labels, k)


def test_ties_lower_index_first():
    preds = metrics.PredictionSet(np.full((2, 4), 0.25), [0, 1], "abcd")
    assert metrics.topk_accuracy(preds, 1) == 0.5
    assert list(metrics.top_k_classes(np.full(4, 0.25), 2)) == [0, 1]


def test_k_out_of_range(rng):
    with pytest.raises(InvalidParameterError):
        metrics.topk_accuracy(random_preds(rng, 3), 31)
    with pytest.raises(InvalidParameterError):
        metrics.topk_accuracy(random_preds(rng, 3), 0)


def test_prediction_set_validation():
    with pytest.raises(LabelError):
        metrics.PredictionSet(np.full((1, 2), 0.5), [2], "ab")
    with pytest.raises(InvalidParameterError):
        metrics.PredictionSet(np.full((1, 2), 0.4), [0], "ab")


@pytest.mark.parametrize("acc,k,exact,shown", [(0.247, 1, 7.41, "7.4"), (0.331, 2, 4.965, "5.0"), (0.403, 3, 4.03, "4.0")])
def test_chance_multiples(acc, k, exact, shown):
    m = metrics.chance_multiple(acc, k)
    assert m == pytest.approx(exact, rel=1e-12)
    assert f"{m:.1f}" == shown


def test_perfect_predictor():
    labels = np.repeat(np.arange(30), 3)
    preds = metrics.PredictionSet(np.eye(30)[labels], labels, GENRES)
    r = metrics.per_class_report(preds)
    assert np.all(r.per_class_top1 == 100) and np.all(r.per_class_top3 == 100)
    assert np.array_equal(r.confusion, np.diag(np.full(30, 3)))
    assert all(metrics.top_confusions(r, c) == [] for c in range(30))


def test_constant_predictor():
    labels = np.repeat(np.arange(30), 2)
    probs = np.full((60, 30), 0.5 / 29)
    probs[:, 0] = 0.5
    r = metrics.per_class_report(metrics.PredictionSet(probs, labels, GENRES))
    assert r.per_class_top1[0] == 100 and np.all(r.per_class_top1[1:] == 0)
    assert r.overall[1] == pytest.approx(1 / 30)
    assert r.confusion[:, 0].sum() == 60 and r.confusion[:, 1:].sum() == 0
    # ties among the remaining 29: classes 1 and 2 fill ranks 2 and 3
    assert r.per_class_top3[1] == 100 and r.per_class_top3[3] == 0


def test_absent_class_reported_absent():
    probs = np.eye(3)[[0, 1]]
    r = metrics.per_class_report(metrics.PredictionSet(probs, [0, 1], "abc"))
    assert np.isnan(r.per_class_top1[2])
    text = metrics.render_table({"LeNet": r, "AlexNet": r})
    assert text.splitlines()[5].split("|")[1].split() == ["-", "-"]


def test_top_confusions_ordering():
    r = metrics.per_class_report(metrics.PredictionSet(np.eye(4)[[1] * 5 + [2] * 3 + [3] * 3 + [0]],
                                                      [0] * 12, "abcd"))
    assert metrics.top_confusions(r, 0) == [(1, 5), (2, 3), (3, 3)]


def test_confusion_pairs_independent():
    probs = np.eye(2)[[1, 1, 0]]
    r = metrics.per_class_report(metrics.PredictionSet(probs, [0, 0, 1], "ab"))
    assert metrics.top_confusions(r, 0) == [(1, 2)]
    assert metrics.top_confusions(r, 1) == [(0, 1)]


def test_report_invariants(rng):
    preds = random_preds(rng, 500)
    r = metrics.per_class_report(preds)
    assert r.confusion.sum() == 500
    np.testing.assert_array_equal(r.confusion.sum(axis=1), r.counts)
    assert r.overall[1] <= r.overall[2] <= r.overall[3]


def test_render_table_layout(rng):
    r = metrics.per_class_report(random_preds(rng, 300, quantize=True).__class__(
        np.eye(30)[np.arange(300) % 30], np.arange(300) % 30, GENRES))
    lines = metrics.render_table({"LeNet": r, "AlexNet": r}).splitlines()
    assert "LeNet" in lines[0] and "AlexNet" in lines[0]
    assert lines[1].count("Top 1") == 2 and lines[1].count("Top 3") == 2
    body = lines[3:33]
    assert [l.split("|")[0].strip() for l in body] == list(GENRES)
    assert lines[-1].startswith("Total Average") and "100.0" in lines[-1]
    csv_rows = metrics.report_csv(r).decode().splitlines()
    assert len(csv_rows) == 31 and csv_rows[0] == "classIndex,className,count,top1,top3"


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permuting_classes_preserves_accuracy(seed):
    g = np.random.default_rng(seed)
    preds = random_preds(g, 60, c=8, quantize=False)
    perm = g.permutation(8)
    inv = np.argsort(perm)
    moved = metrics.PredictionSet(preds.probs[:, perm], inv[preds.labels], [preds.class_names[i] for i in perm])
    a, b = metrics.per_class_report(preds), metrics.per_class_report(moved)
    assert a.overall == b.overall
    np.testing.assert_array_equal(b.confusion, a.confusion[np.ix_(perm, perm)])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_topk_monotone_in_k(seed):
    preds = random_preds(np.random.default_rng(seed), 40, c=6, quantize=True)
    accs = [metrics.topk_accuracy(preds, k) for k in range(1, 7)]
    assert accs == sorted(accs) and accs[-1] == 1.0
