from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fertransfer.errors import EmptyEvaluation, LengthMismatch
from fertransfer.metrics import confusion, evaluate, precision_f1, top_k_accuracy, war
from oracles import brute_force_metrics


def test_confusion_examples():
    assert np.array_equal(confusion([0, 1, 2], [0, 1, 2]).counts, np.diag([1, 1, 1, 0, 0, 0, 0]))
    assert confusion([], []).counts.sum() == 0
    cm = confusion([0, 1], [1, 1]).counts
    assert cm[1, 0] == 1 and cm[1, 1] == 1 and cm.sum() == 2
    with pytest.raises(LengthMismatch):
        confusion([0], [0, 1])


def test_war_examples():
    assert war(confusion(range(7), range(7))) == 100.0
    # class 0: 3 samples, 2 right; class 1: 1 sample, right -> (3/4)(2/3) + (1/4)(1) = 75
    cm = confusion([0, 0, 1, 1], [0, 0, 0, 1], num_classes=2)
    assert war(cm) == pytest.approx(75.0, abs=1e-12)
    assert 100 * np.trace(cm.counts) / cm.total == pytest.approx(75.0)
    with pytest.raises(EmptyEvaluation):
        war(confusion([], []))


def test_top_k_examples():
    logits = np.array([[0.1, 0.5, 0.4, 0, 0, 0, 0]])
    assert top_k_accuracy(logits, [2], 2) == 100.0
    assert top_k_accuracy(logits, [2], 1) == 0.0
    rand = np.random.default_rng(0).normal(size=(20, 7))
    assert top_k_accuracy(rand, np.arange(20) % 7, 7) == 100.0
    with pytest.raises(ValueError):
        top_k_accuracy(logits, [0], 0)


def test_top_k_tie_breaks_to_lower_index():
    logits = np.zeros((1, 7))
    assert top_k_accuracy(logits, [0], 1) == 100.0
    assert top_k_accuracy(logits, [1], 1) == 0.0
    assert top_k_accuracy(logits, [1], 2) == 100.0


def test_precision_f1_examples():
    p, f, _ = precision_f1(confusion(range(7), range(7)))
    assert (p, f) == (100.0, 100.0)
    # everything predicted as class 0 on a balanced 7-class set
    targets = np.repeat(np.arange(7), 5)
    p, f, per = precision_f1(confusion(np.zeros(35, int), targets))
    assert per["precision"][0] == pytest.approx(100 / 7)
    assert np.all(per["precision"][1:] == 0)
    assert p == pytest.approx(100 / 49)
    # f1_0 = 2 * (1/7) * 1 / (1/7 + 1) = 1/4
    assert f == pytest.approx(100 * 0.25 / 7)
    p, f, _ = precision_f1(confusion([3], [3]))
    assert (p, f) == (100.0, 100.0)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 50), st.integers(0, 2**32 - 1))
def test_metrics_match_brute_force(n, seed):
    rng = np.random.default_rng(seed)
    logits = rng.integers(-2, 3, size=(n, 7)).astype(float)  # small ints to force ties
    targets = rng.integers(0, 7, size=n)
    preds = np.argmax(logits, axis=1)
    ref = brute_force_metrics(preds.tolist(), targets.tolist(), logits.tolist())
    cm = confusion(preds, targets)
    p, f, _ = precision_f1(cm)
    assert abs(war(cm) - ref["war"]) < 1e-9
    assert abs(p - ref["precision"]) < 1e-9
    assert abs(f - ref["f1"]) < 1e-9
    assert abs(top_k_accuracy(logits, targets, 2) - ref["top2"]) < 1e-9
    assert abs(top_k_accuracy(logits, targets, 1) - war(cm)) < 1e-9
    assert abs(war(cm) - 100 * np.trace(cm.counts) / n) < 1e-9
    tops = [top_k_accuracy(logits, targets, k) for k in range(1, 8)]
    assert tops == sorted(tops) and tops[-1] == 100.0
    perm = rng.permutation(n)
    assert war(confusion(preds[perm], targets[perm])) == war(cm)
    assert top_k_accuracy(logits[perm], targets[perm], 2) == top_k_accuracy(logits, targets, 2)
    assert precision_f1(confusion(preds[perm], targets[perm]))[:2] == (p, f)


def test_evaluate_report():
    logits = np.eye(7)[[0, 1, 2, 3, 4, 5, 6, 0]]
    rep = evaluate(logits, [0, 1, 2, 3, 4, 5, 6, 1], "demo")
    assert rep.n_samples == 8
    assert rep.war == pytest.approx(87.5)
    assert rep.top_k_acc[1] == pytest.approx(87.5)
    assert set(rep.per_class) == {"neutral", "happy", "sad", "surprise", "fear", "disgust", "anger"}
    assert all(0 <= v <= 100 for v in (rep.war, rep.precision_macro, rep.f1_macro))
    assert rep.to_record()["top_k_acc"]["2"] == rep.top_k_acc[2]
