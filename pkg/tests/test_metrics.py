import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from lungsound.errors import EmptyPredictions, LengthMismatch
from lungsound.ingest import TASK_CLASSES
from lungsound.metrics import (
    aggregate_units,
    compute_metrics,
    confusion_matrix,
    majority_vote,
    scores_from_confusion,
    summarize,
)

# ten hand-built (prediction, label) pairs per task
HAND = {
    "alsc4": ([0, 1, 2, 3, 0, 2, 1, 3, 0, 0], [0, 1, 2, 3, 1, 3, 1, 0, 0, 2]),
    "alsc2": ([0, 1, 1, 0, 0, 1, 1, 0, 0, 1], [0, 1, 0, 1, 0, 1, 1, 1, 0, 0]),
    "rdc3": ([0, 1, 2, 1, 2, 0, 1, 1, 2, 0], [0, 1, 2, 2, 1, 0, 1, 0, 2, 2]),
    "rdc2": ([1, 1, 1, 0, 0, 1, 0, 1, 1, 1], [1, 0, 1, 0, 1, 1, 0, 1, 1, 1]),
    "crackle2": ([1, 0, 1, 1, 0, 0, 0, 1, 0, 1], [1, 0, 0, 1, 1, 0, 0, 1, 1, 1]),
}


def brute_scores(preds, labels):
    normal = [p for p, t in zip(preds, labels) if t == 0]
    abnormal = [(p, t) for p, t in zip(preds, labels) if t != 0]
    sp = sum(p == 0 for p in normal) / len(normal) if normal else 0.0
    se = sum(p == t for p, t in abnormal) / len(abnormal) if abnormal else 0.0
    return se, sp


class TestScores:
    def test_perfect(self):
        r = compute_metrics([0, 1, 2, 3], [0, 1, 2, 3], "alsc4")
        assert (r.SE, r.SP, r.AS, r.HS) == (1.0, 1.0, 1.0, 1.0)

    def test_reported_average_score(self):
        cm = np.array([[7934, 2066], [6276, 3724]])
        se, sp, as_, _ = scores_from_confusion(cm)
        assert (sp, se) == (0.7934, 0.3724)
        assert as_ == pytest.approx(0.5829, abs=1e-12)

    @pytest.mark.parametrize("task", sorted(HAND))
    def test_hand_built_confusions(self, task):
        preds, labels = HAND[task]
        r = compute_metrics(preds, labels, task)
        n = len(TASK_CLASSES[task])
        assert r.confusion.tolist() == oracles.count_confusion(preds, labels, n)
        se, sp = brute_scores(preds, labels)
        assert (r.SE, r.SP) == (se, sp)
        assert r.n_units == 10

    def test_crackle_precision_recall(self):
        r = compute_metrics(*HAND["crackle2"], "crackle2")
        # tp=4, predicted crackle=5, true crackle=6
        assert (r.precision, r.recall) == (4 / 5, 4 / 6)
        assert r.F1 == pytest.approx(2 * 0.8 * (2 / 3) / (0.8 + 2 / 3))
        assert compute_metrics(*HAND["alsc4"], "alsc4").F1 is None

    def test_wrong_abnormal_class_is_not_sensitive(self):
        r = compute_metrics([2, 1], [1, 1], "alsc4")
        assert r.SE == 0.5

    def test_no_normal_units(self):
        r = compute_metrics([1, 1], [1, 1], "crackle2")
        assert (r.SP, r.SE, r.HS) == (0.0, 1.0, 0.0)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            compute_metrics([0], [0, 1], "alsc2")

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60), st.randoms())
    @settings(max_examples=100, deadline=None)
    def test_invariants(self, pairs, rnd):
        preds, labels = map(list, zip(*pairs))
        r = compute_metrics(preds, labels, "alsc4")
        assert r.confusion.min() >= 0 and r.confusion.sum() == len(pairs)
        assert r.AS == (r.SE + r.SP) / 2
        if r.SE + r.SP > 0:
            assert r.HS == pytest.approx(2 * r.SE * r.SP / (r.SE + r.SP))
        order = list(range(len(pairs)))
        rnd.shuffle(order)
        s = compute_metrics([preds[i] for i in order], [labels[i] for i in order], "alsc4")
        assert (s.SE, s.SP) == (r.SE, r.SP)


class TestVoting:
    def test_strict_majority(self):
        assert majority_vote([0, 0, 1]) == 0

    def test_single(self):
        assert majority_vote([2]) == 2

    def test_tie_goes_to_higher_mean_probability(self):
        assert majority_vote([0, 1], [[0.7, 0.3], [0.45, 0.55]]) == 0
        assert majority_vote([0, 1], [[0.45, 0.55], [0.35, 0.65]]) == 1

    def test_empty(self):
        with pytest.raises(EmptyPredictions):
            majority_vote([])

    def test_aggregate_units(self):
        probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.3, 0.7], [0.6, 0.4]])
        units, preds = aggregate_units(["b", "a", "a", "b"], probs)
        assert units == ["b", "a"]
        assert preds == [0, 1]


class TestSummary:
    def test_mean_std(self):
        reports = [compute_metrics([0, 1], [0, 1], "alsc2"), compute_metrics([0, 0], [0, 1], "alsc2")]
        s = summarize(reports)
        assert s["SE_mean"] == 0.5 and s["SE_std"] == 0.5
        assert s["SP_mean"] == 1.0 and s["SP_std"] == 0.0

    def test_row_flattens_confusion(self):
        row = compute_metrics([0, 1], [0, 0], "crackle2").row()
        assert row["confusion"] == "1,1;0,0"

    def test_confusion_orientation(self):
        assert confusion_matrix([1], [0], 2).tolist() == [[0, 1], [0, 0]]
