import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ptnlab import metrics as M


def pairwise_auc(pos, neg):
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def test_rank_sum_equals_pairwise_oracle_exactly():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 201))
        n_pos = int(rng.integers(1, n))
        # coarse values force plenty of ties
        scores = rng.integers(0, 12, n) / 11.0
        assert M.auc(scores[:n_pos], scores[n_pos:]) == pairwise_auc(scores[:n_pos], scores[n_pos:])


@given(st.lists(st.integers(0, 5), min_size=1, max_size=30), st.lists(st.integers(0, 5), min_size=1, max_size=30))
def test_auc_oracle_property(pos, neg):
    assert M.auc(pos, neg) == pairwise_auc(pos, neg)


def test_auc_needs_both_sides():
    with pytest.raises(M.UndefinedMetricError):
        M.auc([], [0.2])


def test_dauc_perfect_and_uniform():
    grades = np.repeat(np.arange(4), 5)
    perfect = M.make_records(range(20), grades, np.eye(4)[grades])
    assert M.dauc(perfect) == 1.0
    uniform = M.make_records(range(20), grades, np.full((20, 4), 0.25))
    assert M.dauc(uniform) == 0.5


def test_dauc_skips_degenerate_split():
    grades = np.array([0, 1, 2, 1, 2])
    recs = M.make_records(range(5), grades, np.eye(4)[grades])
    value, skipped = M.dauc(recs, return_skipped=True)
    assert skipped == ["abc|d"]
    assert value == 1.0
    s = M.summarize(recs)
    assert s["split_auc"]["abc|d"] is None and s["skipped_splits"] == ["abc|d"]


def test_split_scores_use_dense_side_mass():
    # grade c case scores 0.6 on the ab|cd split, grade b case scores 0.4
    recs = M.make_records([1, 2], [2, 1], np.array([[0.1, 0.3, 0.3, 0.3], [0.2, 0.4, 0.2, 0.2]]))
    assert M.split_aucs(recs)["ab|cd"] == 1.0


def test_accuracy_ties_go_to_lowest_grade():
    recs = M.make_records([0], [1], np.array([[0.0, 0.5, 0.5, 0.0]]))
    assert M.accuracy(recs) == 1.0


def test_confusion_matrix_counts():
    grades = np.array([0, 0, 3])
    probs = np.eye(4)[[0, 1, 3]]
    cm = M.confusion_matrix(M.make_records(range(3), grades, probs))
    assert cm[0, 0] == 1 and cm[0, 1] == 1 and cm[3, 3] == 1 and cm.sum() == 3


def test_report_is_deterministic_json(tmp_path):
    rng = np.random.default_rng(3)
    grades = rng.integers(0, 4, 30)
    recs = M.make_records(range(30), grades, rng.dirichlet(np.ones(4), 30))
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    M.report(recs, a)
    M.report(recs, b)
    assert a.read_bytes() == b.read_bytes()
    assert 0 <= json.loads(a.read_text())["accuracy"] <= 1


def test_record_validation():
    with pytest.raises(ValueError):
        M.EvalRecord(0, 5, np.full(4, 0.25))
    with pytest.raises(ValueError):
        M.EvalRecord(0, 1, np.array([0.5, 0.5, 0.5, 0.5]))


def test_roc_points_end_at_one():
    pts = M.roc_points([0.9, 0.4], [0.1, 0.5])
    assert pts[-1] == (1.0, 1.0)
