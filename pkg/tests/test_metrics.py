import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from viser.errors import EmptyEvaluation, UndefinedAP
from viser.metrics import (
    PredictionRecord,
    average_precision,
    classification_accuracy,
    classification_error,
    evaluation_report,
    localization_accuracy,
    mean_average_precision,
    point_localization_correct,
)


def brute_ap(scores, truth):
    """Average over positives of the precision at that positive's rank (O(n^2))."""
    n = len(scores)
    precisions = []
    for i in range(n):
        if truth[i] != 1:
            continue
        ahead = [j for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j <= i)]
        precisions.append(sum(truth[j] == 1 for j in ahead) / len(ahead))
    return sum(precisions) / len(precisions)


def test_error_examples():
    assert classification_error([0.9, 0.1, 0.7], [1, 0, 1]) == 0.0
    assert classification_error([0.9, 0.9, 0.1, 0.1], [1, 0, 1, 0]) == 50.0
    # 0.5 is class 1
    assert classification_error([0.5], [1]) == 0.0
    with pytest.raises(EmptyEvaluation):
        classification_error([], [])


def test_error_matches_recount():
    rng = np.random.default_rng(0)
    p = rng.random(1000)
    t = rng.integers(0, 2, 1000)
    wrong = 0
    for pi, ti in zip(p, t):
        wrong += (1 if pi >= 0.5 else 0) != ti
    assert classification_error(p, t) == 100.0 * wrong / 1000


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=200))
def test_error_plus_accuracy_is_100(rows):
    p, t = zip(*rows)
    assert classification_error(p, t) + classification_accuracy(p, t) == 100.0


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.7, 0.3, 0.2, 0.1], [1, 1, 1, 0, 0, 0]) == 1.0
    assert average_precision([0.9, 0.1], [0, 1]) == 0.5
    # ties resolved by index: the earlier sample ranks first
    assert average_precision([0.5, 0.5], [0, 1]) == 0.5
    assert average_precision([0.5, 0.5], [1, 0]) == 1.0
    with pytest.raises(UndefinedAP):
        average_precision([0.3, 0.2], [0, 0])


def test_ap_against_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(1, 40))
        s = np.round(rng.random(n), 1)
        t = rng.integers(0, 2, n)
        if not t.any():
            t[rng.integers(n)] = 1
        assert abs(average_precision(s, t) - brute_ap(s.tolist(), t.tolist())) < 1e-12


@given(st.lists(st.tuples(st.integers(-50, 50), st.integers(0, 1)), min_size=1, max_size=60).filter(
    lambda r: any(t for _, t in r)))
def test_ap_invariant_under_monotone_transform(rows):
    k, t = map(np.array, zip(*rows))
    # a 0.1 grid keeps distinct scores distinct after each transform
    s = k / 10
    base = average_precision(s, t)
    for f in (np.exp, np.arctan, lambda x: x ** 3 - 7):
        assert average_precision(f(s), t) == base


def test_mean_ap():
    rng = np.random.default_rng(2)
    s = rng.random(30)
    t = rng.integers(0, 2, 30)
    t[0] = 1
    m = mean_average_precision(np.stack([s, s, s], 1), np.stack([t, t, t], 1))
    assert m.mean == pytest.approx(average_precision(s, t), abs=1e-15)
    m = mean_average_precision(np.stack([s, s], 1), np.stack([t, np.zeros(30)], 1))
    assert m.undefined == 1 and m.per_class[1] is None
    assert m.mean == average_precision(s, t)


def test_point_localization():
    box = (100, 200, 150, 260)
    assert point_localization_correct((125, 230), [box])
    assert point_localization_correct((150 + 18, 230), [box])
    assert not point_localization_correct((150 + 19, 230), [box])
    assert point_localization_correct((125, 200 - 18), [box])
    assert not point_localization_correct((125, 200 - 19), [box])
    assert point_localization_correct((100 - 18, 260 + 18), [box])
    assert not point_localization_correct((125, 230), [])
    assert point_localization_correct((169, 230), [box], tolerance=19)
    with pytest.raises(ValueError):
        point_localization_correct((0, 0), [(5, 5, 5, 9)])
    with pytest.raises(ValueError):
        point_localization_correct((0, 0), [box], tolerance=-1)


def test_localization_accuracy_and_report():
    recs = [
        PredictionRecord(np.array([0.9, 0.2]), np.array([1, 0]), {0: (10, 10), 1: (0, 0)}, {0: [(0, 0, 20, 20)]}),
        PredictionRecord(np.array([0.4, 0.8]), np.array([1, 1]), {0: (100, 100), 1: (5, 5)},
                         {0: [(0, 0, 20, 20)], 1: [(0, 0, 9, 9)]}),
    ]
    overall, per = localization_accuracy(recs)
    assert per == {0: 0.5, 1: 1.0}
    assert overall == pytest.approx(2 / 3)
    rep = evaluation_report(recs)
    assert rep["error_percent"] == 25.0
    assert rep["per_class_ap"] == [1.0, 1.0]
    assert rep["localization_accuracy"] == pytest.approx(2 / 3)
    with pytest.raises(EmptyEvaluation):
        evaluation_report([])
