import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ramehr.metrics import EvalReport, UndefinedMetric, acc_f1, aupr, auroc, evaluate

from metrics_oracle import aupr_thresholds, auroc_pairs


def labelled(min_size=2, max_size=500):
    """Scores with deliberate ties and labels holding both classes."""
    return st.integers(min_size, max_size).flatmap(lambda n: st.tuples(
        st.lists(st.integers(0, 20).map(lambda v: v / 20), min_size=n, max_size=n),
        st.lists(st.booleans(), min_size=n, max_size=n),
    )).filter(lambda sy: 0 < sum(sy[1]) < len(sy[1]))


@settings(max_examples=60, deadline=None)
@given(labelled())
def test_auroc_equals_pairwise_oracle(sy):
    s, y = sy
    assert auroc(s, y) == pytest.approx(auroc_pairs(s, y), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(labelled())
def test_aupr_equals_threshold_oracle(sy):
    s, y = sy
    assert aupr(s, y) == pytest.approx(aupr_thresholds(s, y), abs=1e-12)


def test_oracles_on_n_500_continuous_scores():
    rng = np.random.default_rng(0)
    for _ in range(5):
        y = rng.random(500) < 0.3
        s = rng.normal(size=500) + y
        assert auroc(s, y) == pytest.approx(auroc_pairs(s.tolist(), y.tolist()), abs=1e-12)
        assert aupr(s, y) == pytest.approx(aupr_thresholds(s.tolist(), y.tolist()), abs=1e-12)


def test_worked_examples():
    s, y = [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]
    assert auroc(s, y) == pytest.approx(0.75, abs=1e-12)
    assert aupr(s, y) == pytest.approx(5 / 6, abs=1e-12)


def test_perfect_and_inverted_ranking():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert aupr([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


@settings(max_examples=40, deadline=None)
@given(labelled(max_size=80))
def test_auroc_invariants(sy):
    s, y = np.array(sy[0]), np.array(sy[1])
    a = auroc(s, y)
    assert auroc(np.exp(3 * s) + 1, y) == pytest.approx(a, abs=1e-12)   # strictly increasing transform
    assert a + auroc(s, ~y) == pytest.approx(1.0, abs=1e-12)
    assert auroc(np.full(s.shape, 0.3), y) == 0.5


def test_random_scores_give_chance_level():
    rng = np.random.default_rng(0)
    y = rng.random(10_000) < 0.3
    s = rng.random(10_000)
    assert auroc(s, y) == pytest.approx(0.5, abs=0.02)
    assert aupr(s, y) == pytest.approx(y.mean(), abs=0.02)


def test_single_class_is_undefined():
    with pytest.raises(UndefinedMetric):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetric):
        aupr([0.1, 0.2], [0, 0])
    assert aupr([0.1, 0.2], [1, 1]) == 1.0


def test_acc_f1_hand_values():
    s = np.array([[0.9, 0.2], [0.6, 0.7], [0.1, 0.4]])
    y = np.array([[1, 0], [0, 1], [0, 1]])
    acc, f1 = acc_f1(s, y)
    # predictions [[1,0],[1,1],[0,0]]: 4 of 6 cells right; each column has tp=1 and one error
    assert acc == pytest.approx(4 / 6)
    assert f1 == pytest.approx(2 / 3)


def test_acc_f1_degenerate_columns():
    acc, f1 = acc_f1(np.zeros((4, 1)), np.zeros((4, 1)))
    assert (acc, f1) == (1.0, 0.0)
    acc, f1 = acc_f1([0.7, 0.2], [1, 0])
    assert (acc, f1) == (1.0, 1.0)
    with pytest.raises(ValueError):
        acc_f1([0.5], [1], threshold=1.0)


def test_threshold_is_inclusive():
    assert acc_f1([0.5], [1]) == (1.0, 1.0)


def test_evaluate_skips_undefined_labels_in_macro_means():
    s = np.array([[0.9, 0.2], [0.1, 0.3], [0.8, 0.6]])
    y = np.array([[1, 0], [0, 0], [1, 0]])
    rep = evaluate(s, y, label_names=["a", "b"])
    assert rep.auroc == 1.0 and rep.aupr == 1.0
    assert math.isnan(rep.per_label[1]["auroc"])
    assert [p["label"] for p in rep.per_label] == ["a", "b"]
    assert rep.per_label[0]["positives"] == 2


def test_evaluate_all_undefined_gives_nan():
    rep = evaluate(np.array([0.2, 0.4]), np.array([0, 0]))
    assert math.isnan(rep.auroc) and math.isnan(rep.aupr)


def test_evaluate_shape_mismatch():
    with pytest.raises(ValueError):
        evaluate(np.zeros((3, 2)), np.zeros((3, 1)))


def test_report_json_maps_nan_to_null(tmp_path):
    rep = evaluate(np.array([[0.2, 0.9], [0.4, 0.1]]), np.array([[0, 1], [0, 0]]))
    obj = rep.to_json()
    assert obj["per_label"][0]["auroc"] is None
    path = tmp_path / "r.json"
    rep.save(path)
    text = path.read_text()
    assert "NaN" not in text and json.loads(text) == obj
    assert set(obj) == {"acc", "auroc", "aupr", "macro_f1", "per_label"}
    assert isinstance(EvalReport(**{**obj, "per_label": []}).acc, float)
