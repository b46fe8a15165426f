import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamanchor.anchors import AnchorError, TaskKind, extract_anchor, positive_runs, weights_for_sequence
from streamanchor.data import LabeledSequence


def test_extract_anchor_examples():
    y = [0, 0, 1, 1, 1, 0]
    assert extract_anchor(y, TaskKind.KWS) == 5
    assert extract_anchor(y, "SOD") == 3
    assert extract_anchor(y, "MTD") == 3
    for task in TaskKind:
        assert extract_anchor([0, 0, 0, 0], task) is None


def test_multiple_runs_rejected():
    with pytest.raises(AnchorError, match="more than one|at most one"):
        extract_anchor([1, 0, 1], "KWS")


def test_empty_labels_rejected():
    with pytest.raises(AnchorError):
        extract_anchor([], "KWS")


def test_positive_runs():
    assert positive_runs([0, 1, 1, 0, 1]) == [(1, 2), (4, 4)]
    assert positive_runs([1, 1]) == [(0, 1)]
    assert positive_runs([0, 0]) == []


def test_weights_for_sequence_examples():
    y = [0, 1, 1, 0]
    assert weights_for_sequence(y, "KWS").tolist() == [0.5, 0.75, 1.0, 0.75]
    assert weights_for_sequence(y, "SOD").tolist() == [0.75, 1.0, 0.75, 0.5]
    assert weights_for_sequence([0, 0, 0, 0], "KWS").tolist() == [1.0] * 4
    assert weights_for_sequence([0, 0, 0], "SOD", no_anchor_weight=0.5).tolist() == [0.5] * 3


def test_weights_for_labeled_sequence_uses_its_task():
    s = LabeledSequence(np.zeros((4, 2)), np.array([0, 1, 1, 0], dtype=np.int8), 10.0,
                        TaskKind.SOD, "x")
    assert weights_for_sequence(s).tolist() == [0.75, 1.0, 0.75, 0.5]
    with pytest.raises(ValueError):
        weights_for_sequence([0, 1])


@st.composite
def single_run(draw):
    T = draw(st.integers(1, 500))
    start = draw(st.integers(0, T - 1))
    end = draw(st.integers(start, T - 1))
    y = np.zeros(T, dtype=np.int8)
    y[start:end + 1] = 1
    return y


@settings(max_examples=300, deadline=None)
@given(single_run())
def test_kws_anchor_not_before_sod_anchor(y):
    k, s = extract_anchor(y, "KWS"), extract_anchor(y, "SOD")
    assert k >= s
    assert (k == s) == (int(y.sum()) == 1)


@settings(max_examples=300, deadline=None)
@given(single_run())
def test_mirror_symmetry(y):
    T = len(y)
    assert extract_anchor(y[::-1], "KWS") == T + 1 - extract_anchor(y, "SOD")
    assert extract_anchor(y[::-1], "SOD") == T + 1 - extract_anchor(y, "KWS")


@settings(max_examples=300, deadline=None)
@given(single_run(), st.sampled_from(list(TaskKind)))
def test_weights_peak_at_anchor_and_step_by_one_over_T(y, task):
    T = len(y)
    w = weights_for_sequence(y, task)
    A = extract_anchor(y, task)
    assert w[A - 1] == 1.0 and w.argmax() == A - 1
    left, right = np.diff(w[:A]), np.diff(w[A - 1:])
    assert np.allclose(left, 1 / T, atol=1e-12) and np.allclose(right, -1 / T, atol=1e-12)
