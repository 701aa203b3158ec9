import numpy as np
import pandas as pd
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from lmlcc.errors import InsufficientDataError, ShapeError, ValidationError
from lmlcc.metrics import (
    REPORT_COLUMNS, BasicMetrics, ConfusionCounts, basic_metrics, confusion,
    evaluate_probs, roc_auc, write_report, write_roc
)


def pairwise_auc(labels, probs):
    """Probability that a random positive outscores a random negative."""
    pos = [p for p, y in zip(probs, labels) if y == 1]
    neg = [p for p, y in zip(probs, labels) if y == 0]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0
               for a in pos for b in neg)

    return wins / (len(pos) * len(neg))


def test_reported_test_set_counts():
    m = basic_metrics(ConfusionCounts(tp=53, tn=50, fp=7, fn=2))

    assert m.acc == pytest.approx(0.9196, abs=1e-4)
    assert m.sen == pytest.approx(0.9636, abs=1e-4)
    assert m.spe == pytest.approx(0.8772, abs=1e-4)
    assert m.pre == pytest.approx(53 / 60)


def test_confusion():
    c = confusion([1, 1, 0, 0], [0.9, 0.4, 0.6, 0.1])

    assert (c.tp, c.tn, c.fp, c.fn) == (1, 1, 1, 1)
    assert basic_metrics(c) == BasicMetrics(0.5, 0.5, 0.5, 0.5)


def test_threshold_is_inclusive():
    c = confusion([1, 0], [0.5, 0.3], threshold=0.5)

    assert (c.tp, c.tn) == (1, 1)


def test_undefined_metrics_are_none():
    m = basic_metrics(confusion([0, 0, 0], [0.1, 0.2, 0.3]))

    assert m.acc == 1.0 and m.spe == 1.0
    assert m.pre is None and m.sen is None
    assert m.undefined == ['pre', 'sen']


def test_input_validation():
    with pytest.raises(ShapeError):
        confusion([1, 0], [0.5])
    with pytest.raises(ValidationError):
        confusion([1, 2], [0.5, 0.5])
    with pytest.raises(ValidationError):
        ConfusionCounts(-1, 0, 0, 0)


def test_roc_perfect_and_tied():
    roc, area = roc_auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9])

    assert area == 1.0
    assert roc[0] == (0.0, 0.0) and roc[-1] == (1.0, 1.0)

    _, tied = roc_auc([0, 1, 0, 1], [0.5] * 4)
    assert tied == 0.5


def test_roc_single_class():
    with pytest.raises(InsufficientDataError):
        roc_auc([1, 1, 1], [0.2, 0.5, 0.9])


labeled_scores = st.lists(
    st.tuples(st.integers(0, 1), st.sampled_from([i / 20 for i in range(21)])),
    min_size=2, max_size=40
)


@settings(max_examples=200)
@given(labeled_scores)
def test_auc_matches_pairwise_probability(pairs):
    labels = [y for y, _ in pairs]
    probs = [p for _, p in pairs]
    assume(0 < sum(labels) < len(labels))

    _, area = roc_auc(labels, probs)

    assert area == pytest.approx(pairwise_auc(labels, probs), abs=1e-9)


@given(labeled_scores)
def test_auc_is_invariant_to_monotone_rescaling(pairs):
    labels = [y for y, _ in pairs]
    probs = np.array([p for _, p in pairs])
    assume(0 < sum(labels) < len(labels))

    assert roc_auc(labels, probs)[1] == pytest.approx(
        roc_auc(labels, probs**3)[1])


@given(labeled_scores)
def test_roc_is_monotone(pairs):
    labels = [y for y, _ in pairs]
    probs = [p for _, p in pairs]
    assume(0 < sum(labels) < len(labels))

    roc, _ = roc_auc(labels, probs)
    fpr, tpr = np.array(roc).T

    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)


def test_report_files(tmp_path):
    report = evaluate_probs([1, 1, 0, 0], [0.9, 0.4, 0.6, 0.1],
                            learned_cuts=[0.4, 0.6])

    write_report(report, str(tmp_path / 'metrics.csv'))
    write_roc(report, str(tmp_path / 'roc.csv'))

    metrics = pd.read_csv(str(tmp_path / 'metrics.csv'))
    roc = pd.read_csv(str(tmp_path / 'roc.csv'))

    assert list(metrics.columns) == REPORT_COLUMNS
    assert metrics.loc[0, 'auc'] == pytest.approx(0.75)
    assert metrics.loc[0, 'learned_cuts_hu'] == '-400;-100'
    assert list(roc.columns) == ['fpr', 'tpr']
    assert report.learned_cuts_hu == pytest.approx([-400.0, -100.0])
    assert 'cuts (HU): -400.0, -100.0' in report.summary()


def test_summary_marks_undefined():
    report = evaluate_probs([0, 1], [0.1, 0.2], threshold=0.9)

    assert 'precision undefined' in report.summary()
