"""Tests for evaluation metrics, checked against brute-force re-implementations."""

import json

import numpy as np
import pandas as pd
import pytest

from domain import AttributeSet, LabelSet, Taxonomy, count_to_bin
from errors import DataError, DimensionError
from metrics import (
    attribute_accuracy,
    confusion_matrix,
    evaluate_heads,
    multilabel_metrics,
    per_class_accuracy,
    topk_accuracy,
    within_one_bin,
    write_reports,
)

N_ORACLE = 1000


# ---------------------------------------------------------------------------
# Brute-force oracles
# ---------------------------------------------------------------------------

def ranked(row):
    """Class ids by decreasing probability, lower id first on ties."""
    return sorted(range(len(row)), key=lambda c: (-row[c], c))


def brute_topk(preds, labels, k):
    return sum(1 for row, y in zip(preds, labels) if y in ranked(row)[:k]) / len(labels)


def brute_within_one(preds, labels):
    return sum(1 for row, y in zip(preds, labels) if abs(ranked(row)[0] - y) <= 1) / len(labels)


def brute_confusion(preds, labels, k):
    m = [[0] * k for _ in range(k)]
    for row, y in zip(preds, labels):
        m[y][ranked(row)[0]] += 1
    return m


def brute_multilabel(probs, flags):
    acc = prec = rec = 0.0
    for p, y in zip(probs, flags):
        Y = {j for j, f in enumerate(y) if f}
        Z = {j for j, v in enumerate(p) if v > 0.5}
        inter, union = len(Y & Z), len(Y | Z)
        acc += 1.0 if not union else inter / union
        prec += (1.0 if not Y else 0.0) if not Z else inter / len(Z)
        rec += (1.0 if not Z else 0.0) if not Y else inter / len(Y)
    n = len(flags)
    return acc / n, prec / n, rec / n


def random_set(rng, n=N_ORACLE, k=12):
    # Quantized probabilities so ties actually occur.
    preds = rng.integers(0, 5, size=(n, k)) / 4.0
    labels = rng.integers(0, k, size=n)
    return preds, labels


# ---------------------------------------------------------------------------
# Oracle agreement
# ---------------------------------------------------------------------------

def test_topk_matches_brute_force():
    preds, labels = random_set(np.random.default_rng(0))
    for k in (1, 2, 5, 12):
        assert topk_accuracy(preds, labels, k) == brute_topk(preds.tolist(), labels.tolist(), k)


def test_within_one_bin_matches_brute_force():
    preds, labels = random_set(np.random.default_rng(1))
    assert within_one_bin(preds, labels) == brute_within_one(preds.tolist(), labels.tolist())


def test_confusion_matches_brute_force():
    preds, labels = random_set(np.random.default_rng(2))
    assert confusion_matrix(preds, labels).tolist() == brute_confusion(preds.tolist(), labels.tolist(), 12)


def test_multilabel_matches_brute_force():
    rng = np.random.default_rng(3)
    probs = rng.integers(0, 5, size=(N_ORACLE, 6)) / 4.0
    flags = rng.random((N_ORACLE, 6)) < 0.3
    got = multilabel_metrics(probs, flags)
    expected = brute_multilabel(probs.tolist(), flags.tolist())
    assert (got.accuracy, got.precision, got.recall) == pytest.approx(expected, abs=1e-12)


# ---------------------------------------------------------------------------
# Hand-built cases
# ---------------------------------------------------------------------------

def test_topk_cases():
    eye = np.eye(4)
    assert topk_accuracy(eye, [0, 1, 2, 3], 1) == 1.0
    assert topk_accuracy(eye, [0, 1, 2, 3], 3) == 1.0
    assert topk_accuracy(eye[[0, 1, 2, 0]], [0, 1, 2, 3], 1) == 0.75
    assert topk_accuracy(eye[[1, 1, 1, 1]], [0, 1, 2, 3], 4) == 1.0


def test_topk_non_decreasing_in_k():
    preds, labels = random_set(np.random.default_rng(4), n=200)
    values = [topk_accuracy(preds, labels, k) for k in range(1, 13)]
    assert values == sorted(values)
    assert values[-1] == 1.0


def test_within_one_bin_cases():
    eye = np.eye(12)
    assert within_one_bin(eye[[4]], [3]) == 1.0
    assert within_one_bin(eye[[11]], [10]) == 1.0
    assert within_one_bin(eye[[2]], [0]) == 0.0


def test_multilabel_cases():
    flags = np.zeros((1, 6), dtype=bool)
    flags[0, [2, 3]] = True  # moving, eating
    probs = np.full((1, 6), 0.1)
    probs[0, 2], probs[0, 3] = 0.9, 0.4
    s = multilabel_metrics(probs, flags)
    assert (s.accuracy, s.precision, s.recall) == (0.5, 1.0, 0.5)

    s = multilabel_metrics(np.full((1, 6), 0.1), np.zeros((1, 6), dtype=bool))
    assert (s.accuracy, s.precision, s.recall) == (1.0, 1.0, 1.0)

    s = multilabel_metrics(flags.astype(float), flags)
    assert (s.accuracy, s.precision, s.recall) == (1.0, 1.0, 1.0)


def test_multilabel_pooled_over_attributes():
    probs = np.array([[0.9, 0.1], [0.9, 0.9]])
    flags = np.array([[True, False], [True, True]])
    s = multilabel_metrics(probs, flags, pooled="attributes")
    assert (s.accuracy, s.precision, s.recall) == (1.0, 1.0, 1.0)
    with pytest.raises(DataError):
        multilabel_metrics(probs, flags, pooled="nope")


def test_attribute_accuracy():
    probs = np.array([[0.9, 0.2], [0.1, 0.8]])
    flags = np.array([[True, True], [False, True]])
    assert attribute_accuracy(probs, flags).tolist() == [1.0, 0.5]


def test_per_class_accuracy():
    eye = np.eye(3)
    # Class 0: 2 of 4 right; class 2: 1 of 1; class 1 absent.
    preds = eye[[0, 0, 2, 2, 2]]
    assert per_class_accuracy(preds, [0, 0, 0, 0, 2]) == {0: 0.5, 2: 1.0}
    assert per_class_accuracy(eye, [0, 1, 2]) == {0: 1.0, 1: 1.0, 2: 1.0}


def test_confusion_cases():
    eye = np.eye(3)
    assert np.array_equal(confusion_matrix(eye, [0, 1, 2]), np.eye(3, dtype=int))
    m = confusion_matrix(eye[[1, 1, 0]], [0, 1, 2])
    assert m.tolist() == [[0, 1, 0], [0, 1, 0], [1, 0, 0]]

    preds, labels = random_set(np.random.default_rng(5), n=300)
    m = confusion_matrix(preds, labels)
    assert np.trace(m) / m.sum() == topk_accuracy(preds, labels, 1)
    assert m.sum(axis=1).tolist() == np.bincount(labels, minlength=12).tolist()


def test_shape_errors():
    with pytest.raises(DimensionError):
        topk_accuracy(np.eye(3), [0, 1], 1)
    with pytest.raises(DataError):
        within_one_bin(np.zeros((0, 12)), [])


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

TAX = Taxonomy(("zebra", "topi", "eland"))


def labels_and_heads():
    labels = [
        LabelSet.empty_label(),
        LabelSet(False, TAX.by_id(0), count_to_bin(1), AttributeSet(moving=True)),
        LabelSet(False, TAX.by_id(1), count_to_bin(4)),
        LabelSet(False, TAX.by_id(2), count_to_bin(2), AttributeSet(eating=True)),
    ]
    eye3, eye12 = np.eye(3), np.eye(12)
    heads = {
        "binary": np.array([[0.2, 0.8], [0.9, 0.1], [0.4, 0.6], [0.7, 0.3]]),
        "species": eye3[[0, 0, 1, 1]],
        "count": eye12[[0, 0, 4, 1]],
        "attributes": np.tile(np.array([0.1, 0.1, 0.9, 0.1, 0.1, 0.1]), (4, 1)),
    }
    return labels, heads


def test_evaluate_heads():
    labels, heads = labels_and_heads()
    reports = {r.task: r for r in evaluate_heads(heads, labels, TAX)}
    assert set(reports) == {"empty_vs_animal", "identification", "counting", "attributes"}
    assert reports["empty_vs_animal"].top1 == 0.75
    assert reports["identification"].n_examples == 3
    assert reports["identification"].top1 == pytest.approx(2 / 3)
    assert reports["counting"].top1 == pytest.approx(2 / 3)
    assert reports["counting"].within_one_bin == 1.0
    assert reports["attributes"].n_examples == 2
    assert reports["attributes"].multilabel.accuracy == 0.5


def test_one_stage_report_puts_empty_last():
    labels, _ = labels_and_heads()
    probs = np.eye(4)[[3, 0, 1, 0]]
    (report,) = evaluate_heads({"one_stage": probs}, labels, TAX)
    assert report.class_names[-1] == "empty"
    assert report.top1 == 0.75
    assert report.confusion[3, 3] == 1


def test_write_reports(tmp_path):
    labels, heads = labels_and_heads()
    reports = evaluate_heads(heads, labels, TAX)
    path = write_reports(reports, tmp_path, "image_", {"level": "image"})
    doc = json.loads(path.read_text(encoding="utf-8"))
    assert doc["level"] == "image"
    assert [r["task"] for r in doc["reports"]] == [r.task for r in reports]
    confusion = pd.read_csv(tmp_path / "image_identification_confusion.csv", index_col=0)
    assert confusion.values.sum() == 3
    per_class = pd.read_csv(tmp_path / "image_identification_per_class.csv")
    assert per_class["n_examples"].sum() == 3
