"""Tests for the label vocabulary, records and prediction checks."""

import numpy as np
import pytest

from domain import (
    COUNT_BIN_LABELS,
    AttributeSet,
    CaptureEvent,
    CountBin,
    ImageRecord,
    LabelSet,
    MultiTaskPrediction,
    Taxonomy,
    count_to_bin,
    propagate_event_labels,
    validate_prediction,
)
from errors import InvalidCountError, TaxonomyError


def test_count_bins():
    assert count_to_bin(1).index == 0
    assert count_to_bin(10).index == 9
    assert count_to_bin(30) == CountBin(10, "11-50")
    assert count_to_bin(50).index == 10
    assert count_to_bin(51).label == "51+"
    assert count_to_bin(10_000).index == 11


@pytest.mark.parametrize("bad", [0, -3, 2.5, True])
def test_count_to_bin_rejects(bad):
    with pytest.raises(InvalidCountError):
        count_to_bin(bad)


def test_count_to_bin_monotone():
    idx = [count_to_bin(n).index for n in range(1, 200)]
    assert idx == sorted(idx)
    assert set(idx) == set(range(len(COUNT_BIN_LABELS)))


def test_representative_count_lands_in_its_bin():
    for i in range(len(COUNT_BIN_LABELS)):
        b = CountBin.from_index(i)
        assert count_to_bin(b.representative_count()) == b


def test_taxonomy_lookup():
    tax = Taxonomy(("wildebeest", "zebra", "topi"))
    assert tax.label("zebra").id == 1
    assert tax.by_id(2).name == "topi"
    with pytest.raises(TaxonomyError):
        tax.label("unicorn")
    with pytest.raises(TaxonomyError):
        tax.by_id(3)
    with pytest.raises(TaxonomyError):
        Taxonomy(("a", "a", "b"))


def test_default_taxonomy_has_48_species():
    assert len(Taxonomy()) == 48


def test_label_set_invariants():
    tax = Taxonomy(("a", "b"))
    with pytest.raises(ValueError):
        LabelSet(empty=True, species=tax.by_id(0))
    with pytest.raises(ValueError):
        LabelSet(empty=False, species=tax.by_id(0))
    ok = LabelSet(False, tax.by_id(1), count_to_bin(2), AttributeSet(moving=True))
    assert ok.attributes.as_tuple() == (False, False, True, False, False, False)


def _event(label, n_images=3):
    images = tuple(ImageRecord(f"e1_img{j}", "e1", (0.0, 1.0)) for j in range(n_images))
    return CaptureEvent("e1", images, label)


def test_propagate_event_labels():
    tax = Taxonomy(("hartebeest", "zebra"))
    label = LabelSet(False, tax.label("hartebeest"), count_to_bin(1))
    event = propagate_event_labels(_event(label))
    assert [img.label for img in event.images] == [label] * 3
    assert propagate_event_labels(event) == event

    single = propagate_event_labels(_event(label, n_images=1))
    assert single.images[0].label == label


def test_event_rejects_foreign_images():
    img = ImageRecord("x", "other", (0.0,))
    with pytest.raises(ValueError):
        CaptureEvent("e1", (img,), LabelSet.empty_label())


def test_validate_prediction():
    uniform = MultiTaskPrediction(np.full(48, 1 / 48), np.full(12, 1 / 12), np.full(6, 0.5))
    assert validate_prediction(uniform).ok

    short = MultiTaskPrediction(np.full(48, 0.9 / 48), np.full(12, 1 / 12), np.full(6, 0.5))
    assert "species normalization" in validate_prediction(short).violations

    attrs = np.full(6, 0.5)
    attrs[2] = 1.3
    bad = MultiTaskPrediction(np.full(48, 1 / 48), np.full(12, 1 / 12), attrs)
    assert "attribute range" in validate_prediction(bad).violations


def test_prediction_vectors_are_read_only():
    p = MultiTaskPrediction(np.full(3, 1 / 3), np.full(12, 1 / 12), np.zeros(6))
    with pytest.raises(ValueError):
        p.species_probs[0] = 1.0
