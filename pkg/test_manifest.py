"""Tests for manifest parsing and event-aware dataset transformations."""

import json

import numpy as np
import pytest

from domain import CaptureEvent, ImageRecord, LabelSet, Taxonomy, count_to_bin
from errors import IntegrityError, ParseError, SplitError, TaxonomyError
from manifest import (
    Dataset,
    SplitSpec,
    balance_empty,
    drop_empty,
    filter_single_species,
    load_manifest,
    split_by_event,
    write_manifest,
)
from synthgen import SynthConfig, generate

TAXONOMY = Taxonomy(("wildebeest", "zebra", "topi"))


def write_lines(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def image_row(event_id, image_id, species=None, count=None, **extra):
    row = {"event_id": event_id, "image_id": image_id, "features": [0.1, 0.2],
           "empty": species is None}
    if species is not None:
        row["species"] = species
        row["count"] = 1 if count is None else count
    row.update(extra)
    return row


def make_dataset(n_empty_images, n_animal_images, images_per_event=1):
    """Single-species dataset with the requested image counts."""
    events, i = [], 0
    for empty, n in ((True, n_empty_images), (False, n_animal_images)):
        for _ in range(0, n, images_per_event):
            label = LabelSet.empty_label() if empty else LabelSet(False, TAXONOMY.by_id(i % 3), count_to_bin(1))
            eid = f"e{i:04d}"
            images = tuple(ImageRecord(f"{eid}_{j}", eid, (float(i), 0.0), label)
                           for j in range(min(images_per_event, n)))
            events.append(CaptureEvent(eid, images, label))
            i += 1
    return Dataset(tuple(events), TAXONOMY)


def test_load_three_single_image_events(tmp_path):
    path = write_lines(tmp_path / "m.jsonl", [
        {"taxonomy": list(TAXONOMY.names)},
        image_row("e1", "i1", "zebra", 3),
        image_row("e2", "i2"),
        image_row("e3", "i3", "topi", 60),
    ])
    d = load_manifest(path)
    assert len(d.events) == 3
    assert d.stats.n_images == 3
    assert d.events[0].label.species.name == "zebra"
    assert d.events[1].label.empty
    assert d.events[2].label.count.label == "51+"


def test_labels_propagate_within_event(tmp_path):
    path = write_lines(tmp_path / "m.jsonl", [
        {"taxonomy": list(TAXONOMY.names)},
        image_row("e1", "i1", "zebra", 2),
        image_row("e1", "i2", "zebra", 2),
        image_row("e1", "i3", "zebra", 2),
    ])
    d = load_manifest(path)
    assert len(d.events) == 1
    assert all(img.label == d.events[0].label for img in d.events[0].images)


def test_duplicate_event_id_is_an_integrity_error(tmp_path):
    path = write_lines(tmp_path / "m.jsonl", [
        {"taxonomy": list(TAXONOMY.names)},
        image_row("e1", "i1", "zebra"),
        image_row("e2", "i2"),
        image_row("e1", "i3", "zebra"),
    ])
    with pytest.raises(IntegrityError):
        load_manifest(path)


def test_unknown_species_and_bad_lines(tmp_path):
    header = {"taxonomy": list(TAXONOMY.names)}
    with pytest.raises(TaxonomyError):
        load_manifest(write_lines(tmp_path / "a.jsonl", [header, image_row("e1", "i1", "unicorn")]))

    bad = tmp_path / "b.jsonl"
    bad.write_text(json.dumps(header) + "\n{not json\n", encoding="utf-8")
    with pytest.raises(ParseError) as e:
        load_manifest(bad)
    assert e.value.line_number == 2

    with pytest.raises(ParseError):
        load_manifest(write_lines(tmp_path / "c.jsonl", [header, image_row("e1", "i1", "zebra", count=0)]))


@pytest.mark.parametrize("extra", [{"species": "zebra"}, {"count": 2}, {"attributes": {"moving": True}}])
def test_empty_image_rejects_animal_fields(tmp_path, extra):
    header = {"taxonomy": list(TAXONOMY.names)}
    rows = [header, image_row("e1", "i1", "zebra", 2), {**image_row("e2", "i2"), **extra}]
    with pytest.raises(ParseError) as e:
        load_manifest(write_lines(tmp_path / "m.jsonl", rows))
    assert e.value.line_number == 3


def test_feature_ref(tmp_path):
    np.save(tmp_path / "x.npy", np.array([1.0, 2.0, 3.0]))
    row = {"event_id": "e1", "image_id": "i1", "feature_ref": "x.npy", "empty": True}
    d = load_manifest(write_lines(tmp_path / "m.jsonl", [{"taxonomy": ["a", "b"]}, row]))
    assert d.events[0].images[0].features == (1.0, 2.0, 3.0)


def test_synthetic_manifest_round_trips(tmp_path):
    d = generate(SynthConfig(n_classes=4, n_events=50, images_per_event=(0.3, 0.3, 0.4), seed=3))
    path = write_manifest(d, tmp_path / "m.jsonl")
    assert load_manifest(path) == d


def test_multi_species_events_are_filtered(tmp_path):
    rows = [{"taxonomy": list(TAXONOMY.names)}]
    for i in range(100):
        species = ["zebra", "topi"] if i < 5 else "zebra"
        rows.append(image_row(f"e{i}", f"i{i}", species, 1))
    d = load_manifest(write_lines(tmp_path / "m.jsonl", rows))
    kept, fraction = filter_single_species(d)
    assert len(kept.events) == 95
    assert fraction == pytest.approx(0.05)

    again, fraction = filter_single_species(kept)
    assert again == kept and fraction == 0.0

    empty, fraction = filter_single_species(Dataset((), TAXONOMY))
    assert empty.events == () and fraction == 0.0


def test_split_keeps_events_whole():
    d = make_dataset(0, 30, images_per_event=3)
    assert len(d.events) == 10
    train, test = split_by_event(d, SplitSpec(0.8, seed=1))
    assert (len(train.events), len(test.events)) == (8, 2)
    train_ids = {e.event_id for e in train.events}
    assert train_ids.isdisjoint(e.event_id for e in test.events)
    all_images = {i.image_id for i in d.images()}
    assert {i.image_id for i in train.images()} | {i.image_id for i in test.images()} == all_images

    again = split_by_event(d, SplitSpec(0.8, seed=1))
    assert again == (train, test)


def test_split_at_reduced_scale():
    d = make_dataset(0, 301)
    train, test = split_by_event(d, SplitSpec(284 / 301, seed=0))
    assert (len(train.events), len(test.events)) == (284, 17)


def test_split_needs_two_events():
    with pytest.raises(SplitError):
        split_by_event(make_dataset(0, 1), SplitSpec())


def test_split_respects_hints():
    d = make_dataset(0, 10)
    hinted = d.with_events(
        CaptureEvent(e.event_id, e.images, e.label, split_hint="test" if i < 3 else None)
        for i, e in enumerate(d.events)
    )
    _, test = split_by_event(hinted, SplitSpec(0.5, seed=0, respect_hints=True))
    test_ids = {e.event_id for e in test.events}
    assert {"e0000", "e0001", "e0002"} <= test_ids


def test_balance_empty():
    balanced = balance_empty(make_dataset(75, 25), seed=0)
    assert balanced.stats.empty_images == 25
    assert balanced.stats.n_images - balanced.stats.empty_images == 25

    already = balance_empty(make_dataset(25, 25), seed=0)
    assert already.stats.n_images == 50


def test_balance_empty_with_too_few_empties(caplog):
    d = balance_empty(make_dataset(10, 25), seed=0)
    assert d.stats.empty_images == 10
    assert d.stats.n_images == 35
    assert "Only 10 empty images" in caplog.text


def test_balance_empty_to_largest_class():
    d = make_dataset(60, 30)
    largest = max(d.stats.images_per_class.values())
    balanced = balance_empty(d, seed=0, match="largest_class")
    assert balanced.stats.empty_images == largest == 10


def test_drop_empty():
    d = drop_empty(make_dataset(5, 6))
    assert d.stats.empty_images == 0
    assert d.stats.n_images == 6
