"""
Dataset ingestion and event-aware dataset transformations.

Manifest format (JSONL, UTF-8):
  line 1 (header):  {"taxonomy": ["wildebeest", "zebra", ...], ...extra metadata}
  other lines:      one image each
      {"event_id": "...", "image_id": "...", "features": [..] | "feature_ref": "x.npy",
       "empty": false, "species": "zebra", "count": 3,
       "attributes": {"standing": true, ...}, "split": "train"}

Images of one capture event are contiguous. Multi-species events list their
species as an array (or repeat the "species" key) and are dropped by
filter_single_species. Unknown fields are ignored.

Usage:
    from manifest import load_manifest, split_by_event, SplitSpec
    dataset = load_manifest("out/manifest.jsonl")
    train, test = split_by_event(dataset, SplitSpec(train_fraction=0.8, seed=7))
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Literal

import numpy as np

from artifacts import atomic_write_text
from domain import (
    ATTRIBUTE_NAMES,
    AttributeSet,
    CaptureEvent,
    ImageRecord,
    LabelSet,
    Taxonomy,
    count_to_bin,
    propagate_event_labels,
)
from errors import (
    ConfigError,
    DataError,
    IntegrityError,
    InvalidCountError,
    ParseError,
    SplitError,
    TaxonomyError,
)

log = logging.getLogger(__name__)

SPLIT_HINTS = ("train", "test")


# ============================================================================
# DATASET
# ============================================================================

@dataclass(frozen=True)
class DatasetStats:
    n_events: int
    n_images: int
    empty_events: int
    empty_images: int
    multi_species_events: int
    events_per_class: dict[int, int]
    images_per_class: dict[int, int]

    @property
    def empty_event_fraction(self) -> float:
        return self.empty_events / self.n_events if self.n_events else 0.0

    @property
    def empty_image_fraction(self) -> float:
        return self.empty_images / self.n_images if self.n_images else 0.0


@dataclass(frozen=True)
class Dataset:
    events: tuple[CaptureEvent, ...]
    taxonomy: Taxonomy
    # Header extras: generator oracle data, feature_shape, ...
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        seen: set[str] = set()
        for event in self.events:
            if event.event_id in seen:
                raise IntegrityError(f"duplicate event_id '{event.event_id}'")
            seen.add(event.event_id)

    @cached_property
    def stats(self) -> DatasetStats:
        events_per_class: Counter[int] = Counter()
        images_per_class: Counter[int] = Counter()
        empty_events = empty_images = multi = 0
        for event in self.events:
            if event.label.empty:
                empty_events += 1
                empty_images += len(event.images)
                continue
            if event.is_multi_species:
                multi += 1
            events_per_class[event.label.species.id] += 1
            images_per_class[event.label.species.id] += len(event.images)
        return DatasetStats(
            n_events=len(self.events),
            n_images=sum(len(e.images) for e in self.events),
            empty_events=empty_events,
            empty_images=empty_images,
            multi_species_events=multi,
            events_per_class=dict(sorted(events_per_class.items())),
            images_per_class=dict(sorted(images_per_class.items())),
        )

    def with_events(self, events: Iterable[CaptureEvent]) -> Dataset:
        return Dataset(tuple(events), self.taxonomy, self.metadata)

    def images(self) -> list[ImageRecord]:
        return [image for event in self.events for image in event.images]

    def feature_matrix(self) -> np.ndarray:
        images = self.images()
        if not images:
            return np.zeros((0, self.feature_dim), dtype=np.float64)
        return np.array([image.features for image in images], dtype=np.float64)

    def image_labels(self) -> list[LabelSet]:
        return [image.label for image in self.images()]

    @property
    def feature_dim(self) -> int:
        for event in self.events:
            return len(event.images[0].features)
        shape = self.metadata.get("feature_shape")
        return int(np.prod(shape)) if shape else 0

    @property
    def feature_shape(self) -> tuple[int, ...] | None:
        shape = self.metadata.get("feature_shape")
        return tuple(int(s) for s in shape) if shape else None


# ============================================================================
# LOADING
# ============================================================================

def _object_pairs(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    """JSON object hook that turns repeated "species" keys into a list."""
    obj: dict[str, Any] = {}
    for key, value in pairs:
        if key in obj:
            if key != "species":
                raise ValueError(f"repeated key '{key}'")
            prev = obj[key] if isinstance(obj[key], list) else [obj[key]]
            obj[key] = prev + (value if isinstance(value, list) else [value])
        else:
            obj[key] = value
    return obj


def _parse_features(obj: dict, line_no: int, base_dir: Path) -> tuple[float, ...]:
    if "features" in obj:
        raw = obj["features"]
        if not isinstance(raw, list) or not raw:
            raise ParseError(line_no, "features must be a non-empty array of numbers")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
            raise ParseError(line_no, "features must contain only numbers")
        values = np.asarray(raw, dtype=np.float64)
    elif "feature_ref" in obj:
        ref = base_dir / str(obj["feature_ref"])
        try:
            values = np.load(ref).astype(np.float64).reshape(-1)
        except (OSError, ValueError) as e:
            raise ParseError(line_no, f"cannot read feature_ref {ref}: {e}") from e
    else:
        raise ParseError(line_no, "missing features or feature_ref")
    if not np.all(np.isfinite(values)):
        raise ParseError(line_no, "features contain non-finite values")
    return tuple(float(v) for v in values)


def _parse_label(obj: dict, line_no: int, taxonomy: Taxonomy) -> tuple[LabelSet, tuple]:
    empty = obj.get("empty")
    if not isinstance(empty, bool):
        raise ParseError(line_no, "field 'empty' must be a boolean")
    if empty:
        if any(obj.get(k) is not None for k in ("species", "count", "attributes")):
            raise ParseError(line_no, "empty image cannot carry species, count or attributes")
        return LabelSet.empty_label(), ()

    names = obj.get("species")
    if isinstance(names, str):
        names = [names]
    if not isinstance(names, list) or not names or not all(isinstance(n, str) for n in names):
        raise ParseError(line_no, "non-empty image needs a species name")
    try:
        species = [taxonomy.label(n) for n in names]
    except TaxonomyError as e:
        raise TaxonomyError(f"line {line_no}: {e}") from None

    count = obj.get("count")
    if not isinstance(count, int) or isinstance(count, bool):
        raise ParseError(line_no, "non-empty image needs an integer count")
    try:
        count_bin = count_to_bin(count)
    except InvalidCountError as e:
        raise ParseError(line_no, str(e)) from None

    attributes = None
    raw_attrs = obj.get("attributes")
    if raw_attrs is not None:
        if not isinstance(raw_attrs, dict):
            raise ParseError(line_no, "attributes must be an object of booleans")
        attributes = AttributeSet.from_flags(bool(raw_attrs.get(name, False)) for name in ATTRIBUTE_NAMES)

    label = LabelSet(empty=False, species=species[0], count=count_bin, attributes=attributes)
    others = tuple(s for s in species[1:] if s != species[0])
    return label, others


def load_manifest(path: str | Path) -> Dataset:
    """Parse a JSONL manifest into a Dataset with labels propagated to images."""
    path = Path(path)
    base_dir = path.parent
    taxonomy = Taxonomy()
    metadata: dict[str, Any] = {}

    events: list[CaptureEvent] = []
    seen_events: set[str] = set()
    seen_images: set[str] = set()
    current: dict[str, Any] | None = None

    def flush():
        if current is not None:
            event = CaptureEvent(
                event_id=current["event_id"],
                images=tuple(current["images"]),
                label=current["label"],
                other_species=current["others"],
                split_hint=current["split"],
            )
            events.append(propagate_event_labels(event))

    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line, object_pairs_hook=_object_pairs)
            except ValueError as e:
                raise ParseError(line_no, f"invalid JSON: {e}") from None
            if not isinstance(obj, dict):
                raise ParseError(line_no, "expected a JSON object")

            if "taxonomy" in obj:
                if events or current is not None:
                    raise ParseError(line_no, "taxonomy header must be the first line")
                names = obj["taxonomy"]
                if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
                    raise ParseError(line_no, "taxonomy must be an array of names")
                taxonomy = Taxonomy(tuple(names))
                metadata = {k: v for k, v in obj.items() if k != "taxonomy"}
                continue

            event_id, image_id = obj.get("event_id"), obj.get("image_id")
            if not isinstance(event_id, str) or not isinstance(image_id, str):
                raise ParseError(line_no, "event_id and image_id must be strings")
            if image_id in seen_images:
                raise IntegrityError(f"line {line_no}: duplicate image_id '{image_id}'")
            seen_images.add(image_id)

            features = _parse_features(obj, line_no, base_dir)
            label, others = _parse_label(obj, line_no, taxonomy)
            split = obj.get("split")
            if split is not None and split not in SPLIT_HINTS:
                raise ParseError(line_no, f"split hint must be one of {SPLIT_HINTS}")

            if current is None or current["event_id"] != event_id:
                if event_id in seen_events:
                    raise IntegrityError(f"line {line_no}: duplicate event_id '{event_id}'")
                flush()
                seen_events.add(event_id)
                current = {"event_id": event_id, "images": [], "label": label,
                           "others": others, "split": split}
            elif label != current["label"] or others != current["others"]:
                raise IntegrityError(f"line {line_no}: image '{image_id}' label differs from "
                                     f"event '{event_id}'")
            current["images"].append(ImageRecord(image_id, event_id, features, label))
    flush()

    dataset = Dataset(tuple(events), taxonomy, metadata)
    stats = dataset.stats
    log.info(f"Loaded {path.name}: {stats.n_events:,} events, {stats.n_images:,} images, "
             f"{len(taxonomy)} species, {stats.empty_event_fraction:.1%} empty events")
    return dataset


def manifest_lines(dataset: Dataset) -> list[str]:
    header = {"taxonomy": list(dataset.taxonomy.names), **dataset.metadata}
    lines = [json.dumps(header)]
    for event in dataset.events:
        label = event.label
        for image in event.images:
            row: dict[str, Any] = {
                "event_id": event.event_id,
                "image_id": image.image_id,
                "features": list(image.features),
                "empty": label.empty,
            }
            if not label.empty:
                names = [label.species.name] + [s.name for s in event.other_species]
                row["species"] = names[0] if len(names) == 1 else names
                row["count"] = label.count.representative_count()
                if label.attributes is not None:
                    row["attributes"] = label.attributes.as_dict()
            if event.split_hint is not None:
                row["split"] = event.split_hint
            lines.append(json.dumps(row))
    return lines


def write_manifest(dataset: Dataset, path: str | Path) -> Path:
    return atomic_write_text(path, "\n".join(manifest_lines(dataset)) + "\n")


# ============================================================================
# TRANSFORMATIONS
# ============================================================================

def filter_single_species(d: Dataset) -> tuple[Dataset, float]:
    """Drop multi-species events. Returns the dataset and the removed fraction."""
    kept = [e for e in d.events if not e.is_multi_species]
    removed = len(d.events) - len(kept)
    fraction = removed / len(d.events) if d.events else 0.0
    if removed:
        log.info(f"Removed {removed:,} multi-species events ({fraction:.1%})")
    return d.with_events(kept), fraction


def drop_empty(d: Dataset) -> Dataset:
    return d.with_events(e for e in d.events if not e.label.empty)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    respect_hints: bool = False

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction", f"must be in (0, 1), got {self.train_fraction}")


def split_by_event(d: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Put whole capture events on one side of a seeded random split."""
    n = len(d.events)
    if n < 2:
        raise SplitError(f"need at least 2 events to split, got {n}")

    side = np.full(n, -1)
    if spec.respect_hints:
        for i, event in enumerate(d.events):
            if event.split_hint is not None:
                side[i] = 0 if event.split_hint == "train" else 1
    free = np.flatnonzero(side < 0)

    rng = np.random.default_rng(spec.seed)
    order = free[rng.permutation(len(free))]
    n_train = int(np.floor(spec.train_fraction * len(free) + 0.5))
    if len(free) >= 2:
        n_train = min(max(n_train, 1), len(free) - 1)
    side[order[:n_train]] = 0
    side[order[n_train:]] = 1

    train = d.with_events(e for i, e in enumerate(d.events) if side[i] == 0)
    test = d.with_events(e for i, e in enumerate(d.events) if side[i] == 1)
    if not train.events or not test.events:
        raise SplitError("split left one side without events")
    log.info(f"Split {n:,} events: {len(train.events):,} train / {len(test.events):,} test")
    return train, test


def balance_empty(
    d: Dataset,
    seed: int,
    match: Literal["non_empty", "largest_class"] = "non_empty",
) -> Dataset:
    """
    Keep every non-empty image and a uniform sample of empty images.

    match="non_empty" samples as many empty images as there are non-empty ones
    (empty vs. animal training set); match="largest_class" samples as many as
    the most frequent species has images (one-stage training set). Events
    left without images are dropped.
    """
    positions = [(ei, ii) for ei, e in enumerate(d.events) for ii in range(len(e.images))]
    empty_pos = [p for p in positions if d.events[p[0]].label.empty]
    n_non_empty = len(positions) - len(empty_pos)
    if not empty_pos or not n_non_empty:
        raise DataError("balance_empty needs both empty and non-empty images")

    if match == "largest_class":
        target = max(d.stats.images_per_class.values())
    else:
        target = n_non_empty

    if len(empty_pos) < target:
        log.warning(f"Only {len(empty_pos):,} empty images for a target of {target:,}; "
                    f"keeping all of both")
        keep_empty = set(empty_pos)
    else:
        rng = np.random.default_rng(seed)
        chosen = np.sort(rng.choice(len(empty_pos), size=target, replace=False))
        keep_empty = {empty_pos[i] for i in chosen}

    events = []
    for ei, event in enumerate(d.events):
        if not event.label.empty:
            events.append(event)
            continue
        images = tuple(img for ii, img in enumerate(event.images) if (ei, ii) in keep_empty)
        if images:
            events.append(replace(event, images=images))
    return d.with_events(events)
