"""
Core vocabulary shared by every pipeline module: species taxonomy, count bins,
behavior attributes, label sets, image/event records and prediction types.

All values are immutable after construction. Probability vectors are stored as
read-only float64 numpy arrays.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from errors import InvalidCountError, TaxonomyError

log = logging.getLogger(__name__)


# ============================================================================
# CONSTANTS
# ============================================================================

# Snapshot Serengeti species list (48 names). Synthetic datasets usually carry
# their own, smaller taxonomy in the manifest header.
DEFAULT_SPECIES = (
    "aardvark", "aardwolf", "baboon", "batEaredFox", "buffalo", "bushbuck",
    "caracal", "cheetah", "civet", "dikDik", "eland", "elephant",
    "gazelleGrants", "gazelleThomsons", "genet", "giraffe", "guineaFowl", "hare",
    "hartebeest", "hippopotamus", "honeyBadger", "human", "hyenaSpotted", "hyenaStriped",
    "impala", "jackal", "koriBustard", "leopard", "lionFemale", "lionMale",
    "mongoose", "ostrich", "otherBird", "porcupine", "reedbuck", "reptiles",
    "rhinoceros", "rodents", "secretaryBird", "serval", "topi", "vervetMonkey",
    "warthog", "waterbuck", "wildcat", "wildebeest", "zebra", "zorilla",
)

COUNT_BIN_LABELS = ("1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11-50", "51+")
N_COUNT_BINS = len(COUNT_BIN_LABELS)

ATTRIBUTE_NAMES = ("standing", "resting", "moving", "eating", "interacting", "young_present")
N_ATTRIBUTES = len(ATTRIBUTE_NAMES)

NORMALIZATION_TOLERANCE = 1e-9


# ============================================================================
# LABELS
# ============================================================================

@dataclass(frozen=True)
class SpeciesLabel:
    id: int
    name: str


@dataclass(frozen=True)
class Taxonomy:
    """Ordered species list; position is the species id."""
    names: tuple[str, ...] = DEFAULT_SPECIES

    def __post_init__(self):
        if len(self.names) < 2:
            raise TaxonomyError(f"taxonomy needs at least 2 species, got {len(self.names)}")
        if len(set(self.names)) != len(self.names):
            dupes = sorted({n for n in self.names if self.names.count(n) > 1})
            raise TaxonomyError(f"duplicate species names: {dupes}")

    def __len__(self) -> int:
        return len(self.names)

    def label(self, name: str) -> SpeciesLabel:
        try:
            return SpeciesLabel(self.names.index(name), name)
        except ValueError:
            raise TaxonomyError(f"unknown species '{name}'") from None

    def by_id(self, species_id: int) -> SpeciesLabel:
        if not 0 <= species_id < len(self.names):
            raise TaxonomyError(f"species id {species_id} outside [0, {len(self.names) - 1}]")
        return SpeciesLabel(species_id, self.names[species_id])


@dataclass(frozen=True)
class CountBin:
    index: int
    label: str

    @classmethod
    def from_index(cls, index: int) -> CountBin:
        if not 0 <= index < N_COUNT_BINS:
            raise InvalidCountError(f"count bin index {index} outside [0, {N_COUNT_BINS - 1}]")
        return cls(index, COUNT_BIN_LABELS[index])

    def representative_count(self) -> int:
        """Smallest animal count that falls in this bin."""
        if self.index < 10:
            return self.index + 1
        return 11 if self.index == 10 else 51


def count_to_bin(n: int) -> CountBin:
    """Map an animal count (>= 1) to one of the 12 ordinal bins."""
    if isinstance(n, bool) or int(n) != n:
        raise InvalidCountError(f"count must be an integer, got {n!r}")
    n = int(n)
    if n <= 0:
        raise InvalidCountError(f"count must be >= 1 (empty images carry no count), got {n}")
    if n <= 10:
        return CountBin.from_index(n - 1)
    if n <= 50:
        return CountBin.from_index(10)
    return CountBin.from_index(11)


@dataclass(frozen=True)
class AttributeSet:
    standing: bool = False
    resting: bool = False
    moving: bool = False
    eating: bool = False
    interacting: bool = False
    young_present: bool = False

    def as_tuple(self) -> tuple[bool, ...]:
        return tuple(getattr(self, name) for name in ATTRIBUTE_NAMES)

    def as_dict(self) -> dict[str, bool]:
        return {name: getattr(self, name) for name in ATTRIBUTE_NAMES}

    @classmethod
    def from_flags(cls, flags: Iterable[bool]) -> AttributeSet:
        flags = [bool(f) for f in flags]
        if len(flags) != N_ATTRIBUTES:
            raise ValueError(f"expected {N_ATTRIBUTES} attribute flags, got {len(flags)}")
        return cls(*flags)


@dataclass(frozen=True)
class LabelSet:
    """Ground truth for one image or capture event."""
    empty: bool
    species: SpeciesLabel | None = None
    count: CountBin | None = None
    attributes: AttributeSet | None = None

    def __post_init__(self):
        if self.empty:
            if self.species is not None or self.count is not None or self.attributes is not None:
                raise ValueError("empty label cannot carry species, count or attributes")
        elif self.species is None or self.count is None:
            raise ValueError("non-empty label requires species and count")

    @classmethod
    def empty_label(cls) -> LabelSet:
        return cls(empty=True)


# ============================================================================
# RECORDS
# ============================================================================

@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    event_id: str
    features: tuple[float, ...]
    label: LabelSet | None = None

    def feature_array(self) -> np.ndarray:
        return np.asarray(self.features, dtype=np.float64)


@dataclass(frozen=True)
class CaptureEvent:
    event_id: str
    images: tuple[ImageRecord, ...]
    label: LabelSet
    # Species beyond the first, for multi-species events kept until filtering.
    other_species: tuple[SpeciesLabel, ...] = ()
    split_hint: str | None = None

    def __post_init__(self):
        if not self.images:
            raise ValueError(f"event {self.event_id} has no images")
        for image in self.images:
            if image.event_id != self.event_id:
                raise ValueError(f"image {image.image_id} carries event_id {image.event_id}, "
                                 f"expected {self.event_id}")

    @property
    def is_multi_species(self) -> bool:
        return bool(self.other_species)


def propagate_event_labels(event: CaptureEvent) -> CaptureEvent:
    """Give every image in the event the event's label."""
    if all(image.label == event.label for image in event.images):
        return event
    images = tuple(replace(image, label=event.label) for image in event.images)
    return replace(event, images=images)


# ============================================================================
# PREDICTIONS
# ============================================================================

def _frozen_vector(values: Sequence[float] | np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    arr.flags.writeable = False
    return arr


def argmax(probs: Sequence[float] | np.ndarray) -> int:
    """Index of the largest entry; ties resolve to the lowest index."""
    return int(np.argmax(np.asarray(probs)))


@dataclass(frozen=True, eq=False)
class BinaryPrediction:
    p_animal: float
    p_empty: float

    def as_vector(self) -> np.ndarray:
        return _frozen_vector([self.p_animal, self.p_empty])


@dataclass(frozen=True, eq=False)
class MultiTaskPrediction:
    species_probs: np.ndarray
    count_probs: np.ndarray
    attribute_probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "species_probs", _frozen_vector(self.species_probs))
        object.__setattr__(self, "count_probs", _frozen_vector(self.count_probs))
        object.__setattr__(self, "attribute_probs", _frozen_vector(self.attribute_probs))

    @property
    def species(self) -> int:
        return argmax(self.species_probs)

    @property
    def count_bin(self) -> int:
        return argmax(self.count_probs)

    def attributes(self) -> AttributeSet:
        return AttributeSet.from_flags(self.attribute_probs > 0.5)


@dataclass(frozen=True, eq=False)
class OneStagePrediction:
    """Distribution over k species plus the empty class (last index)."""
    class_probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "class_probs", _frozen_vector(self.class_probs))

    @property
    def empty_index(self) -> int:
        return len(self.class_probs) - 1

    @property
    def p_empty(self) -> float:
        return float(self.class_probs[-1])


Prediction = BinaryPrediction | MultiTaskPrediction | OneStagePrediction


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations


def _check_distribution(name: str, probs: np.ndarray, violations: list[str]) -> None:
    if probs.size == 0 or not np.all(np.isfinite(probs)):
        violations.append(f"{name} non-finite")
        return
    if np.any(probs < 0.0) or np.any(probs > 1.0):
        violations.append(f"{name} range")
    if abs(float(probs.sum()) - 1.0) > NORMALIZATION_TOLERANCE:
        violations.append(f"{name} normalization")


def validate_prediction(
    p: MultiTaskPrediction,
    n_count_bins: int = N_COUNT_BINS,
    n_attributes: int = N_ATTRIBUTES,
) -> ValidationReport:
    """Check every MultiTaskPrediction invariant; never raises."""
    violations: list[str] = []
    _check_distribution("species", p.species_probs, violations)
    _check_distribution("count", p.count_probs, violations)
    if p.count_probs.size != n_count_bins:
        violations.append("count cardinality")

    attrs = p.attribute_probs
    if attrs.size != n_attributes:
        violations.append("attribute cardinality")
    if not np.all(np.isfinite(attrs)):
        violations.append("attribute non-finite")
    elif np.any(attrs < 0.0) or np.any(attrs > 1.0):
        violations.append("attribute range")

    if violations:
        log.debug(f"prediction failed validation: {violations}")
    return ValidationReport(tuple(violations))
