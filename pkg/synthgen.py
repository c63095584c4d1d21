"""
Synthetic camera-trap dataset generator.

Produces desk-scale datasets with the statistical pathologies of a real
camera-trap corpus: mostly-empty capture events, power-law species
frequencies, and event-level label noise (images inside an animal event that
actually show nothing). Each species has a Gaussian feature cluster, so the
nearest-center rule (`oracle_label`) is the Bayes-optimal answer and serves
as an independent oracle in tests.

Usage:
    from synthgen import SynthConfig, generate
    dataset = generate(SynthConfig(n_classes=8, n_events=2000, seed=7))
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from domain import (
    DEFAULT_SPECIES,
    N_ATTRIBUTES,
    N_COUNT_BINS,
    AttributeSet,
    CaptureEvent,
    CountBin,
    ImageRecord,
    LabelSet,
    Taxonomy,
)
from errors import ConfigError, DimensionError
from manifest import Dataset, write_manifest

log = logging.getLogger(__name__)


# ============================================================================
# CONSTANTS
# ============================================================================

# Global attribute marginals. Resting, interacting and young-present are the
# published rates; the other three are plausible placeholders.
DEFAULT_ATTRIBUTE_RATES = (0.45, 0.085, 0.35, 0.20, 0.005, 0.018)

# Per-class geometric parameter for the count-bin distribution is drawn
# uniformly from this range.
COUNT_GEOMETRIC_RANGE = (0.35, 0.75)

FEATURE_DECIMALS = 6


# ============================================================================
# CONFIG
# ============================================================================

@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 8
    feature_dim: int = 16
    imbalance_exponent: float = 1.0
    empty_fraction: float = 0.75
    # Probability of an event having 1, 2 or 3 images.
    images_per_event: tuple[float, float, float] = (0.0, 0.0, 1.0)
    noise_rate: float = 0.05
    n_events: int = 2000
    seed: int = 0
    class_separation: float = 6.0
    # Explicit class frequency vector; overrides the power law when set.
    class_frequencies: tuple[float, ...] | None = None
    attribute_rates: tuple[float, ...] = DEFAULT_ATTRIBUTE_RATES
    feature_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes", f"must be >= 2, got {self.n_classes}")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim", f"must be >= 2, got {self.feature_dim}")
        if self.imbalance_exponent < 0:
            raise ConfigError("imbalance_exponent", f"must be >= 0, got {self.imbalance_exponent}")
        if not 0.0 <= self.empty_fraction < 1.0:
            raise ConfigError("empty_fraction", f"must be in [0, 1), got {self.empty_fraction}")
        if (len(self.images_per_event) != 3 or min(self.images_per_event) < 0
                or abs(sum(self.images_per_event) - 1.0) > 1e-9):
            raise ConfigError("images_per_event", "must be 3 probabilities summing to 1")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError("noise_rate", f"must be in [0, 1], got {self.noise_rate}")
        if self.n_events < 0:
            raise ConfigError("n_events", f"must be >= 0, got {self.n_events}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be a 64-bit unsigned integer")
        if self.class_separation <= 0:
            raise ConfigError("class_separation", f"must be > 0, got {self.class_separation}")
        if self.class_frequencies is not None:
            if len(self.class_frequencies) != self.n_classes or min(self.class_frequencies) <= 0:
                raise ConfigError("class_frequencies",
                                  f"need {self.n_classes} positive entries")
        if len(self.attribute_rates) != N_ATTRIBUTES or not all(0 <= r <= 1 for r in self.attribute_rates):
            raise ConfigError("attribute_rates", f"need {N_ATTRIBUTES} rates in [0, 1]")
        if self.feature_shape is not None and int(np.prod(self.feature_shape)) != self.feature_dim:
            raise ConfigError("feature_shape", f"product must equal feature_dim {self.feature_dim}")

    def to_json(self) -> dict[str, Any]:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> SynthConfig:
        kwargs = {}
        for f in fields(cls):
            if f.name not in data:
                continue
            value = data[f.name]
            kwargs[f.name] = tuple(value) if isinstance(value, list) else value
        return cls(**kwargs)


# ============================================================================
# GENERATIVE MODEL
# ============================================================================

def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    centers_seq, sample_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(centers_seq), np.random.default_rng(sample_seq)


def class_centers(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Species centers (k, d) and the empty-image center (d,).

    Centers sit `class_separation` apart. With feature_dim > n_classes they are
    scaled unit vectors, so every pair is exactly equidistant; otherwise they
    are random directions rescaled so the closest pair is that far apart.
    """
    k, d, s = cfg.n_classes, cfg.feature_dim, cfg.class_separation
    if d >= k + 1:
        points = np.eye(k + 1, d) * (s / np.sqrt(2.0))
    else:
        rng, _ = _streams(cfg.seed)
        points = rng.standard_normal((k + 1, d))
        diffs = points[:, None, :] - points[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(-1))
        closest = dist[np.triu_indices(k + 1, 1)].min()
        points = points * (s / closest)
    return points[:k], points[k]


def class_frequencies(cfg: SynthConfig) -> np.ndarray:
    if cfg.class_frequencies is not None:
        freq = np.asarray(cfg.class_frequencies, dtype=np.float64)
    else:
        freq = (np.arange(cfg.n_classes) + 1.0) ** (-cfg.imbalance_exponent)
    return freq / freq.sum()


def count_distributions(cfg: SynthConfig) -> np.ndarray:
    """Per-class truncated geometric distributions over the 12 count bins."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    p = rng.uniform(*COUNT_GEOMETRIC_RANGE, size=cfg.n_classes)
    bins = np.arange(N_COUNT_BINS)
    dist = p[:, None] * (1.0 - p[:, None]) ** bins[None, :]
    return dist / dist.sum(axis=1, keepdims=True)


def taxonomy_for(n_classes: int) -> Taxonomy:
    if n_classes == len(DEFAULT_SPECIES):
        return Taxonomy(DEFAULT_SPECIES)
    return Taxonomy(tuple(f"species_{i:02d}" for i in range(n_classes)))


def generate(cfg: SynthConfig) -> Dataset:
    """Draw a dataset; a pure function of the config."""
    centers, empty_center = class_centers(cfg)
    freq = class_frequencies(cfg)
    counts = count_distributions(cfg)
    rates = np.asarray(cfg.attribute_rates)
    taxonomy = taxonomy_for(cfg.n_classes)
    _, rng = _streams(cfg.seed)

    def draw_features(center: np.ndarray) -> tuple[float, ...]:
        x = center + rng.standard_normal(cfg.feature_dim)
        return tuple(float(v) for v in np.round(x, FEATURE_DECIMALS))

    events = []
    for i in range(cfg.n_events):
        event_id = f"evt{i:06d}"
        is_empty = rng.random() < cfg.empty_fraction
        n_images = 1 + int(rng.choice(3, p=cfg.images_per_event))

        if is_empty:
            label = LabelSet.empty_label()
            feats = [draw_features(empty_center) for _ in range(n_images)]
        else:
            species = int(rng.choice(cfg.n_classes, p=freq))
            label = LabelSet(
                empty=False,
                species=taxonomy.by_id(species),
                count=CountBin.from_index(int(rng.choice(N_COUNT_BINS, p=counts[species]))),
                attributes=AttributeSet.from_flags(rng.random(N_ATTRIBUTES) < rates),
            )
            # Label propagation noise: some images of an animal event are empty frames.
            feats = [draw_features(empty_center if rng.random() < cfg.noise_rate else centers[species])
                     for _ in range(n_images)]

        images = tuple(ImageRecord(f"{event_id}_img{j}", event_id, f, label) for j, f in enumerate(feats))
        events.append(CaptureEvent(event_id, images, label))

    metadata: dict[str, Any] = {
        "generator": {
            "config": cfg.to_json(),
            "class_frequencies": freq.tolist(),
            "count_distributions": counts.tolist(),
            "centers": centers.tolist(),
            "empty_center": empty_center.tolist(),
        }
    }
    if cfg.feature_shape is not None:
        metadata["feature_shape"] = list(cfg.feature_shape)
    dataset = Dataset(tuple(events), taxonomy, json.loads(json.dumps(metadata)))
    log.info(f"Generated {cfg.n_events:,} events ({dataset.stats.n_images:,} images), "
             f"{cfg.n_classes} species, seed {cfg.seed}")
    return dataset


def write(cfg: SynthConfig, path: str | Path) -> Dataset:
    dataset = generate(cfg)
    write_manifest(dataset, path)
    return dataset


# ============================================================================
# ORACLE
# ============================================================================

def _nearest(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    best = d2.min(axis=1, keepdims=True)
    # Near-ties (e.g. exact midpoints) resolve to the lowest class id.
    tied = d2 <= best + 1e-9 * np.maximum(1.0, best)
    return np.argmax(tied, axis=1)


def oracle_label(features: Sequence[float] | np.ndarray, cfg: SynthConfig) -> int:
    """Nearest species center for one feature vector."""
    x = np.asarray(features, dtype=np.float64).reshape(-1)
    if x.size != cfg.feature_dim:
        raise DimensionError(f"feature dimension {x.size} != configured {cfg.feature_dim}")
    centers, _ = class_centers(cfg)
    return int(_nearest(x[None, :], centers)[0])


def oracle_labels(features: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Vectorized oracle_label over a (n, d) matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.feature_dim:
        raise DimensionError(f"expected (n, {cfg.feature_dim}) features, got {x.shape}")
    centers, _ = class_centers(cfg)
    return _nearest(x, centers)
