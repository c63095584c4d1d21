"""
Class-imbalance remedies: weighted loss, oversampling and emphasis sampling.

Samplers hand the trainer lists of example-index batches. Each training step
calls `sampler.step(feedback)`, where `feedback` describes how the network's
guesses on the previous base batch fared; only the emphasis sampler uses it.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Protocol, Sequence

import numpy as np

from errors import ConfigError, DataError, EmptyClassError
from manifest import Dataset

log = logging.getLogger(__name__)

EMPHASIS_P_TOP1 = 0.20
EMPHASIS_P_TOP5 = 0.35


class ImbalanceMethod(Enum):
    NONE = "none"
    WEIGHTED_LOSS = "weighted_loss"
    OVERSAMPLE = "oversample"
    EMPHASIS = "emphasis"


# ============================================================================
# WEIGHTED LOSS
# ============================================================================

@dataclass(frozen=True, eq=False)
class ClassWeights:
    """Per-class cost of a miss, indexed by species id; sums to one."""
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if np.any(w <= 0):
            raise DataError("class weights must be positive")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise DataError(f"class weights must sum to 1, got {w.sum()}")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.weights.size

    def mean_one(self) -> np.ndarray:
        """Weights rescaled to average 1 (same ratios, k times larger)."""
        return self.weights * self.weights.size


def class_weights(counts: Sequence[int], N: int | None = None) -> ClassWeights:
    """f_i = N / n_i, w_i = f_i / sum_j f_j."""
    n = np.asarray(counts, dtype=np.float64)
    if n.size == 0:
        raise DataError("class_weights needs at least one class")
    if np.any(n < 1):
        empty = np.flatnonzero(n < 1).tolist()
        raise EmptyClassError(f"classes {empty} have no examples; their weight is undefined")
    total = float(n.sum()) if N is None else float(N)
    if N is not None and total != n.sum():
        raise DataError(f"N={N} does not equal the sum of counts {int(n.sum())}")
    f = total / n
    return ClassWeights(f / f.sum())


# ============================================================================
# SAMPLERS
# ============================================================================

@dataclass(frozen=True)
class EmphasisFeedback:
    """Top-1 / top-5 correctness of the network's guesses on one batch."""
    indices: np.ndarray
    top1_correct: np.ndarray
    top5_correct: np.ndarray


class BatchSampler(Protocol):
    def step(self, feedback: EmphasisFeedback | None = None) -> list[np.ndarray]: ...


class UniformSampler:
    """Uniform draws with replacement over all examples."""

    def __init__(self, n_examples: int, batch_size: int, seed: int):
        if n_examples < 1:
            raise EmptyClassError("no training examples")
        self.n_examples = n_examples
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def step(self, feedback: EmphasisFeedback | None = None) -> list[np.ndarray]:
        return [self.rng.integers(0, self.n_examples, size=self.batch_size)]


class OversampleSampler:
    """Pick a class uniformly, then an example uniformly within it."""

    def __init__(self, class_ids: Sequence[int], batch_size: int, seed: int,
                 n_classes: int | None = None):
        class_ids = np.asarray(class_ids, dtype=np.int64)
        n_classes = int(class_ids.max()) + 1 if n_classes is None else n_classes
        self.members = [np.flatnonzero(class_ids == c) for c in range(n_classes)]
        empty = [c for c, m in enumerate(self.members) if m.size == 0]
        if empty:
            raise EmptyClassError(f"classes {empty} have no examples to oversample")
        self.sizes = np.array([m.size for m in self.members])
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def draw(self) -> np.ndarray:
        classes = self.rng.integers(0, len(self.members), size=self.batch_size)
        offsets = (self.rng.random(self.batch_size) * self.sizes[classes]).astype(np.int64)
        return np.array([self.members[c][o] for c, o in zip(classes, offsets)], dtype=np.int64)

    def step(self, feedback: EmphasisFeedback | None = None) -> list[np.ndarray]:
        return [self.draw()]


def _image_class_ids(d: Dataset) -> np.ndarray:
    k = len(d.taxonomy)
    return np.array([k if img.label.empty else img.label.species.id for img in d.images()], dtype=np.int64)


def oversample_batches(d: Dataset, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless stream of image-index batches with equal expected class frequency.

    Classes are the taxonomy's species, plus an empty class when the dataset
    holds empty images.
    """
    ids = _image_class_ids(d)
    n_classes = len(d.taxonomy) + (1 if np.any(ids == len(d.taxonomy)) else 0)
    sampler = OversampleSampler(ids, batch_size, seed, n_classes=n_classes)
    while True:
        yield sampler.draw()


# ---------------------------------------------------------------------------
# Emphasis sampling
# ---------------------------------------------------------------------------

@dataclass
class EmphasisQueues:
    capacity: int
    p1: float = EMPHASIS_P_TOP1
    p5: float = EMPHASIS_P_TOP5
    q_top1: deque = field(init=False)
    q_top5: deque = field(init=False)

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError("emphasis_capacity", f"must be >= 1, got {self.capacity}")
        for name, p in (("emphasis_p1", self.p1), ("emphasis_p5", self.p5)):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(name, f"must be in [0, 1], got {p}")
        # deque(maxlen) drops the oldest entry on overflow.
        self.q_top1 = deque(maxlen=self.capacity)
        self.q_top5 = deque(maxlen=self.capacity)

    def enqueue(self, feedback: EmphasisFeedback) -> None:
        for idx, ok1, ok5 in zip(feedback.indices, feedback.top1_correct, feedback.top5_correct):
            if not ok5:
                self.q_top5.append(int(idx))
            elif not ok1:
                self.q_top1.append(int(idx))

    @staticmethod
    def take(queue: deque, n: int) -> np.ndarray:
        out = [queue.popleft() for _ in range(min(n, len(queue)))]
        return np.array(out, dtype=np.int64)


def emphasis_step(
    queues: EmphasisQueues,
    rng: np.random.Generator,
    base_batch: np.ndarray,
    last_eval: EmphasisFeedback | None,
    batch_size: int | None = None,
) -> list[np.ndarray]:
    """Enqueue last step's misses, then return base_batch plus any queue batches."""
    if last_eval is not None:
        queues.enqueue(last_eval)
    batch_size = len(base_batch) if batch_size is None else batch_size

    batches = [np.asarray(base_batch, dtype=np.int64)]
    # Both coins are always tossed so the stream does not depend on queue state.
    feed_top1 = rng.random() < queues.p1
    feed_top5 = rng.random() < queues.p5
    if feed_top1 and queues.q_top1:
        batches.append(queues.take(queues.q_top1, batch_size))
    if feed_top5 and queues.q_top5:
        batches.append(queues.take(queues.q_top5, batch_size))
    return batches


class EmphasisSampler:
    """Wraps a base sampler and re-feeds recently misclassified examples."""

    def __init__(self, base: BatchSampler, queues: EmphasisQueues, batch_size: int, seed: int):
        self.base = base
        self.queues = queues
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.extra_batches = 0

    def step(self, feedback: EmphasisFeedback | None = None) -> list[np.ndarray]:
        base_batch = self.base.step(None)[0]
        batches = emphasis_step(self.queues, self.rng, base_batch, feedback, self.batch_size)
        self.extra_batches += len(batches) - 1
        return batches
