"""
Reference classifier: a small fully connected network with one softmax head
per task, trained by SGD with momentum and scheduled weight decay.

Head layouts:
  binary     one 2-way head               (index 0 = animal, 1 = empty)
  multitask  species (k) + count (12) + six 2-way attribute heads
             (index 1 = attribute present)
  one_stage  one (k+1)-way head, the empty class last

All heads share the hidden layers and one output layer whose columns are
sliced per head. Parameters are float64 numpy arrays; every random draw comes
from generators seeded by TrainConfig.seed.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from tqdm import tqdm

from artifacts import atomic_write_text, tool_stamp
from domain import (
    ATTRIBUTE_NAMES,
    N_ATTRIBUTES,
    N_COUNT_BINS,
    BinaryPrediction,
    LabelSet,
    MultiTaskPrediction,
    OneStagePrediction,
    Prediction,
)
from errors import ConfigError, DataError, DimensionError, LayoutMismatchError, NumericError, TrainingError
from imbalance import (
    BatchSampler,
    ClassWeights,
    EmphasisFeedback,
    EmphasisQueues,
    EmphasisSampler,
    ImbalanceMethod,
    OversampleSampler,
    UniformSampler,
    class_weights,
)
from manifest import Dataset
from prep import FeaturePipeline

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "camtrap-checkpoint"
CHECKPOINT_VERSION = 1
TOP_K = 5


# ============================================================================
# HEAD LAYOUT
# ============================================================================

class HeadMode(Enum):
    BINARY = "binary"
    MULTITASK = "multitask"
    ONE_STAGE = "one_stage"


@dataclass(frozen=True)
class HeadLayout:
    mode: HeadMode
    n_species: int = 48
    n_count_bins: int = N_COUNT_BINS
    n_attributes: int = N_ATTRIBUTES

    def __post_init__(self):
        if self.n_species < 2 or self.n_count_bins < 2:
            raise ConfigError("head_layout", "every head needs at least 2 classes")
        if self.n_attributes > len(ATTRIBUTE_NAMES):
            raise ConfigError("head_layout", f"at most {len(ATTRIBUTE_NAMES)} attribute heads")

    @property
    def primary(self) -> str:
        return {HeadMode.BINARY: "binary", HeadMode.MULTITASK: "species",
                HeadMode.ONE_STAGE: "one_stage"}[self.mode]

    def heads(self) -> list[tuple[str, int]]:
        if self.mode is HeadMode.BINARY:
            return [("binary", 2)]
        if self.mode is HeadMode.ONE_STAGE:
            return [("one_stage", self.n_species + 1)]
        heads = [("species", self.n_species), ("count", self.n_count_bins)]
        heads += [(f"attr_{name}", 2) for name in ATTRIBUTE_NAMES[:self.n_attributes]]
        return heads

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, size in self.heads():
            out[name] = slice(start, start + size)
            start += size
        return out

    @property
    def output_dim(self) -> int:
        return sum(size for _, size in self.heads())

    def to_json(self) -> dict[str, Any]:
        return {"mode": self.mode.value, "n_species": self.n_species,
                "n_count_bins": self.n_count_bins, "n_attributes": self.n_attributes}

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> HeadLayout:
        return cls(HeadMode(data["mode"]), data["n_species"], data["n_count_bins"], data["n_attributes"])


# ============================================================================
# TRAINING CONFIG
# ============================================================================

@dataclass(frozen=True)
class ScheduleRow:
    first_epoch: int
    last_epoch: int
    learning_rate: float
    weight_decay: float


# Published 55-epoch schedule; the final 0.0001 row runs from epoch 53 to the end.
REFERENCE_SCHEDULE = (
    ScheduleRow(1, 18, 0.01, 0.0005),
    ScheduleRow(19, 29, 0.005, 0.0005),
    ScheduleRow(30, 43, 0.001, 0.0),
    ScheduleRow(44, 52, 0.0005, 0.0),
    ScheduleRow(53, 55, 0.0001, 0.0),
)
REFERENCE_EPOCHS = 55


def reference_schedule(epochs: int = REFERENCE_EPOCHS) -> tuple[ScheduleRow, ...]:
    """The reference schedule with row boundaries rescaled to `epochs`."""
    if epochs == REFERENCE_EPOCHS:
        return REFERENCE_SCHEDULE
    rows, prev_end = [], 0
    for i, row in enumerate(REFERENCE_SCHEDULE):
        last = i == len(REFERENCE_SCHEDULE) - 1
        end = epochs if last else int(round(row.last_epoch * epochs / REFERENCE_EPOCHS))
        end = min(end, epochs)
        if end <= prev_end:
            continue
        rows.append(ScheduleRow(prev_end + 1, end, row.learning_rate, row.weight_decay))
        prev_end = end
    if prev_end < epochs:
        rows[-1] = ScheduleRow(rows[-1].first_epoch, epochs, rows[-1].learning_rate, rows[-1].weight_decay)
    return tuple(rows)


def constant_schedule(epochs: int, learning_rate: float, weight_decay: float = 0.0) -> tuple[ScheduleRow, ...]:
    return (ScheduleRow(1, epochs, learning_rate, weight_decay),)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    momentum: float = 0.9
    epochs: int = REFERENCE_EPOCHS
    # Batches per epoch, drawn with replacement.
    epoch_size: int = 5900
    schedule: tuple[ScheduleRow, ...] = REFERENCE_SCHEDULE
    grad_clamp: float | None = None
    seed: int = 0
    hidden_sizes: tuple[int, ...] = (64, 64)
    # Per-head multipliers on the summed loss; unlisted heads weigh 1.
    head_weights: tuple[tuple[str, float], ...] = ()
    imbalance: ImbalanceMethod = ImbalanceMethod.NONE
    # "mean_one" multiplies the sum-to-one class weights by k.
    weight_scale: str = "mean_one"
    weighted_heads: tuple[str, ...] = ("primary",)
    emphasis_p1: float = 0.20
    emphasis_p5: float = 0.35
    emphasis_capacity: int | None = None
    progress: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum", f"must be in [0, 1), got {self.momentum}")
        if self.epochs < 1 or self.epoch_size < 1:
            raise ConfigError("epochs", "epochs and epoch_size must be >= 1")
        if self.grad_clamp is not None and self.grad_clamp <= 0:
            raise ConfigError("grad_clamp", f"must be > 0 when set, got {self.grad_clamp}")
        if self.weight_scale not in ("mean_one", "sum"):
            raise ConfigError("weight_scale", "must be 'mean_one' or 'sum'")
        if any(h <= 0 for h in self.hidden_sizes):
            raise ConfigError("hidden_sizes", "layer sizes must be positive")
        expected = 1
        for row in sorted(self.schedule, key=lambda r: r.first_epoch):
            if row.first_epoch != expected or row.last_epoch < row.first_epoch:
                raise ConfigError("schedule", f"rows must cover epochs 1..{self.epochs} without gaps "
                                              f"or overlaps (problem at epoch {expected})")
            # lr 0 is allowed: a frozen run.
            if row.learning_rate < 0 or row.weight_decay < 0:
                raise ConfigError("schedule", "learning rate and weight decay must be >= 0")
            expected = row.last_epoch + 1
        if expected != self.epochs + 1:
            raise ConfigError("schedule", f"rows end at epoch {expected - 1}, expected {self.epochs}")

    def rates(self, epoch: int) -> tuple[float, float]:
        for row in self.schedule:
            if row.first_epoch <= epoch <= row.last_epoch:
                return row.learning_rate, row.weight_decay
        raise ConfigError("schedule", f"no row covers epoch {epoch}")

    def head_weight(self, name: str) -> float:
        return dict(self.head_weights).get(name, 1.0)

    def to_json(self) -> dict[str, Any]:
        data = asdict(self)
        data["imbalance"] = self.imbalance.value
        return json.loads(json.dumps(data))

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> TrainConfig:
        data = dict(data)
        data["schedule"] = tuple(ScheduleRow(**row) for row in data["schedule"])
        data["hidden_sizes"] = tuple(data["hidden_sizes"])
        data["head_weights"] = tuple((k, v) for k, v in data["head_weights"])
        data["weighted_heads"] = tuple(data["weighted_heads"])
        data["imbalance"] = ImbalanceMethod(data["imbalance"])
        return cls(**data)


# ============================================================================
# MODEL STATE
# ============================================================================

@dataclass
class Snapshot:
    epoch: int
    accuracy: float
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    weight_decay: float
    train_loss: float
    test_accuracy: float
    extra_batches: int = 0


@dataclass
class ModelState:
    layout: HeadLayout
    input_dim: int
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    velocity_w: list[np.ndarray]
    velocity_b: list[np.ndarray]
    epoch: int = 0
    best: Snapshot | None = None
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    def best_state(self) -> ModelState:
        """Copy of the state carrying the best checkpoint's parameters."""
        state = copy.deepcopy(self)
        if self.best is not None:
            state.weights = [w.copy() for w in self.best.weights]
            state.biases = [b.copy() for b in self.best.biases]
        return state


def init_state(layout: HeadLayout, input_dim: int, hidden_sizes: Sequence[int], seed: int) -> ModelState:
    """Glorot-uniform weights in [-a, a], a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    sizes = [input_dim, *hidden_sizes, layout.output_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelState(
        layout=layout,
        input_dim=input_dim,
        weights=weights,
        biases=biases,
        velocity_w=[np.zeros_like(w) for w in weights],
        velocity_b=[np.zeros_like(b) for b in biases],
    )


# ============================================================================
# FORWARD
# ============================================================================

def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _forward(weights: list[np.ndarray], biases: list[np.ndarray], X: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Returns the input of every layer and the output logits."""
    acts = [X]
    h = X
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = h @ W + b
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite activation in layer {i}")
        if i < len(weights) - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            return acts, z
    raise AssertionError("network has no layers")


def _check_input(state: ModelState, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != state.input_dim:
        raise DimensionError(f"expected features of dimension {state.input_dim}, got shape {X.shape}")
    return X


def head_probabilities(state: ModelState, X: np.ndarray) -> dict[str, np.ndarray]:
    """Softmax output of every head for a (n, d) feature matrix."""
    X = _check_input(state, X)
    _, logits = _forward(state.weights, state.biases, X)
    return {name: _softmax(logits[:, sl]) for name, sl in state.layout.slices().items()}


def public_heads(layout: HeadLayout, probs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Collapse the 2-way attribute heads into one (n, 6) positive-probability array."""
    if layout.mode is not HeadMode.MULTITASK:
        return dict(probs)
    out = {"species": probs["species"], "count": probs["count"]}
    attrs = [probs[f"attr_{name}"][:, 1] for name in ATTRIBUTE_NAMES[:layout.n_attributes]]
    out["attributes"] = np.stack(attrs, axis=1)
    return out


def predict_heads(state: ModelState, X: np.ndarray) -> dict[str, np.ndarray]:
    return public_heads(state.layout, head_probabilities(state, X))


def prediction_at(layout: HeadLayout, heads: dict[str, np.ndarray], i: int) -> Prediction:
    if layout.mode is HeadMode.BINARY:
        p = heads["binary"][i]
        return BinaryPrediction(p_animal=float(p[0]), p_empty=float(p[1]))
    if layout.mode is HeadMode.ONE_STAGE:
        return OneStagePrediction(heads["one_stage"][i])
    return MultiTaskPrediction(heads["species"][i], heads["count"][i], heads["attributes"][i])


def forward(state: ModelState, features: Sequence[float] | np.ndarray) -> Prediction:
    X = _check_input(state, features)
    if len(X) != 1:
        raise DimensionError("forward takes a single feature vector; use predict_batch")
    return prediction_at(state.layout, predict_heads(state, X), 0)


def predict_batch(state: ModelState, images: np.ndarray) -> list[Prediction]:
    """One prediction per row, in order. Does not touch the state."""
    X = _check_input(state, images)
    heads = predict_heads(state, X)
    return [prediction_at(state.layout, heads, i) for i in range(len(X))]


# ============================================================================
# TARGETS AND LOSS
# ============================================================================

def encode_targets(layout: HeadLayout, labels: Sequence[LabelSet]) -> dict[str, np.ndarray]:
    """Class index per head per example; -1 masks a head (missing attributes)."""
    n = len(labels)
    targets = {name: np.full(n, -1, dtype=np.int64) for name, _ in layout.heads()}
    for i, label in enumerate(labels):
        if layout.mode is HeadMode.BINARY:
            targets["binary"][i] = 1 if label.empty else 0
        elif layout.mode is HeadMode.ONE_STAGE:
            targets["one_stage"][i] = layout.n_species if label.empty else label.species.id
        else:
            if label.empty or label.species is None or label.count is None:
                raise DataError(f"example {i}: multitask heads need species and count labels")
            targets["species"][i] = label.species.id
            targets["count"][i] = label.count.index
            if label.attributes is not None:
                for name, flag in zip(ATTRIBUTE_NAMES[:layout.n_attributes], label.attributes.as_tuple()):
                    targets[f"attr_{name}"][i] = int(flag)
    primary = targets[layout.primary]
    size = dict(layout.heads())[layout.primary]
    if np.any(primary >= size):
        raise LayoutMismatchError(f"label class {int(primary.max())} outside {layout.primary} head of size {size}")
    return targets


def _prediction_heads(prediction: Prediction) -> tuple[HeadLayout, dict[str, np.ndarray]]:
    if isinstance(prediction, BinaryPrediction):
        return HeadLayout(HeadMode.BINARY), {"binary": prediction.as_vector()[None, :]}
    if isinstance(prediction, OneStagePrediction):
        k = len(prediction.class_probs) - 1
        return HeadLayout(HeadMode.ONE_STAGE, n_species=max(k, 2)), {"one_stage": prediction.class_probs[None, :]}
    layout = HeadLayout(HeadMode.MULTITASK, n_species=len(prediction.species_probs),
                        n_count_bins=len(prediction.count_probs), n_attributes=len(prediction.attribute_probs))
    probs = {"species": prediction.species_probs[None, :], "count": prediction.count_probs[None, :]}
    for j, name in enumerate(ATTRIBUTE_NAMES[:layout.n_attributes]):
        p = prediction.attribute_probs[j]
        probs[f"attr_{name}"] = np.array([[1.0 - p, p]])
    return layout, probs


def loss(prediction: Prediction, label: LabelSet, class_weights: ClassWeights | None = None,
         head_weights: dict[str, float] | None = None) -> float:
    """Sum of per-head cross-entropies; class weights scale the primary head."""
    layout, probs = _prediction_heads(prediction)
    targets = encode_targets(layout, [label])
    head_weights = head_weights or {}
    total = 0.0
    with np.errstate(divide="ignore"):
        for name, p in probs.items():
            t = int(targets[name][0])
            if t < 0:
                continue
            term = -float(np.log(p[0, t]))
            if name == layout.primary and class_weights is not None:
                term *= float(class_weights.weights[t])
            total += head_weights.get(name, 1.0) * term
    return total


# ============================================================================
# BACKWARD
# ============================================================================

@dataclass
class Batch:
    features: np.ndarray
    targets: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, idx: np.ndarray) -> Batch:
        return Batch(self.features[idx], {k: v[idx] for k, v in self.targets.items()})


@dataclass
class Gradients:
    loss: float
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    probs: dict[str, np.ndarray]


@dataclass(frozen=True)
class LossOptions:
    """Loss weighting shared by backward() and the finite-difference check."""
    class_weights: np.ndarray | None = None
    weighted_heads: tuple[str, ...] = ("primary",)
    head_weights: tuple[tuple[str, float], ...] = ()
    grad_clamp: float | None = None


def _loss_and_grads(weights, biases, layout: HeadLayout, batch: Batch, opts: LossOptions,
                    need_grads: bool = True) -> Gradients:
    if len(batch) == 0:
        raise DataError("backward needs a non-empty batch")
    acts, logits = _forward(weights, biases, batch.features)
    n = len(batch)
    rows = np.arange(n)
    dlogits = np.zeros_like(logits)
    head_w = dict(opts.head_weights)
    weighted = {layout.primary if h == "primary" else h for h in opts.weighted_heads}
    primary_t = batch.targets[layout.primary]

    total = 0.0
    probs = {}
    for name, sl in layout.slices().items():
        z = logits[:, sl]
        p = _softmax(z)
        probs[name] = p
        t = batch.targets[name]
        mask = t >= 0
        if not mask.any():
            continue
        w_ex = mask * head_w.get(name, 1.0)
        if opts.class_weights is not None and name in weighted:
            w_ex = w_ex * opts.class_weights[primary_t]
        tt = np.where(mask, t, 0)
        total += -float((w_ex * _log_softmax(z)[rows, tt]).sum()) / n
        if need_grads:
            g = p.copy()
            g[rows, tt] -= 1.0
            dlogits[:, sl] = g * (w_ex / n)[:, None]

    if not need_grads:
        return Gradients(total, [], [], probs)

    n_layers = len(weights)
    grads_w: list[np.ndarray] = [None] * n_layers
    grads_b: list[np.ndarray] = [None] * n_layers
    delta = dlogits
    for i in range(n_layers - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i].T) * (acts[i] > 0)

    if opts.grad_clamp is not None:
        c = opts.grad_clamp
        grads_w[-1] = np.clip(grads_w[-1], -c, c)
        grads_b[-1] = np.clip(grads_b[-1], -c, c)

    for i in range(n_layers):
        if not (np.all(np.isfinite(grads_w[i])) and np.all(np.isfinite(grads_b[i]))):
            raise NumericError(f"non-finite gradient in layer {i}")
    return Gradients(total, grads_w, grads_b, probs)


def backward(state: ModelState, batch: Batch, opts: LossOptions | None = None) -> Gradients:
    """Gradients of the mean batch loss w.r.t. every weight and bias."""
    X = _check_input(state, batch.features)
    return _loss_and_grads(state.weights, state.biases, state.layout, Batch(X, batch.targets),
                           opts or LossOptions())


def batch_loss(state: ModelState, batch: Batch, opts: LossOptions | None = None) -> float:
    X = _check_input(state, batch.features)
    return _loss_and_grads(state.weights, state.biases, state.layout, Batch(X, batch.targets),
                           opts or LossOptions(), need_grads=False).loss


def numerical_gradients(state: ModelState, batch: Batch, opts: LossOptions | None = None,
                        eps: float = 1e-6) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Central finite differences of batch_loss (no clamping)."""
    opts = opts or LossOptions()
    probe = copy.deepcopy(state)

    def fd(params: list[np.ndarray]) -> list[np.ndarray]:
        out = []
        for arr in params:
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + eps
                up = batch_loss(probe, batch, opts)
                arr[idx] = orig - eps
                down = batch_loss(probe, batch, opts)
                arr[idx] = orig
                g[idx] = (up - down) / (2 * eps)
            out.append(g)
        return out

    return fd(probe.weights), fd(probe.biases)


def sgd_update(state: ModelState, grads: Gradients, lr: float, weight_decay: float, momentum: float) -> None:
    """v <- m*v - lr*(g + wd*w); w <- w + v. Biases get no weight decay."""
    for i in range(len(state.weights)):
        state.velocity_w[i] = momentum * state.velocity_w[i] - lr * (grads.weights[i] + weight_decay * state.weights[i])
        state.weights[i] = state.weights[i] + state.velocity_w[i]
        state.velocity_b[i] = momentum * state.velocity_b[i] - lr * grads.biases[i]
        state.biases[i] = state.biases[i] + state.velocity_b[i]


# ============================================================================
# TRAINING
# ============================================================================

def make_batch(layout: HeadLayout, d: Dataset) -> Batch:
    return Batch(d.feature_matrix(), encode_targets(layout, d.image_labels()))


def primary_accuracy(state: ModelState, batch: Batch, pipeline: FeaturePipeline | None = None) -> float:
    if len(batch) == 0:
        return 0.0
    X = batch.features if pipeline is None else pipeline.transform(batch.features)
    probs = head_probabilities(state, X)[state.layout.primary]
    return float(np.mean(np.argmax(probs, axis=1) == batch.targets[state.layout.primary]))


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def make_sampler(cfg: TrainConfig, layout: HeadLayout, train: Batch, seed: int) -> BatchSampler:
    primary = train.targets[layout.primary]
    base_seed, emph_seed = _seeds(seed, 2)
    if cfg.imbalance is ImbalanceMethod.OVERSAMPLE:
        present, dense = np.unique(primary, return_inverse=True)
        size = dict(layout.heads())[layout.primary]
        if len(present) < size:
            log.warning(f"Oversampling over {len(present)} of {size} classes; "
                        f"the rest have no training examples")
        sampler = OversampleSampler(dense, cfg.batch_size, base_seed)
        return sampler
    base = UniformSampler(len(train), cfg.batch_size, base_seed)
    if cfg.imbalance is ImbalanceMethod.EMPHASIS:
        capacity = cfg.emphasis_capacity or len(train)
        queues = EmphasisQueues(capacity, cfg.emphasis_p1, cfg.emphasis_p5)
        return EmphasisSampler(base, queues, cfg.batch_size, emph_seed)
    return base


def _feedback(layout: HeadLayout, probs: dict[str, np.ndarray], batch: Batch, idx: np.ndarray) -> EmphasisFeedback:
    p = probs[layout.primary]
    t = batch.targets[layout.primary]
    k = min(TOP_K, p.shape[1])
    order = np.argsort(-p, axis=1, kind="stable")
    top1 = order[:, 0] == t
    top5 = np.any(order[:, :k] == t[:, None], axis=1)
    return EmphasisFeedback(np.asarray(idx), top1, top5)


def training_class_weights(cfg: TrainConfig, layout: HeadLayout, train: Batch) -> np.ndarray | None:
    if cfg.imbalance is not ImbalanceMethod.WEIGHTED_LOSS:
        return None
    size = dict(layout.heads())[layout.primary]
    counts = np.bincount(train.targets[layout.primary], minlength=size)
    present = counts > 0
    if not present.all():
        log.warning(f"Weighting {int(present.sum())} of {size} classes; "
                    f"the rest have no training examples")
    weights = class_weights(counts[present])
    # Absent classes never occur as targets, so their weight is never read.
    out = np.zeros(size)
    out[present] = weights.mean_one() if cfg.weight_scale == "mean_one" else weights.weights
    return out


def fit(
    state: ModelState,
    train: Dataset | Batch,
    test: Dataset | Batch,
    cfg: TrainConfig,
    sampler: BatchSampler | None = None,
    pipeline: FeaturePipeline | None = None,
) -> ModelState:
    """
    Train for cfg.epochs x cfg.epoch_size steps, evaluating the primary head's
    top-1 on `test` after every epoch and keeping the best epoch as the
    checkpoint snapshot. Mutates and returns `state`.
    """
    layout = state.layout
    train_b = train if isinstance(train, Batch) else make_batch(layout, train)
    test_b = test if isinstance(test, Batch) else make_batch(layout, test)
    if len(train_b) == 0:
        raise DataError("training set is empty")

    sampler_seed, augment_seed = _seeds(cfg.seed, 3)[1:]
    sampler = sampler or make_sampler(cfg, layout, train_b, sampler_seed)
    augment_rng = np.random.default_rng(augment_seed)
    opts = LossOptions(
        class_weights=training_class_weights(cfg, layout, train_b),
        weighted_heads=cfg.weighted_heads,
        head_weights=cfg.head_weights,
        grad_clamp=cfg.grad_clamp,
    )
    want_feedback = isinstance(sampler, EmphasisSampler)
    feedback = None

    epochs = range(state.epoch + 1, cfg.epochs + 1)
    for epoch in tqdm(epochs, desc=f"train {layout.mode.value}", disable=not cfg.progress):
        lr, wd = cfg.rates(epoch)
        loss_sum, n_steps, extra = 0.0, 0, 0
        for b in range(cfg.epoch_size):
            batches = sampler.step(feedback)
            extra += len(batches) - 1
            for j, idx in enumerate(batches):
                sub = train_b.subset(idx)
                X = sub.features if pipeline is None else pipeline.transform_train(sub.features, augment_rng)
                try:
                    grads = _loss_and_grads(state.weights, state.biases, layout, Batch(X, sub.targets), opts)
                except NumericError as e:
                    raise TrainingError(epoch, b, str(e)) from e
                if not np.isfinite(grads.loss):
                    raise TrainingError(epoch, b)
                sgd_update(state, grads, lr, wd, cfg.momentum)
                loss_sum += grads.loss
                n_steps += 1
                if j == 0 and want_feedback:
                    feedback = _feedback(layout, grads.probs, sub, idx)

        acc = primary_accuracy(state, test_b, pipeline)
        state.epoch = epoch
        state.history.append(EpochRecord(epoch, lr, wd, loss_sum / max(n_steps, 1), acc, extra))
        if state.best is None or acc > state.best.accuracy:
            state.best = Snapshot(epoch, acc, [w.copy() for w in state.weights], [b.copy() for b in state.biases])
        log.debug(f"epoch {epoch:3d}  lr {lr:<8g} wd {wd:<8g} loss {loss_sum / max(n_steps, 1):.4f}  "
                  f"test top-1 {acc:.4f}")
    return state


# ============================================================================
# CHECKPOINTS
# ============================================================================

@dataclass
class Checkpoint:
    state: ModelState
    config: TrainConfig
    metadata: dict[str, Any] = field(default_factory=dict)
    pipeline: FeaturePipeline | None = None


def _arrays(arrs: list[np.ndarray]) -> list:
    return [a.tolist() for a in arrs]


def _from_arrays(data: list) -> list[np.ndarray]:
    return [np.array(a, dtype=np.float64) for a in data]


def checkpoint_json(ckpt: Checkpoint) -> dict[str, Any]:
    s = ckpt.state
    best = None if s.best is None else {
        "epoch": s.best.epoch, "accuracy": s.best.accuracy,
        "weights": _arrays(s.best.weights), "biases": _arrays(s.best.biases),
    }
    return {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        **tool_stamp(),
        "layout": s.layout.to_json(),
        "input_dim": s.input_dim,
        "config": ckpt.config.to_json(),
        "epoch": s.epoch,
        "weights": _arrays(s.weights),
        "biases": _arrays(s.biases),
        "velocity_w": _arrays(s.velocity_w),
        "velocity_b": _arrays(s.velocity_b),
        "best": best,
        "history": [asdict(r) for r in s.history],
        "pipeline": None if ckpt.pipeline is None else ckpt.pipeline.to_json(),
        "metadata": ckpt.metadata,
    }


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    return atomic_write_text(path, json.dumps(checkpoint_json(ckpt), sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except ValueError as e:
            raise DataError(f"{path}: not a checkpoint ({e})") from None
    if data.get("format") != CHECKPOINT_FORMAT or data.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format {data.get('format')} v{data.get('format_version')}")
    best = data["best"]
    state = ModelState(
        layout=HeadLayout.from_json(data["layout"]),
        input_dim=data["input_dim"],
        weights=_from_arrays(data["weights"]),
        biases=_from_arrays(data["biases"]),
        velocity_w=_from_arrays(data["velocity_w"]),
        velocity_b=_from_arrays(data["velocity_b"]),
        epoch=data["epoch"],
        best=None if best is None else Snapshot(best["epoch"], best["accuracy"],
                                                _from_arrays(best["weights"]), _from_arrays(best["biases"])),
        history=[EpochRecord(**r) for r in data["history"]],
    )
    pipeline = None if data["pipeline"] is None else FeaturePipeline.from_json(data["pipeline"])
    return Checkpoint(state, TrainConfig.from_json(data["config"]), data["metadata"], pipeline)
