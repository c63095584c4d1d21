"""Tests for the reference network: forward pass, loss, gradients, training and checkpoints."""

import json
import math

import numpy as np
import pytest

from domain import AttributeSet, BinaryPrediction, LabelSet, MultiTaskPrediction, OneStagePrediction, Taxonomy, count_to_bin
from artifacts import TOOL_VERSION
from errors import ConfigError, DataError, TrainingError
from imbalance import ImbalanceMethod, class_weights
from manifest import SplitSpec, split_by_event
from model import (
    REFERENCE_SCHEDULE,
    Batch,
    Checkpoint,
    HeadLayout,
    HeadMode,
    LossOptions,
    ScheduleRow,
    TrainConfig,
    backward,
    constant_schedule,
    encode_targets,
    fit,
    forward,
    head_probabilities,
    init_state,
    load_checkpoint,
    loss,
    make_batch,
    numerical_gradients,
    predict_batch,
    primary_accuracy,
    reference_schedule,
    save_checkpoint,
)
from prep import FeaturePipeline
from synthgen import SynthConfig, generate

MODES = (HeadMode.BINARY, HeadMode.MULTITASK, HeadMode.ONE_STAGE)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def naive_heads(state, x):
    """Loop-by-loop forward pass used as an independent oracle."""
    h = [float(v) for v in x]
    n_layers = len(state.weights)
    for li in range(n_layers):
        W, b = state.weights[li], state.biases[li]
        z = [b[j] + sum(h[i] * W[i][j] for i in range(len(h))) for j in range(W.shape[1])]
        h = [max(v, 0.0) for v in z] if li < n_layers - 1 else z
    out = {}
    for name, sl in state.layout.slices().items():
        zs = h[sl]
        top = max(zs)
        e = [math.exp(v - top) for v in zs]
        out[name] = [v / sum(e) for v in e]
    return out


def random_layout(rng):
    mode = MODES[int(rng.integers(3))]
    if mode is HeadMode.MULTITASK:
        return HeadLayout(mode, n_species=int(rng.integers(2, 5)), n_count_bins=int(rng.integers(2, 5)),
                          n_attributes=int(rng.integers(1, 4)))
    return HeadLayout(mode, n_species=int(rng.integers(2, 5)))


def random_case(rng):
    layout = random_layout(rng)
    input_dim = int(rng.integers(2, 6))
    hidden = tuple(int(rng.integers(2, 6)) for _ in range(int(rng.integers(1, 3))))
    state = init_state(layout, input_dim, hidden, seed=int(rng.integers(1 << 31)))
    state.biases = [rng.normal(0.0, 0.1, size=b.shape) for b in state.biases]

    n = int(rng.integers(1, 7))
    targets = {}
    for name, size in layout.heads():
        t = rng.integers(0, size, size=n)
        if name.startswith("attr_"):
            t = np.where(rng.random(n) < 0.3, -1, t)
        targets[name] = t
    batch = Batch(rng.normal(size=(n, input_dim)), targets)

    size = dict(layout.heads())[layout.primary]
    opts = LossOptions(
        class_weights=rng.uniform(0.2, 3.0, size=size) if rng.random() < 0.5 else None,
        head_weights=(("count", 0.5),) if rng.random() < 0.5 else (),
    )
    return state, batch, opts


def rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-3)


def separable_data(seed=0, n_events=200):
    cfg = SynthConfig(n_classes=2, empty_fraction=0.0, noise_rate=0.0, n_events=n_events,
                      images_per_event=(1.0, 0.0, 0.0), class_separation=6.0, seed=seed)
    return split_by_event(generate(cfg), SplitSpec(0.8, seed=seed))


def quick_config(**kwargs):
    defaults = dict(batch_size=32, epochs=20, epoch_size=5, schedule=constant_schedule(20, 0.05),
                    hidden_sizes=(16,), seed=3)
    defaults.update(kwargs)
    return TrainConfig(**defaults)


# ---------------------------------------------------------------------------
# Layout and schedule
# ---------------------------------------------------------------------------

def test_head_layout_sizes():
    assert HeadLayout(HeadMode.BINARY).output_dim == 2
    assert HeadLayout(HeadMode.ONE_STAGE, n_species=48).output_dim == 49
    multi = HeadLayout(HeadMode.MULTITASK, n_species=48)
    assert multi.output_dim == 48 + 12 + 12
    assert multi.slices()["count"] == slice(48, 60)
    assert HeadLayout.from_json(multi.to_json()) == multi


def test_reference_schedule():
    cfg = TrainConfig()
    assert cfg.schedule == REFERENCE_SCHEDULE
    assert cfg.rates(1) == (0.01, 0.0005)
    assert cfg.rates(30) == (0.001, 0.0)
    assert cfg.rates(55) == (0.0001, 0.0)

    for epochs in (3, 20, 100):
        rows = reference_schedule(epochs)
        short = TrainConfig(epochs=epochs, schedule=rows)
        assert short.rates(1) == (0.01, 0.0005)
        assert short.rates(epochs)[0] == rows[-1].learning_rate


def test_schedule_must_cover_every_epoch():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=10, schedule=(ScheduleRow(1, 4, 0.1, 0.0), ScheduleRow(6, 10, 0.1, 0.0)))
    with pytest.raises(ConfigError):
        TrainConfig(epochs=10, schedule=constant_schedule(9, 0.1))
    with pytest.raises(ConfigError):
        TrainConfig(epochs=10, schedule=constant_schedule(10, -0.1))


def test_init_state_is_glorot_uniform():
    state = init_state(HeadLayout(HeadMode.BINARY), 10, (30,), seed=0)
    bound = math.sqrt(6.0 / 40)
    assert np.abs(state.weights[0]).max() <= bound
    assert all(not b.any() for b in state.biases)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def test_zero_parameters_give_uniform_heads():
    layout = HeadLayout(HeadMode.MULTITASK, n_species=5)
    state = init_state(layout, 4, (3,), seed=0)
    state.weights = [np.zeros_like(w) for w in state.weights]
    probs = head_probabilities(state, np.ones((2, 4)))
    assert np.allclose(probs["species"], 0.2)
    assert np.allclose(probs["count"], 1 / 12)
    assert np.allclose(probs["attr_moving"], 0.5)


def test_heads_are_normalized_and_match_naive_forward():
    rng = np.random.default_rng(0)
    for _ in range(30):
        state, batch, _ = random_case(rng)
        probs = head_probabilities(state, batch.features)
        for name, p in probs.items():
            assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
        for i, x in enumerate(batch.features):
            oracle = naive_heads(state, x)
            for name, p in probs.items():
                assert np.max(np.abs(p[i] - np.array(oracle[name]))) <= 1e-10


def test_forward_returns_typed_predictions():
    x = np.ones(3)
    assert isinstance(forward(init_state(HeadLayout(HeadMode.BINARY), 3, (4,), 0), x), BinaryPrediction)
    assert isinstance(forward(init_state(HeadLayout(HeadMode.ONE_STAGE, 4), 3, (4,), 0), x), OneStagePrediction)
    pred = forward(init_state(HeadLayout(HeadMode.MULTITASK, 4), 3, (4,), 0), x)
    assert isinstance(pred, MultiTaskPrediction)
    assert pred.attribute_probs.shape == (6,)


def test_predict_batch_is_stateless():
    state = init_state(HeadLayout(HeadMode.ONE_STAGE, 3), 4, (5,), seed=1)
    X = np.random.default_rng(1).normal(size=(6, 4))
    preds = predict_batch(state, X)
    assert np.allclose(forward(state, X[2]).class_probs, preds[2].class_probs)

    halves = predict_batch(state, X[:2]) + predict_batch(state, X[2:])
    assert all(np.allclose(a.class_probs, b.class_probs) for a, b in zip(halves, preds))

    perm = np.array([5, 3, 1, 0, 2, 4])
    permuted = predict_batch(state, X[perm])
    assert all(np.allclose(permuted[i].class_probs, preds[p].class_probs) for i, p in enumerate(perm))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

TAX = Taxonomy(("a", "b", "c"))


def test_perfect_prediction_has_zero_loss():
    assert loss(BinaryPrediction(0.0, 1.0), LabelSet.empty_label()) == pytest.approx(0.0, abs=1e-9)
    onehot = np.eye(4)[1]
    label = LabelSet(False, TAX.by_id(1), count_to_bin(1))
    assert loss(OneStagePrediction(onehot), label) == pytest.approx(0.0, abs=1e-9)


def test_uniform_prediction_costs_log_k():
    label = LabelSet(False, TAX.by_id(2), count_to_bin(3))
    assert loss(OneStagePrediction(np.full(4, 0.25)), label) == pytest.approx(math.log(4))

    multi = MultiTaskPrediction(np.full(3, 1 / 3), np.full(12, 1 / 12), np.full(6, 0.5))
    with_attrs = LabelSet(False, TAX.by_id(0), count_to_bin(1), AttributeSet(eating=True))
    assert loss(multi, with_attrs) == pytest.approx(math.log(3) + math.log(12) + 6 * math.log(2))
    # Missing attributes are masked out of the loss.
    no_attrs = LabelSet(False, TAX.by_id(0), count_to_bin(1))
    assert loss(multi, no_attrs) == pytest.approx(math.log(3) + math.log(12))


def test_weighted_loss_scales_by_class_weight():
    weights = class_weights([30, 10])
    pred = BinaryPrediction(0.3, 0.7)
    label = LabelSet(False, TAX.by_id(0), count_to_bin(1))
    ratio = loss(pred, label, weights) / loss(pred, label)
    assert ratio == pytest.approx(weights.weights[0])


def test_multitask_targets_need_species():
    with pytest.raises(DataError):
        encode_targets(HeadLayout(HeadMode.MULTITASK, 3), [LabelSet.empty_label()])


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def test_gradients_match_finite_differences():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        state, batch, opts = random_case(rng)
        grads = backward(state, batch, opts)
        num_w, num_b = numerical_gradients(state, batch, opts, eps=1e-6)
        for a, n in zip(grads.weights + grads.biases, num_w + num_b):
            assert rel_err(a, n).max() <= 1e-4


def test_two_layer_reference_case():
    layout = HeadLayout(HeadMode.ONE_STAGE, n_species=2)
    state = init_state(layout, 5, (4,), seed=9)
    rng = np.random.default_rng(9)
    batch = Batch(rng.normal(size=(8, 5)), {"one_stage": rng.integers(0, 3, size=8)})
    grads = backward(state, batch)
    num_w, num_b = numerical_gradients(state, batch)
    for a, n in zip(grads.weights + grads.biases, num_w + num_b):
        assert rel_err(a, n).max() <= 1e-4


def test_gradient_clamp_bounds_output_layer():
    rng = np.random.default_rng(5)
    for _ in range(20):
        state, batch, _ = random_case(rng)
        batch = Batch(batch.features * 100.0, batch.targets)
        grads = backward(state, batch, LossOptions(grad_clamp=0.01))
        assert np.abs(grads.weights[-1]).max() <= 0.01
        assert np.abs(grads.biases[-1]).max() <= 0.01


def test_no_learning_signal_gives_near_zero_gradients():
    layout = HeadLayout(HeadMode.BINARY)
    state = init_state(layout, 3, (4,), seed=0)
    state.weights = [np.zeros_like(w) for w in state.weights]
    state.biases[-1] = np.array([50.0, -50.0])
    batch = Batch(np.ones((4, 3)), {"binary": np.zeros(4, dtype=np.int64)})
    grads = backward(state, batch)
    assert max(np.abs(g).max() for g in grads.weights + grads.biases) <= 1e-12


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def test_fit_separates_two_classes():
    train, test = separable_data()
    layout = HeadLayout(HeadMode.MULTITASK, n_species=2)
    pipeline = FeaturePipeline.fit(train.feature_matrix())
    state = init_state(layout, pipeline.output_dim, (16,), seed=3)
    fit(state, train, test, quick_config(), pipeline=pipeline)
    assert len(state.history) == 20
    assert state.best.accuracy >= 0.95
    assert state.best.accuracy == max(r.test_accuracy for r in state.history)


def test_zero_learning_rate_freezes_parameters():
    train, test = separable_data(seed=1, n_events=60)
    layout = HeadLayout(HeadMode.ONE_STAGE, n_species=2)
    state = init_state(layout, train.feature_dim, (8,), seed=0)
    before = [w.copy() for w in state.weights]
    initial = primary_accuracy(state, make_batch(layout, test))
    fit(state, train, test, quick_config(epochs=3, schedule=constant_schedule(3, 0.0)))
    assert all(np.array_equal(a, b) for a, b in zip(before, state.weights))
    assert all(r.test_accuracy == initial for r in state.history)


def test_fit_is_deterministic():
    train, test = separable_data(seed=2, n_events=80)
    layout = HeadLayout(HeadMode.ONE_STAGE, n_species=2)
    runs = []
    for _ in range(2):
        state = init_state(layout, train.feature_dim, (8,), seed=4)
        fit(state, train, test, quick_config(epochs=3, schedule=constant_schedule(3, 0.05)))
        runs.append(state.weights)
    assert all(np.array_equal(a, b) for a, b in zip(*runs))


@pytest.mark.parametrize("method", ["weighted_loss", "oversample", "emphasis"])
def test_fit_with_imbalance_methods(method):
    train, test = separable_data(seed=3, n_events=80)
    layout = HeadLayout(HeadMode.ONE_STAGE, n_species=2)
    state = init_state(layout, train.feature_dim, (8,), seed=0)
    fit(state, train, test, quick_config(epochs=2, schedule=constant_schedule(2, 0.05),
                                         imbalance=ImbalanceMethod(method), grad_clamp=0.01,
                                         emphasis_p1=1.0))
    assert state.epoch == 2
    extra = sum(r.extra_batches for r in state.history)
    assert (extra > 0) == (method == "emphasis")


def test_emphasis_misses_carry_into_the_next_epoch():
    layout = HeadLayout(HeadMode.BINARY)
    state = init_state(layout, 3, (4,), seed=0)
    state.weights = [np.zeros_like(w) for w in state.weights]
    state.biases = [np.zeros_like(b) for b in state.biases]
    # Uniform heads rank class 0 first, so every target of 1 is a top-1 miss.
    data = Batch(np.ones((8, 3)), {"binary": np.ones(8, dtype=np.int64)})
    cfg = quick_config(epochs=2, epoch_size=1, batch_size=8, schedule=constant_schedule(2, 0.0),
                       imbalance=ImbalanceMethod.EMPHASIS, emphasis_p1=1.0, emphasis_p5=1.0)
    fit(state, data, data, cfg)
    assert [r.extra_batches for r in state.history] == [0, 1]


@pytest.mark.parametrize("mode", MODES)
def test_heads_stay_normalized_after_training(mode):
    train, test = separable_data(seed=5, n_events=80)
    layout = HeadLayout(mode, n_species=2)
    pipeline = FeaturePipeline.fit(train.feature_matrix())
    state = init_state(layout, pipeline.output_dim, (8,), seed=1)
    fit(state, train, test, quick_config(epochs=3, schedule=constant_schedule(3, 0.05)), pipeline=pipeline)
    probs = head_probabilities(state, pipeline.transform(test.feature_matrix()))
    assert set(probs) == {name for name, _ in layout.heads()}
    for name, p in probs.items():
        assert np.all(p >= 0.0)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9), name


def test_divergence_names_epoch_and_batch():
    layout = HeadLayout(HeadMode.BINARY)
    state = init_state(layout, 3, (4,), seed=0)
    bad = Batch(np.full((4, 3), np.inf), {"binary": np.array([0, 1, 0, 1])})
    with pytest.raises(TrainingError) as e:
        fit(state, bad, bad, quick_config(epochs=1, schedule=constant_schedule(1, 0.05), batch_size=2))
    assert (e.value.epoch, e.value.batch) == (1, 0)


def test_checkpoint_round_trip(tmp_path):
    train, test = separable_data(seed=4, n_events=60)
    layout = HeadLayout(HeadMode.MULTITASK, n_species=2)
    pipeline = FeaturePipeline.fit(train.feature_matrix())
    cfg = quick_config(epochs=2, schedule=constant_schedule(2, 0.05))
    state = init_state(layout, pipeline.output_dim, (8,), seed=0)
    fit(state, train, test, cfg, pipeline=pipeline)

    path = save_checkpoint(Checkpoint(state, cfg, {"member": 0}, pipeline), tmp_path / "m.ckpt.json")
    loaded = load_checkpoint(path)
    assert loaded.config == cfg
    assert loaded.metadata == {"member": 0}
    assert loaded.state.best.epoch == state.best.epoch
    X = pipeline.transform(test.feature_matrix())
    a, b = head_probabilities(state, X), head_probabilities(loaded.state, loaded.pipeline.transform(test.feature_matrix()))
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_checkpoint_keeps_format_and_tool_versions_apart(tmp_path):
    layout = HeadLayout(HeadMode.BINARY)
    state = init_state(layout, 3, (4,), seed=0)
    path = save_checkpoint(Checkpoint(state, quick_config()), tmp_path / "fresh.ckpt.json")
    data = json.loads(path.read_text(encoding="utf-8"))
    assert data["format_version"] == 1
    assert data["version"] == TOOL_VERSION
    loaded = load_checkpoint(path)
    assert loaded.state.layout == layout
    assert all(np.array_equal(a, b) for a, b in zip(state.weights, loaded.state.weights))


def test_load_rejects_foreign_files(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "something-else", "format_version": 1}', encoding="utf-8")
    with pytest.raises(DataError):
        load_checkpoint(path)
