import math

import numpy as np
import pytest

from socnn.data import ShapeDataset, make_classification_dataset, make_segmentation_dataset
from socnn.geometry import AugmentationSpec
from socnn.network import SOCNNConfig, forward_logits, init_socnn, predict_with_voting
from socnn.numerics import Mode
from socnn.numerics import tensor as T
from socnn.numerics.optim import AdamState
from socnn.training import (TrainConfig, _batches, evaluate, fit, restricted_part_predictions,
                            train_epoch)


def _tiny(**kw):
    return SOCNNConfig.tiny(num_points=64, k=8, **kw)


def test_zero_learning_rate_leaves_parameters_unchanged():
    data = make_classification_dataset(2, 64, seed=1)
    config = _tiny(num_classes=6)
    store = init_socnn(config, seed=0)
    before = {n: t.data.copy() for n, t in store.params.items()}
    fit(store, config, data, TrainConfig(epochs=1, batch_size=4, lr=0.0))
    for n, t in store.params.items():
        assert np.array_equal(t.data, before[n]), n


def test_initial_loss_is_near_log_of_class_count():
    data = make_classification_dataset(20, 64, seed=2)
    for c in (4, 6):
        config = _tiny(num_classes=c)
        subset = data.subset(np.flatnonzero(data.labels < c))
        losses = []
        for seed in range(3):
            store = init_socnn(config, seed=seed)
            logits = forward_logits(store, config, subset.coords)
            losses.append(float(T.cross_entropy(logits, subset.labels).data))
        assert abs(np.median(losses) - math.log(c)) <= 0.2, losses


def test_single_sample_segmentation_loss_strictly_decreases():
    data = make_segmentation_dataset(1, 64, seed=7).subset([0])
    config = _tiny(num_classes=3, num_parts=data.num_parts)
    curves = []
    for seed in range(3):
        store = init_socnn(config, seed=seed, classification=False)
        history = fit(store, config, data, TrainConfig(epochs=21, augment=False, seed=seed))
        curves.append([m.loss for m in history])
    median = np.median(curves, axis=0)
    assert np.all(np.diff(median) < 0), median


def test_training_reduces_loss():
    data = make_classification_dataset(6, 64, seed=3)
    config = _tiny(num_classes=6)
    store = init_socnn(config, seed=1)
    history = fit(store, config, data, TrainConfig(epochs=12, batch_size=12, lr=3e-3, seed=1))
    assert history[-1].loss < history[0].loss
    assert [m.epoch for m in history] == list(range(12))
    assert history[0].lr == pytest.approx(3e-3)
    assert history[-1].lr < history[0].lr


def test_training_is_deterministic_in_seed():
    data = make_classification_dataset(2, 64, seed=4)
    config = _tiny(num_classes=6)
    runs = []
    for _ in range(2):
        store = init_socnn(config, seed=3)
        history = fit(store, config, data, TrainConfig(epochs=2, batch_size=4, seed=5))
        runs.append((history, {n: t.data.copy() for n, t in store.params.items()}))
    assert [m.loss for m in runs[0][0]] == [m.loss for m in runs[1][0]]
    for n in runs[0][1]:
        assert np.array_equal(runs[0][1][n], runs[1][1][n])


def test_empty_dataset_is_rejected():
    config = _tiny(num_classes=6)
    store = init_socnn(config)
    empty = ShapeDataset(np.zeros((0, 64, 3)), np.zeros(0, int))
    with pytest.raises(ValueError):
        train_epoch(store, AdamState(), empty, config, TrainConfig(), 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        evaluate(store, config, empty)


def test_train_config_validation():
    for bad in [dict(epochs=0), dict(batch_size=1), dict(lr=-1.0), dict(lr=1e-3, lr_min=1e-2),
                dict(bn_momentum=1.0)]:
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_batches_cover_every_sample_and_never_hold_one():
    rng = np.random.default_rng(0)
    batches = _batches(33, 32, rng)
    assert [len(b) for b in batches] == [32]
    batches = _batches(34, 32, rng)
    assert sorted(np.concatenate(batches).tolist()) == list(range(34))
    assert _batches(1, 32, rng)[0].tolist() == [0]


def test_restricted_predictions_stay_inside_the_category():
    logits = np.zeros((2, 3, 4))
    logits[..., 3] = 5.0  # the globally best part belongs to category 1
    logits[0, :, 1] = 1.0
    preds = restricted_part_predictions(logits, [0, 1], {0: [0, 1], 1: [2, 3]})
    assert preds.tolist() == [[1, 1, 1], [3, 3, 3]]


def test_evaluate_classification_matches_plain_forward_and_voting():
    data = make_classification_dataset(2, 64, seed=6)
    config = _tiny(num_classes=6)
    store = init_socnn(config, seed=2)
    result = evaluate(store, config, data)
    logits = forward_logits(store, config, data.coords).data
    assert np.array_equal(result["predictions"], logits.argmax(axis=-1))
    spec = AugmentationSpec(seed=0)
    voted = evaluate(store, config, data, votes=3, aug_spec=spec, seed=10)
    expect = np.stack([predict_with_voting(store, config, c, spec, 3, seed=10 + i)
                       for i, c in enumerate(data.coords)])
    assert np.array_equal(voted["probabilities"], expect)
    assert 0.0 <= voted["accuracy"] <= 1.0


def test_evaluate_segmentation_reports_miou():
    data = make_segmentation_dataset(2, 64, seed=8)
    config = _tiny(num_classes=3, num_parts=data.num_parts)
    store = init_socnn(config, seed=0, classification=False)
    result = evaluate(store, config, data)
    assert 0.0 <= result["miou"] <= 1.0
    assert set(result["per_category"]) == {0, 1, 2}
    assert result["predictions"].shape == data.point_labels.shape
