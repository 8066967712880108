"""Mini-batch training and evaluation loops."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data.dataset import ShapeDataset
from .data.metrics import accuracy, miou, per_category_iou
from .geometry import AugmentationSpec, augment_coords
from .network import SOCNNConfig, forward_logits, predict_with_voting
from .numerics import tensor as T
from .numerics.layers import EVAL, Mode
from .numerics.optim import AdamState, adam_step, bn_momentum_at, cosine_annealing_lr
from .numerics.params import ParamStore


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    lr_min: float = 0.0
    seed: int = 0
    augment: bool = True
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    bn_momentum: float = 0.9
    bn_momentum_every: int = 30

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm needs two samples)")
        if self.lr < 0 or self.lr_min < 0 or self.lr_min > self.lr:
            raise ValueError("need lr >= lr_min >= 0")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must lie in [0, 1)")
        if self.bn_momentum_every < 1:
            raise ValueError("bn_momentum_every must be at least 1")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float
    lr: float


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a trailing batch of one sample cannot be batch-normalised
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches.pop()
    return batches


def train_epoch(store: ParamStore, opt: AdamState, dataset: ShapeDataset, config: SOCNNConfig,
                train_config: TrainConfig, epoch: int, rng: np.random.Generator) -> EpochMetrics:
    """One pass over ``dataset`` in shuffled mini-batches.

    The learning rate is the cosine-annealed value for ``epoch`` and stays
    fixed within the epoch.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    lr = cosine_annealing_lr(epoch, train_config.epochs, train_config.lr, train_config.lr_min)
    mode = Mode.train(rng, bn_momentum_at(epoch, train_config.bn_momentum, train_config.bn_momentum_every))
    seg = dataset.task == "segmentation"
    losses, weights, correct, seen = [], [], 0, 0
    for idx in _batches(len(dataset), train_config.batch_size, rng):
        coords = dataset.coords[idx]
        if train_config.augment:
            coords = augment_coords(coords, train_config.augmentation, rng)
        target = dataset.point_labels[idx] if seg else dataset.labels[idx]
        store.zero_grad()
        logits = forward_logits(store, config, coords, dataset.task, mode, categories=dataset.labels[idx])
        loss = T.cross_entropy(logits, target)
        loss.backward()
        adam_step(opt, store, lr)
        losses.append(float(loss.data))
        weights.append(len(idx))
        correct += int((logits.data.argmax(axis=-1) == target).sum())
        seen += target.size
    return EpochMetrics(epoch, float(np.average(losses, weights=weights)), correct / seen, lr)


def restricted_part_predictions(logits: np.ndarray, categories, parts_per_category) -> np.ndarray:
    """Per-point argmax over only the parts that belong to each shape's category."""
    logits = np.asarray(logits)
    masked = np.full_like(logits, -np.inf)
    for b, c in enumerate(np.asarray(categories).reshape(-1)):
        parts = parts_per_category[int(c)]
        masked[b][:, parts] = logits[b][:, parts]
    return masked.argmax(axis=-1)


def predict_logits(store: ParamStore, config: SOCNNConfig, dataset: ShapeDataset,
                   batch_size: int = 32) -> np.ndarray:
    out = []
    for lo in range(0, len(dataset), batch_size):
        sl = slice(lo, lo + batch_size)
        out.append(forward_logits(store, config, dataset.coords[sl], dataset.task, EVAL,
                                  categories=dataset.labels[sl]).data)
    return np.concatenate(out)


def evaluate(store: ParamStore, config: SOCNNConfig, dataset: ShapeDataset, votes: int = 1,
             aug_spec: AugmentationSpec | None = None, seed: int = 0, batch_size: int = 32) -> dict:
    """Eval-mode metrics.

    Classification returns ``accuracy`` and per-class accuracy; with
    ``votes > 1`` (or an ``aug_spec``) each cloud's prediction is the argmax of
    vote-averaged probabilities, cloud ``i`` using augmentation seed
    ``seed + i``. Segmentation returns ``miou`` and per-category IoU.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if dataset.task == "segmentation":
        logits = predict_logits(store, config, dataset, batch_size)
        preds = restricted_part_predictions(logits, dataset.labels, dataset.parts_per_category)
        return {
            "miou": miou(preds, dataset.point_labels, dataset.parts_per_category, dataset.labels),
            "per_category": per_category_iou(preds, dataset.point_labels, dataset.labels,
                                             dataset.parts_per_category),
            "point_accuracy": accuracy(preds, dataset.point_labels),
            "predictions": preds,
        }
    if votes == 1 and aug_spec is None:
        probs = _softmax(predict_logits(store, config, dataset, batch_size))
    else:
        probs = np.stack([predict_with_voting(store, config, c, aug_spec, votes, seed=seed + i)
                          for i, c in enumerate(dataset.coords)])
    preds = probs.argmax(axis=-1)
    per_class = {int(c): accuracy(preds[dataset.labels == c], dataset.labels[dataset.labels == c])
                 for c in np.unique(dataset.labels)}
    return {"accuracy": accuracy(preds, dataset.labels), "per_class": per_class,
            "predictions": preds, "probabilities": probs}


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def fit(store: ParamStore, config: SOCNNConfig, train_set: ShapeDataset, train_config: TrainConfig,
        on_epoch=None) -> list[EpochMetrics]:
    """Train for ``train_config.epochs`` epochs with Adam; returns per-epoch metrics.

    ``on_epoch(metrics)`` is called after each epoch (for logging).
    """
    opt = AdamState(base_lr=train_config.lr if train_config.lr > 0 else 1.0)
    rng = np.random.default_rng(train_config.seed)
    history = []
    for epoch in range(train_config.epochs):
        m = train_epoch(store, opt, train_set, config, train_config, epoch, rng)
        if not math.isfinite(m.loss):
            raise FloatingPointError(f"training diverged at epoch {epoch} (loss {m.loss})")
        history.append(m)
        if on_epoch is not None:
            on_epoch(m)
    return history
