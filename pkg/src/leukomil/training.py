"""Weakly-supervised training of the bag classifier.

One optimiser step per bag: draw up to ``bag_size_cap`` patches from a
sample, augment them, run the bag forward, take the cross-entropy against
the sample label and apply plain SGD.  An internal, stratified validation
split drives early stopping; the weights with the best validation loss are
returned.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, augment_batch, content_streams
from .dataio.manifest import Sample, load_patch
from .model import (
    BackboneConfig,
    ModelParams,
    channel_stats,
    init_params,
    bag_loss,
    predict_inputs,
    prepare,
    score_inputs_batched,
)

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0003
    max_epochs: int = 100
    bag_size_cap: int = 50
    early_stop_patience: int = 10
    validation_fraction: float = 0.15
    tta_replicas: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 0 or self.bag_size_cap < 1 or self.early_stop_patience < 1:
            raise ValueError("max_epochs >= 0, bag_size_cap >= 1 and early_stop_patience >= 1 required")
        if not 0 < self.validation_fraction < 0.5:
            raise ValueError("validation_fraction must be in (0, 0.5)")
        if self.tta_replicas < 0:
            raise ValueError("tta_replicas must be >= 0 (0 disables test-time augmentation)")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainedModel:
    params: ModelParams
    history: list[EpochStats] = field(default_factory=list)
    config: TrainConfig = field(default_factory=TrainConfig)
    stopping_reason: str = "max_epochs"
    best_epoch: int = -1
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def metadata(self) -> dict:
        return {
            "train_config": asdict(self.config),
            "augment_config": asdict(self.augment),
            "stopping_reason": self.stopping_reason,
            "best_epoch": self.best_epoch,
            "epochs_run": len(self.history),
        }


@dataclass
class PreparedBag:
    """A sample with its patches already reduced to network input size."""

    sample_id: str
    label: str
    inputs: np.ndarray  # uint8 [N, s, s, 3]


def stream(seed: int, *keys) -> np.random.Generator:
    """Generator keyed by (seed, *keys); stable across processes and runs."""
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    words += [zlib.crc32(str(k).encode("utf-8")) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(words))


def prepare_samples(samples: Sequence[Sample], side: int,
                    cache: dict | None = None) -> list[PreparedBag]:
    """Load and downscale every patch once.  ``cache`` maps patch keys to inputs."""
    out = []
    for s in samples:
        arrs = []
        for p in s.patches:
            key = (str(p), side) if not isinstance(p, np.ndarray) else None
            if cache is not None and key is not None and key in cache:
                arrs.append(cache[key])
                continue
            arr = prepare(load_patch(p), side)
            if cache is not None and key is not None:
                cache[key] = arr
            arrs.append(arr)
        if not arrs:
            out.append(PreparedBag(s.sample_id, s.label, np.zeros((0, side, side, 3), np.uint8)))
        else:
            out.append(PreparedBag(s.sample_id, s.label, np.stack(arrs)))
    return out


def sample_bag(n_patches: int, cap: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``min(n, cap)`` patches drawn uniformly without replacement, shuffled."""
    if n_patches < 1:
        raise DatasetError("cannot draw a bag from a sample without patches")
    return rng.permutation(n_patches)[:cap]


def stratified_holdout(labels: Sequence[str], fraction: float, rng: np.random.Generator):
    """Split indices into (train, validation), stratified by label.

    Each class with at least two members contributes ``round(fraction * n)``
    members (at least one) to validation and keeps at least one for training.
    """
    labels = list(labels)
    train_idx, val_idx = [], []
    for lab in sorted(set(labels)):
        members = [i for i, l in enumerate(labels) if l == lab]
        members = [members[j] for j in rng.permutation(len(members))]
        k = 0 if len(members) < 2 else min(len(members) - 1, max(1, int(round(fraction * len(members)))))
        val_idx += members[:k]
        train_idx += members[k:]
    return sorted(train_idx), sorted(val_idx)


def _bag_eval(bags: Sequence[PreparedBag], classes: Sequence[str], params: ModelParams):
    losses, correct = [], 0
    for b in bags:
        probs = predict_inputs(list(b.inputs), params).probabilities
        target = classes.index(b.label)
        losses.append(-math.log(max(float(probs[target]), T.CE_EPSILON)))
        correct += int(np.argmax(probs) == target)
    return float(np.mean(losses)), correct / len(bags)


def train(
    samples: Sequence[Sample] | Sequence[PreparedBag],
    classes: Sequence[str],
    config: TrainConfig = TrainConfig(),
    backbone: BackboneConfig = BackboneConfig(),
    augment: AugmentConfig = AugmentConfig(),
    head_widths: Sequence[int] = (256, 64),
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> TrainedModel:
    """Train from sample-level labels only."""
    classes = tuple(classes)
    bags = list(samples)
    if bags and not isinstance(bags[0], PreparedBag):
        bags = prepare_samples(bags, backbone.input_side)
    unknown = sorted({b.label for b in bags} - set(classes))
    if unknown:
        raise DatasetError(f"labels {unknown} not in class list {list(classes)}")
    empty = [b.sample_id for b in bags if len(b.inputs) == 0]
    for sid in empty:
        logger.warning("sample %s has no patches; skipped", sid)
    bags = [b for b in bags if len(b.inputs)]
    present = {b.label for b in bags}
    if len(present) < 2:
        raise DatasetError(f"training needs at least two classes present, found {sorted(present)}")

    params = init_params(classes, backbone, head_widths, seed=config.seed)
    result = TrainedModel(params, [], config, "max_epochs", -1, augment)
    if config.max_epochs == 0:
        return result

    tr_idx, val_idx = stratified_holdout([b.label for b in bags], config.validation_fraction,
                                         stream(config.seed, "holdout"))
    train_bags = [bags[i] for i in tr_idx]
    val_bags = [bags[i] for i in val_idx] or train_bags
    params.input_mean, params.input_std = channel_stats(np.concatenate([b.inputs for b in train_bags]))

    order_rng = stream(config.seed, "order")
    best_loss, best_state, since_best = math.inf, params.state(), 0
    for epoch in range(config.max_epochs):
        losses = []
        for i in order_rng.permutation(len(train_bags)):
            bag = train_bags[i]
            rng = stream(config.seed, "bag", bag.sample_id, epoch)
            chosen = sample_bag(len(bag.inputs), config.bag_size_cap, rng)
            inputs = augment_batch(bag.inputs[chosen], augment, rng)
            with T.Tape() as tape:
                loss, _, _ = bag_loss(inputs, classes.index(bag.label), params)
            value = loss.item()
            if not math.isfinite(value):
                raise T.TrainingError(f"non-finite loss at epoch {epoch} on sample {bag.sample_id!r}")
            tape.backward(loss)
            try:
                T.sgd_step(params.parameters(), config.learning_rate)
            except T.TrainingError as exc:
                raise T.TrainingError(f"epoch {epoch}, sample {bag.sample_id!r}: {exc}") from None
            losses.append(value)
        val_loss, val_acc = _bag_eval(val_bags, classes, params)
        stats = EpochStats(epoch, float(np.mean(losses)), val_loss, val_acc)
        result.history.append(stats)
        logger.info("epoch %d train %.4f val %.4f acc %.3f", epoch, stats.train_loss, val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(stats)
        if val_loss < best_loss:
            best_loss, best_state, since_best = val_loss, params.state(), 0
            result.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                result.stopping_reason = "early_stopping"
                break
    params.load_state(best_state)
    return result


def evaluate_with_tta(
    params: ModelParams,
    bag: PreparedBag | Sample,
    replicas: int,
    rng: np.random.Generator,
    augment: AugmentConfig = AugmentConfig(),
) -> np.ndarray:
    """Mean class probabilities over ``replicas`` augmented copies of the whole bag.

    Each replica draws one key from ``rng``; every patch is then augmented
    from a stream keyed by that value and the patch content, so the result
    keeps the bag-level invariance to patch order and duplication.
    """
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    if not isinstance(bag, PreparedBag):
        bag = prepare_samples([bag], params.backbone.input_side)[0]
    if len(bag.inputs) == 0:
        raise T.EmptyBagError(f"sample {bag.sample_id!r} has no patches")
    total = np.zeros(len(params.classes), dtype=np.float64)
    for _ in range(replicas):
        key = int(rng.integers(0, 2**63))
        inputs = augment_batch(bag.inputs, augment, content_streams(bag.inputs, key))
        total += predict_inputs(list(inputs), params).probabilities
    return (total / replicas).astype(np.float32)


def predict_sample(
    params: ModelParams,
    bag: PreparedBag,
    replicas: int,
    rng: np.random.Generator,
    augment: AugmentConfig = AugmentConfig(),
) -> np.ndarray:
    """Sample probabilities; ``replicas=0`` runs the plain bag forward."""
    if replicas == 0:
        if len(bag.inputs) == 0:
            raise T.EmptyBagError(f"sample {bag.sample_id!r} has no patches")
        return predict_inputs(list(bag.inputs), params).probabilities
    return evaluate_with_tta(params, bag, replicas, rng, augment)


def score_cells_with_tta(
    params: ModelParams,
    inputs: np.ndarray,
    replicas: int,
    rng: np.random.Generator,
    augment: AugmentConfig = AugmentConfig(),
) -> np.ndarray:
    """Cell-level probabilities ``[N, C]`` averaged over augmented replicas.

    ``replicas=0`` scores the un-augmented inputs.
    """
    if replicas == 0:
        return score_inputs_batched(inputs, params)
    total = np.zeros((len(inputs), len(params.classes)), dtype=np.float64)
    for _ in range(replicas):
        key = int(rng.integers(0, 2**63))
        total += score_inputs_batched(augment_batch(inputs, augment, content_streams(inputs, key)), params)
    return (total / replicas).astype(np.float32)
