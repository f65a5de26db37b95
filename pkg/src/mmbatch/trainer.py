"""Training and validation loops with best-model tracking and rollback.

Every stage runs the same epoch loop: a Training phase that steps the
optimizer per batch, then a Validation phase whose sample-weighted accuracy
is compared with the best so far. A strict improvement stores the tracked
parameters; anything else restores the stored ones before the next epoch
(when ``rollback`` is on).
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .augment import AugmentPolicy, RngStream
from .data import Batch, DataLoader, ImageStore, Labeler, Manifest, Vocabulary, filter_titles, make_batches
from .errors import ConfigError, ShapeError, TrainingError
from .models import (
    FeatureExtractor,
    Linear,
    Module,
    MultimodalHead,
    TextClassifier,
    fuse,
    predict,
)
from .optim import Adam, SGDMomentum, StepLR, lr_at_epoch
from .tensor import Tape, Tensor, softmax_cross_entropy

log = logging.getLogger(__name__)

TRAIN_PHASE = 0
VALIDATION_PHASE = 1


@dataclass
class TrainConfig:
    epochs: int = 2
    batch_size: int = 64
    lr: float = 5e-4
    momentum: float = 0.9
    step_size: int = 7
    gamma: float = 0.1
    seed: int = 0
    detect_word: Optional[str] = None
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    augment_in_validation: bool = False
    rollback: bool = True
    freeze_backbone: bool = True
    scheduler_per_batch: bool = False
    shuffle: bool = True
    prefetch: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")

    def validate(self) -> "TrainConfig":
        """Enforce the run-level contract: at least one epoch, positive rate."""
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        return self

    @property
    def schedule(self) -> StepLR:
        return StepLR(self.lr, self.step_size, self.gamma)

    @classmethod
    def heavy_backbone(cls, **overrides) -> "TrainConfig":
        """Profile for large backbones: batches of 20 over three epochs."""
        return cls(**{"batch_size": 20, "epochs": 3, **overrides})


def weighted_accuracy(accuracies: Sequence[float], counts: Sequence[int]) -> float:
    """Sample-weighted mean ``sum(acc_j * n_j) / sum(n_j)``.

    When every ``acc_j * n_j`` is an integer count the ratio of integer sums
    is returned, so the result matches ``correct / total`` bit for bit.
    """
    if len(accuracies) != len(counts):
        raise ValueError(f"{len(accuracies)} accuracies for {len(counts)} counts")
    if not counts:
        raise ValueError("weighted_accuracy of an empty phase")
    if min(counts) < 1:
        raise ValueError("batch counts must be >= 1")
    products = [a * n for a, n in zip(accuracies, counts)]
    total = sum(counts)
    rounded = [round(p) for p in products]
    if all(abs(p - r) < 1e-9 for p, r in zip(products, rounded)):
        return sum(rounded) / total
    return math.fsum(products) / total


@dataclass
class PhaseStats:
    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)
    counts: list = field(default_factory=list)
    indices: list = field(default_factory=list, repr=False)

    def add(self, loss: float, accuracy: float, batch: Batch) -> None:
        self.losses.append(float(loss))
        self.accuracies.append(float(accuracy))
        self.counts.append(len(batch))
        self.indices.extend(batch.indices)

    @property
    def count(self) -> int:
        return sum(self.counts)

    @property
    def accuracy(self) -> float:
        return weighted_accuracy(self.accuracies, self.counts)

    @property
    def loss(self) -> float:
        return math.fsum(l * n for l, n in zip(self.losses, self.counts)) / self.count


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train: PhaseStats
    validation: PhaseStats
    best_accuracy: float
    improved: bool
    rolled_back: bool


class BestTracker:
    """Best validation accuracy so far and a snapshot of the matching parameters."""

    def __init__(self, modules: Mapping[str, Module]):
        self.modules = dict(modules)
        self.accuracy = 0.0
        self.state = self._snapshot()

    def _snapshot(self) -> dict[str, np.ndarray]:
        state = {}
        for prefix, mod in self.modules.items():
            for k, v in mod.state_dict().items():
                state[f"{prefix}.{k}"] = v
        return state

    def update(self, accuracy: float) -> bool:
        if self.accuracy < accuracy:
            self.accuracy = accuracy
            self.state = self._snapshot()
            return True
        return False

    def restore(self) -> None:
        for prefix, mod in self.modules.items():
            n = len(prefix) + 1
            mod.load_state_dict({k[n:]: v for k, v in self.state.items() if k.startswith(prefix + ".")})


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    def add(self, true: Sequence[int], pred: Sequence[int]) -> None:
        np.add.at(self.counts, (np.asarray(true), np.asarray(pred)), 1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return int(np.trace(self.counts)) / self.total


class MetricsWriter:
    """JSON-lines metrics sink: one record per (stage, epoch, phase)."""

    def __init__(self, path=None, wall_time: bool = True):
        self.path = path
        self.wall_time = wall_time
        self.records: list[dict] = []
        self._t0 = time.perf_counter()
        if path is not None:
            open(path, "w").close()

    def write(self, record: dict) -> None:
        rec = dict(record)
        if self.wall_time:
            rec["wall_time"] = round(time.perf_counter() - self._t0, 6)
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


# --- models as batch -> logits callables ----------------------------------------

class ImageModel:
    """Backbone followed by a unimodal classification head."""

    def __init__(self, backbone: FeatureExtractor, head: Linear):
        self.backbone = backbone
        self.head = head

    def logits(self, batch: Batch) -> Tensor:
        return self.head(self.backbone.features(Tensor._wrap(batch.images)))


class MultimodalModel:
    """Backbone features, standardized and fused with auxiliary inputs, then the head."""

    def __init__(self, backbone: FeatureExtractor, aux, head: MultimodalHead):
        width = 0 if aux is None else aux.width
        if head.d_img != backbone.d_out or head.d_extra != width:
            raise ShapeError(
                f"head expects {head.d_img}+{head.d_extra} inputs, "
                f"backbone gives {backbone.d_out} and aux gives {width}"
            )
        self.backbone = backbone
        self.aux = aux
        self.head = head

    def info(self, batch: Batch) -> Optional[np.ndarray]:
        return None if self.aux is None else self.aux(batch.records)

    def logits(self, batch: Batch) -> Tensor:
        feats = self.head.standardize(self.backbone.features(Tensor._wrap(batch.images)))
        return self.head(fuse(feats, self.info(batch)))


class TextModel:
    def __init__(self, classifier: TextClassifier, vocab: Vocabulary):
        self.classifier = classifier
        self.vocab = vocab

    def logits(self, batch: Batch) -> Tensor:
        ids = [self.vocab.encode(r.aux) or [Vocabulary.UNK] for r in batch.records]
        return self.classifier.logits(ids)


# --- the epoch loop --------------------------------------------------------------

class EpochLoop:
    """Two-phase epochs with best tracking; subclasses supply the model."""

    stage = "train"

    def __init__(
        self,
        model,
        tracked: Mapping[str, Module],
        optimizer,
        train_loader: DataLoader,
        val_loader: DataLoader,
        config: TrainConfig,
        metrics: Optional[MetricsWriter] = None,
        step_hook: Optional[Callable[[int, int], None]] = None,
    ):
        self.model = model
        self.tracked = dict(tracked)
        self.optimizer = optimizer
        self.train_loader = train_loader
        self.val_loader = val_loader
        self.config = config
        self.metrics = metrics
        self.step_hook = step_hook
        self.tracker = BestTracker(self.tracked)
        self.history: list[EpochStats] = []
        self._step = 0

    def _lr(self, epoch: int) -> float:
        if self.config.scheduler_per_batch:
            return lr_at_epoch(self.config.schedule, self._step)
        return lr_at_epoch(self.config.schedule, epoch)

    def run_phase(self, epoch: int, training: bool) -> PhaseStats:
        loader = self.train_loader if training else self.val_loader
        stats = PhaseStats()
        for j, batch in enumerate(loader.epoch(epoch)):
            try:
                if training:
                    self.optimizer.lr = self._lr(epoch)
                    with Tape() as tape:
                        logits = self.model.logits(batch)
                        loss = softmax_cross_entropy(logits, batch.labels)
                    self._check_finite(loss, logits, epoch, j)
                    self.optimizer.zero_grad()
                    tape.backward(loss)
                    self.optimizer.step()
                    self._step += 1
                    if self.step_hook is not None:
                        self.step_hook(epoch, j)
                else:
                    logits = self.model.logits(batch)
                    loss = softmax_cross_entropy(logits, batch.labels)
                    self._check_finite(loss, logits, epoch, j)
            except ShapeError as exc:
                raise ShapeError(f"epoch {epoch} batch {j}: {exc}") from exc
            correct = int((predict(logits) == batch.labels).sum())
            stats.add(loss.item(), correct / len(batch), batch)
        return stats

    def _check_finite(self, loss: Tensor, logits: Tensor, epoch: int, j: int) -> None:
        if not np.isfinite(loss.item()):
            raise TrainingError(
                f"non-finite loss {loss.item()} at epoch {epoch} batch {j} "
                f"(max |logit| {float(np.abs(logits.data).max())})"
            )

    def train_phase(self, epoch: int) -> PhaseStats:
        return self.run_phase(epoch, training=True)

    def validation_phase(self, epoch: int) -> PhaseStats:
        return self.run_phase(epoch, training=False)

    def run(self) -> list[EpochStats]:
        for epoch in range(self.config.epochs):
            lr = self._lr(epoch)
            train = self.train_phase(epoch)
            self._log(epoch, "train", train, lr)
            val = self.validation_phase(epoch)
            self._log(epoch, "validation", val, lr)
            improved = self.tracker.update(val.accuracy)
            rolled_back = False
            if not improved and self.config.rollback:
                self.tracker.restore()
                rolled_back = True
            self.history.append(EpochStats(epoch, lr, train, val, self.tracker.accuracy, improved, rolled_back))
            log.info("%s epoch %d: train acc %.4f, val acc %.4f, best %.4f%s", self.stage, epoch,
                     train.accuracy, val.accuracy, self.tracker.accuracy, " (rollback)" if rolled_back else "")
        # the returned parameters are always the best ones seen
        self.tracker.restore()
        return self.history

    def _log(self, epoch: int, phase: str, stats: PhaseStats, lr: float) -> None:
        if self.metrics is None:
            return
        self.metrics.write({
            "stage": self.stage, "epoch": epoch, "phase": phase, "loss": stats.loss,
            "accuracy": stats.accuracy, "samples": stats.count, "lr": lr,
        })


def _loaders(manifest, config, labeler, store, stream_factory, with_images=True):
    val_policy = config.policy if config.augment_in_validation else config.policy.with_mode("none")
    common = dict(labeler=labeler, seed=config.seed, store=store, prefetch=config.prefetch,
                  stream_factory=stream_factory, images=with_images)
    train = DataLoader(manifest, "train", config.batch_size, config.policy, shuffle=config.shuffle,
                       phase=TRAIN_PHASE, **common)
    val = DataLoader(manifest, "validation", config.batch_size, val_policy, phase=VALIDATION_PHASE, **common)
    if train.num_samples() == 0:
        raise ValueError("training split is empty")
    if val.num_samples() == 0 and config.epochs > 0:
        raise ValueError("validation split is empty")
    return train, val


def _named_params(modules: Mapping[str, Module]) -> dict:
    return {f"{p}.{k}": t for p, m in modules.items() for k, t in m.parameters().items() if t.requires_grad}


class UnimodalTrainer(EpochLoop):
    stage = "pretrain_image"

    def __init__(self, backbone: FeatureExtractor, head: Linear, manifest: Manifest, config: TrainConfig, *,
                 labeler=None, store=None, stream_factory=RngStream, metrics=None, step_hook=None):
        labeler = labeler or Labeler.from_manifest(manifest, config.detect_word)
        train, val = _loaders(manifest, config, labeler, store, stream_factory)
        backbone.set_trainable(True)
        head.set_trainable(True)
        tracked = {"backbone": backbone, "head": head}
        opt = SGDMomentum(_named_params(tracked), config.lr, config.momentum)
        super().__init__(ImageModel(backbone, head), tracked, opt, train, val, config, metrics, step_hook)


class MultimodalTrainer(EpochLoop):
    stage = "train_mm"

    def __init__(self, backbone: FeatureExtractor, aux, head: MultimodalHead, manifest: Manifest,
                 config: TrainConfig, *, labeler=None, store=None, stream_factory=RngStream,
                 metrics=None, step_hook=None, fit_feature_stats: bool = True):
        labeler = labeler or Labeler.from_manifest(manifest, config.detect_word)
        store = store or ImageStore(manifest)
        train, val = _loaders(manifest, config, labeler, store, stream_factory)
        model = MultimodalModel(backbone, aux, head)
        backbone.set_trainable(not config.freeze_backbone)
        head.set_trainable(True)
        if fit_feature_stats:
            mean, std = feature_statistics(backbone, manifest, "train", config.policy, config.batch_size, store)
            head.set_feature_stats(mean, std)
        tracked = {"head": head} if config.freeze_backbone else {"backbone": backbone, "head": head}
        opt = SGDMomentum(_named_params(tracked), config.lr, config.momentum)
        super().__init__(model, tracked, opt, train, val, config, metrics, step_hook)


def feature_statistics(backbone: FeatureExtractor, manifest: Manifest, split: str, policy: AugmentPolicy,
                       batch_size: int = 64, store=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and std of un-augmented backbone features over a split."""
    loader = DataLoader(manifest, split, batch_size, policy.with_mode("none"), labeler=lambda r: 0, store=store)
    feats = [backbone.features(Tensor._wrap(b.images)).data.astype(np.float64) for b in loader.epoch(0)]
    allf = np.concatenate(feats)
    return allf.mean(axis=0).astype(np.float32), allf.std(axis=0).astype(np.float32)


def pretrain_unimodal(backbone: FeatureExtractor, head: Linear, manifest: Manifest, config: TrainConfig,
                      **kwargs) -> FeatureExtractor:
    """Fine-tune the backbone with a temporary classification head on the images alone."""
    if not manifest.indices("train"):
        raise ValueError("training split is empty")
    if config.epochs == 0:
        return backbone
    UnimodalTrainer(backbone, head, manifest, config, **kwargs).run()
    return backbone


def train_multimodal(backbone: FeatureExtractor, aux, head: MultimodalHead, manifest: Manifest,
                     config: TrainConfig, **kwargs) -> tuple[MultimodalHead, list[EpochStats]]:
    """Train the fusion head; returns the best head and the per-epoch history."""
    trainer = MultimodalTrainer(backbone, aux, head, manifest, config, **kwargs)
    history = trainer.run()
    return head, history


# --- text classifier --------------------------------------------------------------

@dataclass
class TextTrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0


def train_text_classifier(classifier: TextClassifier, vocab: Vocabulary, manifest: Manifest,
                          labeler: Callable, config: TextTrainConfig = TextTrainConfig(),
                          metrics: Optional[MetricsWriter] = None) -> list[float]:
    """Adam + cross-entropy on encoded training titles; returns per-epoch mean loss.

    Training records with titles shorter than two characters are skipped.
    """
    kept, dropped = filter_titles(manifest.records)
    if dropped:
        log.info("dropped %d training records with degenerate titles", len(dropped))
    manifest = manifest.replace_records(kept)
    records = manifest.records
    encoded = {i: vocab.encode(records[i].aux) or [Vocabulary.UNK] for i in manifest.indices("train")}
    labels = {i: labeler(records[i]) for i in encoded}
    opt = Adam(classifier.parameters(), lr=config.lr)
    losses = []
    for epoch in range(config.epochs):
        total, seen = 0.0, 0
        for batch in make_batches(manifest, "train", config.batch_size, True, config.seed, epoch):
            with Tape() as tape:
                loss = softmax_cross_entropy(classifier.logits([encoded[i] for i in batch]),
                                             [labels[i] for i in batch])
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            total += loss.item() * len(batch)
            seen += len(batch)
        losses.append(total / seen)
        if metrics is not None:
            metrics.write({"stage": "train_text", "epoch": epoch, "phase": "train",
                           "loss": losses[-1], "samples": seen, "lr": config.lr})
    return losses


# --- evaluation -------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    confusion: ConfusionMatrix
    loss: float


def evaluate(model, manifest: Manifest, split: str, *, labeler, num_classes: Optional[int] = None,
             policy: AugmentPolicy = AugmentPolicy(), batch_size: int = 64, store=None,
             augment: bool = False, seed: int = 0, with_images: bool = True) -> EvalResult:
    """Deterministic pass over a split; augmentation is off unless ``augment``."""
    if not manifest.indices(split):
        raise ValueError(f"split {split!r} is empty")
    num_classes = num_classes or labeler.num_classes
    pol = policy if augment else policy.with_mode("none")
    loader = DataLoader(manifest, split, batch_size, pol, labeler=labeler, seed=seed, store=store,
                        phase=VALIDATION_PHASE, images=with_images)
    cm = ConfusionMatrix.empty(num_classes)
    loss_sum = 0.0
    for batch in loader.epoch(0):
        logits = model.logits(batch)
        cm.add(batch.labels, predict(logits))
        loss_sum += softmax_cross_entropy(logits, batch.labels).item() * len(batch)
    return EvalResult(cm.accuracy, cm, loss_sum / cm.total)
