"""End-to-end comparisons on synthetic data.

``compare_pipelines`` trains the four systems (image only, title only,
multimodal on an untuned backbone, multimodal on a fine-tuned backbone) on one
generated dataset and reports their test accuracies. ``compare_augmentation``
trains the same image classifier once per augmentation mode and scores it on a
test split whose glyphs are rotated and flipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .augment import AugmentPolicy
from .data import ImageStore, Labeler, build_vocab
from .models import Linear, MultimodalHead, TextClassifier, TextScoreEncoder, ToyCnnBackbone
from .synth import SynthConfig, in_memory_manifest
from .trainer import (
    ImageModel,
    MultimodalModel,
    TextModel,
    TextTrainConfig,
    TrainConfig,
    evaluate,
    pretrain_unimodal,
    train_multimodal,
    train_text_classifier,
)

DESK_POLICY = AugmentPolicy(resize=36, crop=32)


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=6, lr=0.01, policy=DESK_POLICY))
    multimodal: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=6, lr=0.03, policy=DESK_POLICY))
    text: TextTrainConfig = field(default_factory=TextTrainConfig)
    feature_dim: int = 64


def _seeded(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(
        cfg,
        synth=replace(cfg.synth, seed=seed),
        pretrain=replace(cfg.pretrain, seed=seed),
        multimodal=replace(cfg.multimodal, seed=seed),
        text=replace(cfg.text, seed=seed),
    )


def _backbone(cfg: ExperimentConfig, seed: int) -> ToyCnnBackbone:
    return ToyCnnBackbone(cfg.synth.channels, cfg.pretrain.policy.crop, cfg.feature_dim, seed=seed)


def compare_pipelines(cfg: ExperimentConfig, seed: int) -> dict[str, float]:
    """Test accuracy of each system on the dataset generated with ``seed``."""
    cfg = _seeded(cfg, seed)
    manifest, images = in_memory_manifest(cfg.synth)
    store = ImageStore(manifest, images)
    labeler = Labeler.from_manifest(manifest)
    k = labeler.num_classes
    policy = cfg.pretrain.policy
    base = 1000 * seed

    def score(model, **kw):
        return evaluate(model, manifest, "test", labeler=labeler, policy=policy, store=store, **kw).accuracy

    vocab = build_vocab(manifest.records[i].aux for i in manifest.indices("train"))
    text = TextClassifier(len(vocab), k, seed=base + 1)
    train_text_classifier(text, vocab, manifest, labeler, cfg.text)
    aux = TextScoreEncoder(text, vocab)

    tuned = _backbone(cfg, base + 2)
    image_head = Linear(cfg.feature_dim, k, seed=base + 3)
    pretrain_unimodal(tuned, image_head, manifest, cfg.pretrain, labeler=labeler, store=store)

    untuned = _backbone(cfg, base + 2)
    results = {
        "image_only": score(ImageModel(tuned, image_head)),
        "aux_only": score(TextModel(text, vocab), with_images=False),
    }
    for name, backbone in (("multimodal", untuned), ("proposed", tuned)):
        head = MultimodalHead(cfg.feature_dim, aux.width, k, seed=base + 4)
        train_multimodal(backbone, aux, head, manifest, cfg.multimodal, labeler=labeler, store=store)
        results[name] = score(MultimodalModel(backbone, aux, head))
    return results


def compare_augmentation(cfg: ExperimentConfig, seed: int,
                         modes: tuple[str, ...] = ("constant", "per_sample")) -> dict[str, float]:
    """Image-only test accuracy after training under each augmentation mode."""
    cfg = _seeded(cfg, seed)
    manifest, images = in_memory_manifest(cfg.synth)
    store = ImageStore(manifest, images)
    labeler = Labeler.from_manifest(manifest)
    out = {}
    for mode in modes:
        train_cfg = replace(cfg.pretrain, policy=cfg.pretrain.policy.with_mode(mode))
        backbone = _backbone(cfg, 1000 * seed + 2)
        head = Linear(cfg.feature_dim, labeler.num_classes, seed=1000 * seed + 3)
        pretrain_unimodal(backbone, head, manifest, train_cfg, labeler=labeler, store=store)
        out[mode] = evaluate(ImageModel(backbone, head), manifest, "test", labeler=labeler,
                             policy=train_cfg.policy, store=store).accuracy
    return out
