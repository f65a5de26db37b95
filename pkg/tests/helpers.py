"""Shared fixtures for trainer-level tests."""

import hashlib
from dataclasses import dataclass

import numpy as np

from mmbatch.augment import AugmentPolicy, RngStream
from mmbatch.data import ImageStore, Labeler
from mmbatch.models import MultimodalHead, ToyCnnBackbone
from mmbatch.synth import SynthConfig, in_memory_manifest
from mmbatch.trainer import MultimodalTrainer, PhaseStats

TINY_POLICY = AugmentPolicy(resize=12, crop=10)


@dataclass
class Fixture:
    manifest: object
    store: ImageStore
    labeler: Labeler


def tiny_dataset(seed=0, train=48, validation=24, test=24, classes=2, ambiguity=0.0):
    cfg = SynthConfig(classes=classes, train=train, validation=validation, test=test, ambiguity=ambiguity,
                      image_size=12, noise=0.02, seed=seed)
    manifest, images = in_memory_manifest(cfg)
    return Fixture(manifest, ImageStore(manifest, images), Labeler.from_manifest(manifest))


def tiny_backbone(seed=0, d_out=8):
    return ToyCnnBackbone(3, 10, d_out, seed=seed)


def fingerprint(module):
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


def collapsed_streams(seed, epoch, batch, sample, phase):
    """Every sample draws from the batch-level stream."""
    return RngStream(seed, epoch, batch, None, phase)


class StubbedValidation(MultimodalTrainer):
    """Reports a scripted validation accuracy per epoch.

    The real validation pass still runs so each epoch's true accuracy and the
    head fingerprint at validation time are recorded.
    """

    def __init__(self, *args, scripted, **kwargs):
        super().__init__(*args, **kwargs)
        self.scripted = list(scripted)
        self.real_accuracy = []
        self.validated = []
        self.train_start = []

    def train_phase(self, epoch):
        self.train_start.append(fingerprint(self.head_module))
        return super().train_phase(epoch)

    def validation_phase(self, epoch):
        real = super().validation_phase(epoch)
        self.real_accuracy.append(real.accuracy)
        self.validated.append(fingerprint(self.head_module))
        return PhaseStats([real.loss], [self.scripted[epoch]], [1])

    @property
    def head_module(self):
        return self.tracked["head"]


def stub_run(fx, config, scripted, d_out=8):
    backbone = tiny_backbone(1, d_out)
    head = MultimodalHead(d_out, 0, fx.labeler.num_classes, seed=2)
    trainer = StubbedValidation(backbone, None, head, fx.manifest, config, labeler=fx.labeler, store=fx.store,
                                scripted=scripted)
    history = trainer.run()
    return trainer, history, backbone, head
