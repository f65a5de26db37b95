"""Command-line entry point: ``mmbatch <command> [--config FILE] [--key value ...]``.

Settings come from built-in defaults, then the command's own defaults, then
the config file, then flags. Relative paths resolve against ``--out``.

Exit codes: 0 success, 1 runtime failure, 2 missing input, 3 bad config.
Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .augment import MODES, AugmentPolicy, apply_transform, resize_bilinear
from .checkpoint import load_checkpoint, save_checkpoint
from .data import ImageStore, Labeler, Vocabulary, build_vocab, filter_titles, read_manifest
from .errors import CheckpointError, ConfigError
from .models import (
    Linear,
    MultimodalHead,
    PlaneEncoder,
    TextClassifier,
    TextScoreEncoder,
    ToyCnnBackbone,
    cam_scores,
)
from .pnm import write_pnm
from .synth import SynthConfig, write_dataset
from .tensor import Tensor
from .trainer import (
    ImageModel,
    MetricsWriter,
    MultimodalModel,
    TextModel,
    TextTrainConfig,
    TrainConfig,
    evaluate,
    train_multimodal,
    train_text_classifier,
    UnimodalTrainer,
)

log = logging.getLogger("mmbatch")

AUX_KINDS = ("none", "text", "plane", "plane_binary")
MODELS = ("mm", "image", "text")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _choice(options: Sequence[str]) -> Callable[[str], str]:
    def parse(text: str) -> str:
        value = text.strip().replace("-", "_")
        if value not in options:
            raise ValueError(f"{text!r} is not one of {', '.join(options)}")
        return value
    return parse


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], object], object]] = {
    "seed": (int, 0),
    # paths
    "manifest": (str, "manifest.csv"),
    "vocab": (str, "vocab.txt"),
    "text_checkpoint": (str, "text.mmck"),
    "image_checkpoint": (str, "image.mmck"),
    "mm_checkpoint": (str, "mm.mmck"),
    "metrics": (str, ""),
    "cam_dir": (str, "cam"),
    # dataset synthesis
    "classes": (int, 4),
    "train": (int, 2000),
    "validation": (int, 500),
    "test": (int, 500),
    "ambiguity": (float, 0.5),
    "image_size": (int, 32),
    "channels": (int, 3),
    "noise": (float, 0.08),
    "clutter": (int, 0),
    "test_rotation": (float, 0.0),
    "test_flips": (_bool, False),
    # training
    "epochs": (int, 2),
    "batch_size": (int, 64),
    "lr": (float, 5e-4),
    "momentum": (float, 0.9),
    "step_size": (int, 7),
    "gamma": (float, 0.1),
    "detect_word": (str, ""),
    "augment": (_choice(MODES), "per_sample"),
    "resize": (int, 36),
    "crop": (int, 32),
    "max_rotation": (float, 15.0),
    "hflip_p": (float, 0.5),
    "vflip_p": (float, 0.5),
    "mean": (_floats, (0.5,)),
    "std": (_floats, (0.5,)),
    "augment_in_validation": (_bool, False),
    "rollback": (_bool, True),
    "freeze_backbone": (_bool, True),
    "scheduler_per_batch": (_bool, False),
    "shuffle": (_bool, True),
    "prefetch": (int, 0),
    "feature_dim": (int, 64),
    "head_hidden": (int, 0),
    "pretrained": (_bool, True),
    "aux": (_choice(AUX_KINDS), "text"),
    "log_wall_time": (_bool, True),
    # text model
    "embed_dim": (int, 64),
    "text_hidden": (int, 200),
    # evaluation and CAM
    "split": (str, "test"),
    "model": (_choice(MODELS), "mm"),
    "cam_samples": (int, 1),
}

COMMAND_DEFAULTS = {
    "train-text": {"epochs": 10, "batch_size": 128, "lr": 1e-3},
}


class RunConfig:
    """Validated settings for one command invocation."""

    def __init__(self, command: str, values: dict, out: str):
        self.command = command
        self.values = values
        self.out = out

    def __getattr__(self, key: str):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def path(self, key: str) -> Path:
        value = self.values[key]
        return Path(value) if os.path.isabs(value) else Path(self.out) / value

    @classmethod
    def build(cls, command: str, file_values: dict, flag_values: dict, out: str) -> "RunConfig":
        values = {k: default for k, (_, default) in SCHEMA.items()}
        values.update(COMMAND_DEFAULTS.get(command, {}))
        for source in (file_values, flag_values):
            for key, raw in source.items():
                values[key] = _parse_value(key, raw)
        if not values["metrics"]:
            values["metrics"] = f"{command}.jsonl"
        return cls(command, values, out)

    def policy(self) -> AugmentPolicy:
        try:
            return AugmentPolicy(self.augment, self.resize, self.crop, self.max_rotation,
                                 self.hflip_p, self.vflip_p, self.mean, self.std)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
            step_size=self.step_size, gamma=self.gamma, seed=self.seed,
            detect_word=self.detect_word or None, policy=self.policy(),
            augment_in_validation=self.augment_in_validation, rollback=self.rollback,
            freeze_backbone=self.freeze_backbone, scheduler_per_batch=self.scheduler_per_batch,
            shuffle=self.shuffle, prefetch=self.prefetch,
        ).validate()


def _parse_value(key: str, raw):
    key = key.replace("-", "_")
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(raw, str):
        return raw
    parser = SCHEMA[key][0]
    try:
        return parser(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_config_file(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SCHEMA:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        out[key] = value
    return out


# --- checkpoints ---------------------------------------------------------------

def _prefixed(prefix: str, state: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def _section(tensors: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}


def _meta(tensors: dict, key: str, path) -> list[int]:
    if key not in tensors:
        raise CheckpointError(f"{path}: missing {key!r} record")
    return [int(v) for v in tensors[key]]


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def save_image_model(path, backbone: ToyCnnBackbone, head: Linear) -> None:
    c, s, _ = backbone.input_shape
    tensors = {**_prefixed("backbone", backbone.state_dict()), **_prefixed("head", head.state_dict())}
    tensors["meta.image"] = np.asarray([c, s, backbone.d_out, head.n_out], np.float32)
    save_checkpoint(path, tensors)


def load_image_model(path) -> tuple[ToyCnnBackbone, Linear]:
    tensors = load_checkpoint(_require(Path(path), "image checkpoint"))
    c, s, d, k = _meta(tensors, "meta.image", path)
    backbone = ToyCnnBackbone(c, s, d)
    head = Linear(d, k)
    backbone.load_state_dict(_section(tensors, "backbone"))
    head.load_state_dict(_section(tensors, "head"))
    return backbone, head


def save_text_model(path, model: TextClassifier) -> None:
    v, e = model.embedding.shape
    tensors = _prefixed("text", model.state_dict())
    tensors["meta.text"] = np.asarray([v, model.num_classes, e, model.fc1.n_out], np.float32)
    save_checkpoint(path, tensors)


def load_text_model(path) -> TextClassifier:
    tensors = load_checkpoint(_require(Path(path), "text checkpoint"))
    v, k, e, h = _meta(tensors, "meta.text", path)
    model = TextClassifier(v, k, e, h)
    model.load_state_dict(_section(tensors, "text"))
    return model


def save_mm_model(path, backbone: ToyCnnBackbone, head: MultimodalHead, aux_kind: str) -> None:
    c, s, _ = backbone.input_shape
    hidden = 0 if head.hidden is None else head.hidden.n_out
    tensors = {**_prefixed("backbone", backbone.state_dict()), **_prefixed("head", head.state_dict())}
    tensors["meta.mm"] = np.asarray(
        [c, s, head.d_img, head.d_extra, head.num_classes, hidden, AUX_KINDS.index(aux_kind)], np.float32)
    save_checkpoint(path, tensors)


def load_mm_model(path) -> tuple[ToyCnnBackbone, MultimodalHead, str]:
    tensors = load_checkpoint(_require(Path(path), "multimodal checkpoint"))
    c, s, d, extra, k, hidden, aux = _meta(tensors, "meta.mm", path)
    backbone = ToyCnnBackbone(c, s, d)
    head = MultimodalHead(d, extra, k, hidden)
    backbone.load_state_dict(_section(tensors, "backbone"))
    head.load_state_dict(_section(tensors, "head"))
    return backbone, head, AUX_KINDS[aux]


# --- commands -------------------------------------------------------------------

def _manifest(cfg: RunConfig):
    return read_manifest(_require(cfg.path("manifest"), "manifest"))


def _labeler(cfg: RunConfig, manifest) -> Labeler:
    return Labeler.from_manifest(manifest, cfg.detect_word or None)


def _metrics(cfg: RunConfig) -> MetricsWriter:
    path = cfg.path("metrics")
    path.parent.mkdir(parents=True, exist_ok=True)
    return MetricsWriter(path, wall_time=cfg.log_wall_time)


def _aux_encoder(cfg: RunConfig, kind: str):
    if kind == "none":
        return None
    if kind == "plane":
        return PlaneEncoder()
    if kind == "plane_binary":
        return PlaneEncoder(binary=True)
    vocab = Vocabulary.load(_require(cfg.path("vocab"), "vocabulary"))
    return TextScoreEncoder(load_text_model(cfg.path("text_checkpoint")), vocab)


def cmd_synth(cfg: RunConfig) -> None:
    synth = SynthConfig(
        classes=cfg.classes, train=cfg.train, validation=cfg.validation, test=cfg.test,
        ambiguity=cfg.ambiguity, image_size=cfg.image_size, channels=cfg.channels, noise=cfg.noise,
        clutter=cfg.clutter, test_rotation=cfg.test_rotation, test_flips=cfg.test_flips, seed=cfg.seed,
    )
    manifest_path = cfg.path("manifest")
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest = write_dataset(manifest_path.parent, synth)
    if manifest_path.name != "manifest.csv":
        os.replace(manifest_path.parent / "manifest.csv", manifest_path)
    print(f"wrote {len(manifest)} samples to {manifest_path}")


def cmd_build_vocab(cfg: RunConfig) -> None:
    manifest = _manifest(cfg)
    kept, _ = filter_titles(manifest.records)
    vocab = build_vocab(r.aux for r in kept if r.split == "train")
    vocab.save(cfg.path("vocab"))
    print(f"vocabulary of {len(vocab)} ids written to {cfg.path('vocab')}")


def cmd_train_text(cfg: RunConfig) -> None:
    vocab = Vocabulary.load(_require(cfg.path("vocab"), "vocabulary"))
    manifest = _manifest(cfg)
    if cfg.epochs < 1 or not cfg.lr > 0 or cfg.batch_size < 1:
        raise ConfigError("train-text needs epochs >= 1, lr > 0 and batch_size >= 1")
    labeler = _labeler(cfg, manifest)
    model = TextClassifier(len(vocab), labeler.num_classes, cfg.embed_dim, cfg.text_hidden, seed=cfg.seed)
    metrics = _metrics(cfg)
    losses = train_text_classifier(model, vocab, manifest, labeler,
                                   TextTrainConfig(cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed), metrics)
    save_text_model(cfg.path("text_checkpoint"), model)
    metrics.write({"stage": "train_text", "phase": "final", "loss": losses[-1],
                   "checkpoint": cfg.text_checkpoint})
    print(f"final training loss {losses[-1]:.6f}")


def cmd_pretrain_image(cfg: RunConfig) -> None:
    manifest = _manifest(cfg)
    config = cfg.train_config()
    labeler = _labeler(cfg, manifest)
    backbone = ToyCnnBackbone(cfg.channels, cfg.crop, cfg.feature_dim, seed=cfg.seed)
    head = Linear(cfg.feature_dim, labeler.num_classes, seed=cfg.seed + 1)
    metrics = _metrics(cfg)
    trainer = UnimodalTrainer(backbone, head, manifest, config, labeler=labeler, metrics=metrics)
    trainer.run()
    save_image_model(cfg.path("image_checkpoint"), backbone, head)
    metrics.write({"stage": trainer.stage, "phase": "final", "best_accuracy": trainer.tracker.accuracy,
                   "checkpoint": cfg.image_checkpoint})
    print(f"best validation accuracy {trainer.tracker.accuracy}")


def cmd_train_mm(cfg: RunConfig) -> None:
    config = cfg.train_config()
    manifest = _manifest(cfg)
    labeler = _labeler(cfg, manifest)
    if cfg.pretrained:
        backbone, _ = load_image_model(cfg.path("image_checkpoint"))
        if backbone.input_shape != (cfg.channels, cfg.crop, cfg.crop):
            raise ConfigError(f"image checkpoint expects {backbone.input_shape} inputs, "
                              f"config gives {(cfg.channels, cfg.crop, cfg.crop)}")
    else:
        backbone = ToyCnnBackbone(cfg.channels, cfg.crop, cfg.feature_dim, seed=cfg.seed)
    aux = _aux_encoder(cfg, cfg.aux)
    width = 0 if aux is None else aux.width
    head = MultimodalHead(backbone.d_out, width, labeler.num_classes, cfg.head_hidden, seed=cfg.seed + 2)
    metrics = _metrics(cfg)
    _, history = train_multimodal(backbone, aux, head, manifest, config, labeler=labeler, metrics=metrics)
    save_mm_model(cfg.path("mm_checkpoint"), backbone, head, cfg.aux)
    best = history[-1].best_accuracy
    metrics.write({"stage": "train_mm", "phase": "final", "best_accuracy": best,
                   "checkpoint": cfg.mm_checkpoint})
    print(f"best validation accuracy {best}")


def _eval_model(cfg: RunConfig):
    if cfg.model == "image":
        return ImageModel(*load_image_model(cfg.path("image_checkpoint"))), True
    if cfg.model == "text":
        vocab = Vocabulary.load(_require(cfg.path("vocab"), "vocabulary"))
        return TextModel(load_text_model(cfg.path("text_checkpoint")), vocab), False
    backbone, head, kind = load_mm_model(cfg.path("mm_checkpoint"))
    return MultimodalModel(backbone, _aux_encoder(cfg, kind), head), True


def cmd_eval(cfg: RunConfig) -> None:
    manifest = _manifest(cfg)
    labeler = _labeler(cfg, manifest)
    model, with_images = _eval_model(cfg)
    result = evaluate(model, manifest, cfg.split, labeler=labeler, policy=cfg.policy(),
                      batch_size=cfg.batch_size, with_images=with_images)
    metrics = _metrics(cfg)
    metrics.write({"stage": "eval", "phase": cfg.split, "model": cfg.model, "accuracy": result.accuracy,
                   "loss": result.loss, "samples": result.confusion.total,
                   "confusion": result.confusion.counts.tolist()})
    print(f"accuracy {result.accuracy}")


def _heat(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi - lo < 1e-12:
        return np.zeros_like(m, dtype=np.float32)
    return ((m - lo) / (hi - lo)).astype(np.float32)


def cmd_cam(cfg: RunConfig) -> None:
    manifest = _manifest(cfg)
    labeler = _labeler(cfg, manifest)
    backbone, head = load_image_model(cfg.path("image_checkpoint"))
    policy = cfg.policy().with_mode("none")
    store = ImageStore(manifest)
    weights, bias = backbone.cam_weights(head)
    out_dir = cfg.path("cam_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    records = list(zip(manifest.indices(cfg.split), manifest.split(cfg.split)))[: cfg.cam_samples]
    if not records:
        raise ValueError(f"split {cfg.split!r} is empty")
    for idx, rec in records:
        x = apply_transform(store.load(rec), policy.identity_params(), policy)
        act = backbone.activations(Tensor._wrap(x[None])).data[0]
        scores, maps = cam_scores(act, weights)
        for c, m in enumerate(maps):
            name = labeler.classes[c] if labeler.classes else str(c)
            heat = resize_bilinear(_heat(m)[None], cfg.crop)
            write_pnm(out_dir / f"{idx:05d}_{c}_{name}.pgm", np.clip(heat, 0.0, 1.0))
        print(json.dumps({"sample": idx, "image": rec.image, "scores": (scores + bias).round(6).tolist()}))


COMMANDS = {
    "synth": cmd_synth,
    "build-vocab": cmd_build_vocab,
    "train-text": cmd_train_text,
    "pretrain-image": cmd_pretrain_image,
    "train-mm": cmd_train_mm,
    "eval": cmd_eval,
    "cam": cmd_cam,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmbatch", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--out", default=".", help="directory that relative paths resolve against")
        p.add_argument("--seed", dest="seed")
        for key in SCHEMA:
            if key != "seed":
                p.add_argument("--" + key.replace("_", "-"), dest=key, metavar="VALUE")
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "exit": code, "message": message}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except ConfigError as exc:
        return _fail(3, "config", str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = {}
        if args.config:
            file_values = parse_config_file(_require(Path(args.config), "config file").read_text(encoding="utf-8"))
        flags = {k: v for k, v in vars(args).items() if k in SCHEMA and v is not None}
        cfg = RunConfig.build(args.command, file_values, flags, args.out)
        COMMANDS[args.command](cfg)
    except FileNotFoundError as exc:
        return _fail(2, "missing_input", str(exc))
    except ConfigError as exc:
        return _fail(3, "config", str(exc))
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        return _fail(1, "runtime", f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
