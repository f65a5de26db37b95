"""Image feature extractor, shallow text classifier, multimodal head, and CAM."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from .data import SampleRecord, Vocabulary, encode_plane_features, encode_plane_info, parse_plane_info
from .errors import ShapeError
from .tensor import (
    Tensor,
    add_bias,
    concat_cols,
    conv2d,
    embedding_mean_batch,
    matmul,
    maxpool2d,
    relu,
    reshape,
)


class Module:
    """Holds named parameters and optional non-trainable buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self._params.items()}
        state.update({k: b.copy() for k, b in self._buffers.items()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        expected = set(self._params) | set(self._buffers)
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for k, p in self._params.items():
            value = np.asarray(state[k], dtype=p.dtype)
            if value.shape != p.shape:
                raise ShapeError(f"{k}: stored shape {value.shape} != parameter shape {p.shape}")
            p.data[...] = value
        for k, b in self._buffers.items():
            value = np.asarray(state[k], dtype=b.dtype)
            if value.shape != b.shape:
                raise ShapeError(f"{k}: stored shape {value.shape} != buffer shape {b.shape}")
            b[...] = value

    @property
    def trainable(self) -> bool:
        return any(p.requires_grad for p in self._params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self._params.values():
            p.requires_grad = flag
            p.grad = None

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t


def _uniform(rng, shape, fan_in, zero):
    if zero:
        return np.zeros(shape, dtype=np.float32)
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as ``n_in x n_out``."""

    def __init__(self, n_in: int, n_out: int, seed: int = 0, zero: bool = False, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.n_in, self.n_out = n_in, n_out
        self.weight = self._param("weight", _uniform(rng, (n_in, n_out), n_in, zero))
        self.bias = self._param("bias", np.zeros(n_out, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"linear layer expects N x {self.n_in} input, got {x.shape}")
        return add_bias(matmul(x, self.weight), self.bias)


class FeatureExtractor(Module):
    """Maps ``N x C x S x S`` images to ``N x d_out`` feature rows."""

    d_out: int
    input_shape: tuple[int, int, int]

    def features(self, images: Tensor) -> Tensor:
        raise NotImplementedError


class ToyCnnBackbone(FeatureExtractor):
    """conv3x3 -> relu -> pool2 -> conv3x3 -> relu -> pool2 -> flatten -> linear."""

    def __init__(self, in_channels: int = 3, crop: int = 224, d_out: int = 64,
                 seed: int = 0, zero: bool = False, widths: tuple[int, int] = (8, 16)):
        super().__init__()
        rng = np.random.default_rng(seed)
        c1, c2 = widths
        s1 = (crop - 2) // 2
        s2 = (s1 - 2) // 2
        if s2 < 1:
            raise ShapeError(f"crop side {crop} is too small for the backbone")
        self.input_shape = (in_channels, crop, crop)
        self.activation_shape = (c2, s2, s2)
        self.d_out = d_out
        self.conv1_w = self._param("conv1.weight", _uniform(rng, (c1, in_channels, 3, 3), in_channels * 9, zero))
        self.conv1_b = self._param("conv1.bias", np.zeros(c1, dtype=np.float32))
        self.conv2_w = self._param("conv2.weight", _uniform(rng, (c2, c1, 3, 3), c1 * 9, zero))
        self.conv2_b = self._param("conv2.bias", np.zeros(c2, dtype=np.float32))
        self.fc = Linear(c2 * s2 * s2, d_out, zero=zero, rng=rng)
        self._params["fc.weight"] = self.fc.weight
        self._params["fc.bias"] = self.fc.bias

    def activations(self, images: Tensor) -> Tensor:
        """Pooled activations of the last convolution block, ``N x K x X x Y``."""
        if images.ndim != 4 or images.shape[1:] != self.input_shape:
            raise ShapeError(f"backbone expects N x {self.input_shape} images, got {images.shape}")
        h = maxpool2d(relu(conv2d(images, self.conv1_w, self.conv1_b)), 2)
        return maxpool2d(relu(conv2d(h, self.conv2_w, self.conv2_b)), 2)

    def features(self, images: Tensor) -> Tensor:
        act = self.activations(images)
        return self.fc(reshape(act, (act.shape[0], int(np.prod(act.shape[1:])))))

    def cam_weights(self, head: Linear) -> tuple[np.ndarray, np.ndarray]:
        """Per-position class weights over :meth:`activations` and the matching bias.

        The returned ``(C, K, X, Y)`` weights reproduce ``head(features(x))``
        exactly up to the bias, since both layers after pooling are affine.
        """
        composite = self.fc.weight.data.astype(np.float64) @ head.weight.data
        k, x, y = self.activation_shape
        weights = composite.T.reshape(head.n_out, k, x, y)
        bias = self.fc.bias.data.astype(np.float64) @ head.weight.data + head.bias.data
        return weights, bias


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backbone_features(extractor: FeatureExtractor, images) -> Tensor:
    return extractor.features(_as_tensor(images))


class TextClassifier(Module):
    """Mean-of-embeddings followed by two hidden ReLU layers."""

    def __init__(self, vocab_size: int, num_classes: int, embed_dim: int = 64,
                 hidden: int = 200, seed: int = 0, zero: bool = False):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        table = np.zeros((vocab_size, embed_dim), np.float32) if zero else rng.standard_normal((vocab_size, embed_dim)).astype(np.float32)
        self.embedding = self._param("embedding", table)
        self.fc1 = Linear(embed_dim, hidden, zero=zero, rng=rng)
        self.fc2 = Linear(hidden, hidden, zero=zero, rng=rng)
        self.fc3 = Linear(hidden, num_classes, zero=zero, rng=rng)
        for name, layer in (("fc1", self.fc1), ("fc2", self.fc2), ("fc3", self.fc3)):
            self._params[f"{name}.weight"] = layer.weight
            self._params[f"{name}.bias"] = layer.bias

    def logits(self, encoded: Sequence[Sequence[int]]) -> Tensor:
        h = embedding_mean_batch(encoded, self.embedding)
        h = relu(self.fc1(h))
        h = relu(self.fc2(h))
        return self.fc3(h)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def text_scores(classifier: TextClassifier, encoded_title: Sequence[int]) -> np.ndarray:
    """Class probabilities for one encoded title."""
    if len(encoded_title) == 0:
        raise ValueError("text_scores: empty encoded title")
    return softmax(classifier.logits([encoded_title]).data[0])


class MultimodalHead(Module):
    """Affine map from fused ``[features | extra]`` rows to class logits.

    ``feat_mean``/``feat_std`` standardize backbone features before fusion;
    they are buffers fitted on the training split, not trained.
    """

    def __init__(self, d_img: int, d_extra: int, num_classes: int, hidden: int = 0,
                 seed: int = 0, zero: bool = False):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.d_img, self.d_extra, self.num_classes = d_img, d_extra, num_classes
        width = d_img + d_extra
        self.hidden = None
        if hidden:
            self.hidden = Linear(width, hidden, zero=zero, rng=rng)
            self._params["hidden.weight"] = self.hidden.weight
            self._params["hidden.bias"] = self.hidden.bias
            width = hidden
        self.out = Linear(width, num_classes, zero=zero, rng=rng)
        self._params["weight"] = self.out.weight
        self._params["bias"] = self.out.bias
        self._buffers["feat_mean"] = np.zeros(d_img, dtype=np.float32)
        self._buffers["feat_std"] = np.ones(d_img, dtype=np.float32)

    @property
    def in_width(self) -> int:
        return self.d_img + self.d_extra

    def set_feature_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        std = np.where(std > 1e-6, std, 1.0)
        self._buffers["feat_mean"][...] = mean
        self._buffers["feat_std"][...] = std

    def standardize(self, features: Tensor) -> Tensor:
        inv = (1.0 / self._buffers["feat_std"]).astype(features.dtype)
        shift = (-self._buffers["feat_mean"] * inv).astype(features.dtype)
        return add_bias(matmul(features, Tensor(np.diag(inv), dtype=features.dtype)), Tensor(shift, dtype=features.dtype))

    def __call__(self, combined: Tensor) -> Tensor:
        return head_forward(self, combined)


def fuse(features: Tensor, extra=None) -> Tensor:
    """Concatenate ``extra`` columns after ``features``; ``None`` means no extra input."""
    if extra is None:
        return features
    shape = extra.shape if hasattr(extra, "shape") else np.shape(extra)
    if len(shape) != 2 or shape[0] != features.shape[0]:
        raise ShapeError(f"fuse: {features.shape[0]} feature rows vs extra {shape}")
    if shape[1] == 0:
        return features
    extra = extra if isinstance(extra, Tensor) else Tensor(extra, dtype=features.dtype)
    return concat_cols(features, extra)


def head_forward(head: MultimodalHead, combined: Tensor) -> Tensor:
    if combined.ndim != 2 or combined.shape[1] != head.in_width:
        raise ShapeError(f"head expects width {head.in_width}, got input {combined.shape}")
    h = combined
    if head.hidden is not None:
        h = relu(head.hidden(h))
    return head.out(h)


def predict(logits) -> np.ndarray:
    """Arg-max class per row; ties resolve to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data.argmax(axis=1)


def cam_scores(activations: np.ndarray, class_weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Class scores and spatial maps from last-layer activations.

    ``activations`` is ``K x X x Y``. ``class_weights`` is either ``C x K``
    (position independent) or ``C x K x X x Y``. Returns ``(scores, maps)``
    where ``maps[c]`` sums over ``K`` and ``scores[c]`` sums ``maps[c]``.
    """
    act = np.asarray(activations, dtype=np.float64)
    w = np.asarray(class_weights, dtype=np.float64)
    if act.ndim != 3:
        raise ShapeError(f"activations must be K x X x Y, got {act.shape}")
    k, x, y = act.shape
    if w.ndim == 2 and w.shape[1] == k:
        maps = np.einsum("ck,kxy->cxy", w, act)
    elif w.ndim == 4 and w.shape[1:] == (k, x, y):
        maps = np.einsum("ckxy,kxy->cxy", w, act)
    else:
        raise ShapeError(f"class weights {w.shape} do not cover activations {act.shape}")
    return maps.sum(axis=(1, 2)), maps


# --- auxiliary-input encoders --------------------------------------------------

class PlaneEncoder:
    """Plane information as one scaled code (default) or three binary indicators."""

    def __init__(self, binary: bool = False):
        self.binary = binary
        self.width = 3 if binary else 1

    def __call__(self, records: Sequence[SampleRecord]) -> np.ndarray:
        infos = [parse_plane_info(r.aux) for r in records]
        if self.binary:
            return np.stack([encode_plane_features(i) for i in infos])
        return np.asarray([[encode_plane_info(i)] for i in infos], dtype=np.float32)


class TextScoreEncoder:
    """Class scores of a frozen text classifier for each record's title."""

    def __init__(self, classifier: TextClassifier, vocab: Vocabulary, use_logits: bool = False):
        self.classifier = classifier
        self.vocab = vocab
        self.use_logits = use_logits
        self.width = classifier.num_classes
        self._cache: dict[str, np.ndarray] = {}

    def encode(self, titles: Sequence[str]) -> np.ndarray:
        todo = [t for t in dict.fromkeys(titles) if t not in self._cache]
        if todo:
            # titles with no tokens fall back to <unk> so evaluation never fails
            ids = [self.vocab.encode(t) or [Vocabulary.UNK] for t in todo]
            logits = self.classifier.logits(ids).data
            values = logits if self.use_logits else softmax(logits)
            for t, row in zip(todo, values):
                self._cache[t] = row
        return np.stack([self._cache[t] for t in titles]).astype(np.float32)

    def __call__(self, records: Sequence[SampleRecord]) -> np.ndarray:
        return self.encode([r.aux for r in records])
