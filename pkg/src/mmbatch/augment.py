"""Image transform pipeline and per-batch vs per-sample augmentation.

The pipeline is resize -> rotate -> crop -> flips -> normalize. Random
parameters come from :class:`RngStream` keys, so a draw depends only on
``(seed, epoch, batch, sample)`` and not on the order batches are produced.

Two random modes differ only in how streams are consumed:

``constant``
    one parameter draw per batch, shared by every sample in it.
``per_sample``
    an independent draw per sample.

Feeding ``per_sample`` a list of copies of the batch stream reproduces
``constant`` exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError

MODES = ("none", "constant", "per_sample")
_MODE_ALIASES = {"per-sample": "per_sample", "per-batch-constant": "constant", "batch": "constant"}


@dataclass(frozen=True)
class TransformParams:
    angle: float = 0.0
    top: int = 0
    left: int = 0
    hflip: bool = False
    vflip: bool = False


@dataclass(frozen=True)
class AugmentPolicy:
    mode: str = "per_sample"
    resize: int = 244
    crop: int = 224
    max_rotation: float = 15.0
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    mean: tuple = (0.5,)
    std: tuple = (0.5,)

    def __post_init__(self):
        mode = _MODE_ALIASES.get(self.mode, self.mode)
        if mode not in MODES:
            raise ValueError(f"unknown augmentation mode {self.mode!r}; expected one of {MODES}")
        object.__setattr__(self, "mode", mode)
        object.__setattr__(self, "mean", tuple(float(m) for m in np.atleast_1d(self.mean)))
        object.__setattr__(self, "std", tuple(float(s) for s in np.atleast_1d(self.std)))
        if self.crop < 1 or self.crop > self.resize:
            raise ValueError(f"crop side {self.crop} must lie in [1, resize={self.resize}]")
        if self.max_rotation < 0:
            raise ValueError("max_rotation must be >= 0")
        for p in (self.hflip_p, self.vflip_p):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"flip probability {p} outside [0, 1]")
        if any(s <= 0 for s in self.std):
            raise ValueError("normalization std must be positive")

    def with_mode(self, mode: str) -> "AugmentPolicy":
        return AugmentPolicy(mode, self.resize, self.crop, self.max_rotation,
                             self.hflip_p, self.vflip_p, self.mean, self.std)

    @property
    def center(self) -> int:
        return (self.resize - self.crop) // 2

    def identity_params(self) -> TransformParams:
        return TransformParams(0.0, self.center, self.center, False, False)


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by sample coordinates.

    ``sample=None`` denotes the batch-level stream. ``phase`` separates the
    training and validation key spaces.
    """

    seed: int
    epoch: int = 0
    batch: int = 0
    sample: Optional[int] = None
    phase: int = 0

    def generator(self) -> np.random.Generator:
        slot = 0 if self.sample is None else self.sample + 1
        key = np.random.SeedSequence([self.seed, self.phase, self.epoch, self.batch, slot])
        return np.random.Generator(np.random.Philox(key))


def sample_params(policy: AugmentPolicy, stream: RngStream) -> TransformParams:
    if policy.mode == "none":
        return policy.identity_params()
    rng = stream.generator()
    angle = float(rng.uniform(-policy.max_rotation, policy.max_rotation))
    span = policy.resize - policy.crop + 1
    top = int(rng.integers(0, span))
    left = int(rng.integers(0, span))
    hflip = bool(rng.random() < policy.hflip_p)
    vflip = bool(rng.random() < policy.vflip_p)
    return TransformParams(angle, top, left, hflip, vflip)


def _axis_weights(n_out: int, n_in: int):
    # half-pixel centres, clamped at the borders
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (pos - lo).astype(np.float32)
    return lo, hi, frac


def resize_bilinear(image: np.ndarray, height: int, width: Optional[int] = None) -> np.ndarray:
    width = height if width is None else width
    c, h, w = image.shape
    if (h, w) == (height, width):
        return image.astype(np.float32, copy=True)
    lo, hi, fr = _axis_weights(height, h)
    rows = image[:, lo, :] * (1 - fr)[None, :, None] + image[:, hi, :] * fr[None, :, None]
    lo, hi, fc = _axis_weights(width, w)
    out = rows[:, :, lo] * (1 - fc)[None, None, :] + rows[:, :, hi] * fc[None, None, :]
    return out.astype(np.float32)


def _rotate_crop(image: np.ndarray, angle: float, top: int, left: int, size: int) -> np.ndarray:
    """Crop ``size x size`` at (top, left) from the image rotated by ``angle`` degrees.

    Positive angles rotate content counter-clockwise about the image centre.
    Samples outside the source are zero.
    """
    c, h, w = image.shape
    if angle == 0.0:
        return image[:, top : top + size, left : left + size].copy()
    theta = math.radians(angle)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy = (np.arange(top, top + size, dtype=np.float64) - cy)[:, None]
    dx = (np.arange(left, left + size, dtype=np.float64) - cx)[None, :]
    sx = cx + cos * dx - sin * dy
    sy = cy + sin * dx + cos * dy
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = (sx - x0).astype(np.float32)
    fy = (sy - y0).astype(np.float32)
    out = np.zeros((c, size, size), dtype=np.float32)
    for yi, wy in ((y0, 1 - fy), (y0 + 1, fy)):
        for xi, wx in ((x0, 1 - fx), (x0 + 1, fx)):
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            wgt = np.where(valid, wy * wx, 0).astype(np.float32)
            out += image[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)] * wgt
    return out


def apply_transform(image: np.ndarray, params: TransformParams, policy: AugmentPolicy) -> np.ndarray:
    """Run the full pipeline on one ``C x H x W`` image in [0, 1]."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or min(image.shape) < 1:
        raise ShapeError(f"expected a non-empty C x H x W image, got shape {image.shape}")
    span = policy.resize - policy.crop
    if not (0 <= params.top <= span and 0 <= params.left <= span):
        raise ValueError(f"crop offset ({params.top}, {params.left}) outside [0, {span}]")
    out = resize_bilinear(image, policy.resize)
    out = _rotate_crop(out, params.angle, params.top, params.left, policy.crop)
    if params.hflip:
        out = out[:, :, ::-1]
    if params.vflip:
        out = out[:, ::-1, :]
    c = out.shape[0]
    mean = np.resize(np.asarray(policy.mean, dtype=np.float32), c)[:, None, None]
    std = np.resize(np.asarray(policy.std, dtype=np.float32), c)[:, None, None]
    return np.ascontiguousarray((out - mean) / std, dtype=np.float32)


def augment_batch(
    images: Sequence[np.ndarray],
    policy: AugmentPolicy,
    streams: Sequence[RngStream],
    batch_stream: Optional[RngStream] = None,
) -> tuple[np.ndarray, list[TransformParams]]:
    """Transform a batch and return it with the realized parameters.

    ``streams`` holds one key per sample (used in ``per_sample`` mode);
    ``batch_stream`` is the single key used in ``constant`` mode.
    """
    n = len(images)
    if len(streams) != n:
        raise ValueError(f"{len(streams)} streams for {n} images")
    if policy.mode == "none":
        params = [policy.identity_params()] * n
    elif policy.mode == "constant":
        if batch_stream is None:
            raise ValueError("constant mode needs a batch-level stream")
        params = [sample_params(policy, batch_stream)] * n
    else:
        params = [sample_params(policy, s) for s in streams]
    out = np.stack([apply_transform(img, p, policy) for img, p in zip(images, params)])
    return out, params
