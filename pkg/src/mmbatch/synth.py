"""Synthetic image + title datasets with controllable modality ambiguity.

Classes are laid out on a ``rows x cols`` grid. A *clear* sample shows the
glyph of its class and its title names the class token, so either modality
alone identifies it. An *ambiguous* sample shows the glyph of its grid row
and its title names the token of its grid column: the image narrows the
class to one row, the title to one column, and only both together pin it.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Manifest, SampleRecord, write_manifest
from .errors import ConfigError
from .pnm import write_pnm

GLYPHS = ("disk", "square", "plus", "triangle", "ring", "hbar", "xcross", "tee", "diamond", "ell", "vbar", "dots")
CLASS_NAMES = ("apple", "bread", "curry", "dumpling", "eclair", "falafel", "gyoza", "hummus")
CLASS_TOKENS = ("amber", "basil", "cobalt", "dune", "ember", "fjord", "garnet", "harbor")
COLUMN_TOKENS = ("north", "south", "east", "west")
FILLER = ("homemade", "easy", "best", "classic", "quick", "recipe", "with", "and", "my", "simple")


def grid_shape(num_classes: int) -> tuple[int, int]:
    """Split ``num_classes`` into ``rows x cols`` with the most balanced factors."""
    rows = max(d for d in range(1, int(math.isqrt(num_classes)) + 1) if num_classes % d == 0)
    return rows, num_classes // rows


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 4
    train: int = 2000
    validation: int = 500
    test: int = 500
    ambiguity: float = 0.5
    image_size: int = 32
    channels: int = 3
    noise: float = 0.08
    clutter: int = 0
    test_rotation: float = 0.0
    test_flips: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.classes <= len(CLASS_NAMES):
            raise ConfigError(f"classes must lie in [2, {len(CLASS_NAMES)}], got {self.classes}")
        rows, cols = grid_shape(self.classes)
        if self.classes + rows > len(GLYPHS) or cols > len(COLUMN_TOKENS):
            raise ConfigError(f"{self.classes} classes need more glyphs or tokens than are defined")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise ConfigError(f"ambiguity must lie in [0, 1], got {self.ambiguity}")
        if self.clutter < 0:
            raise ConfigError("clutter must be >= 0")
        if self.image_size < 12:
            raise ConfigError("image_size must be >= 12")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        for name in ("train", "validation", "test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} count must be >= 0")


class LabelTable:
    """The generator's joint law over (glyph, token, class)."""

    def __init__(self, num_classes: int, ambiguity: float):
        self.num_classes = num_classes
        self.ambiguity = ambiguity
        self.rows, self.cols = grid_shape(num_classes)
        self.class_glyphs = GLYPHS[:num_classes]
        self.row_glyphs = GLYPHS[num_classes : num_classes + self.rows]
        self.class_tokens = CLASS_TOKENS[:num_classes]
        self.column_tokens = COLUMN_TOKENS[: self.cols]
        self.class_names = CLASS_NAMES[:num_classes]

    def clear(self, c: int) -> tuple[str, str]:
        return self.class_glyphs[c], self.class_tokens[c]

    def ambiguous(self, c: int) -> tuple[str, str]:
        return self.row_glyphs[c // self.cols], self.column_tokens[c % self.cols]

    def label(self, glyph: str, token: str) -> int:
        """Class of a (glyph, token) pair in the generator's support."""
        if glyph in self.class_glyphs and token in self.class_tokens:
            c = self.class_glyphs.index(glyph)
            if self.class_tokens.index(token) == c:
                return c
        if glyph in self.row_glyphs and token in self.column_tokens:
            return self.row_glyphs.index(glyph) * self.cols + self.column_tokens.index(token)
        raise KeyError(f"({glyph}, {token}) is outside the generator's support")

    def joint(self) -> dict[tuple[str, str, int], float]:
        """Probability of each (glyph, token, class) triple."""
        p = {}
        for c in range(self.num_classes):
            for kind, weight in ((self.clear, 1.0 - self.ambiguity), (self.ambiguous, self.ambiguity)):
                if weight > 0:
                    g, t = kind(c)
                    p[(g, t, c)] = p.get((g, t, c), 0.0) + weight / self.num_classes
        return p

    def bayes_accuracy(self, modality: str) -> float:
        """Best achievable accuracy observing ``"image"``, ``"text"`` or ``"both"``."""
        key = {"image": lambda g, t: g, "text": lambda g, t: t, "both": lambda g, t: (g, t)}[modality]
        best: dict = {}
        for (g, t, c), p in self.joint().items():
            per_class = best.setdefault(key(g, t), {})
            per_class[c] = per_class.get(c, 0.0) + p
        return math.fsum(max(v.values()) for v in best.values())


def _glyph_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership of normalized coordinates (roughly [-1, 1]) in a glyph."""
    au, av = np.abs(u), np.abs(v)
    r = np.hypot(u, v)
    if kind == "disk":
        return r <= 0.8
    if kind == "ring":
        return (r <= 0.85) & (r >= 0.5)
    if kind == "square":
        return (au <= 0.7) & (av <= 0.7)
    if kind == "plus":
        return ((au <= 0.22) & (av <= 0.85)) | ((av <= 0.22) & (au <= 0.85))
    if kind == "xcross":
        return ((np.abs(u - v) <= 0.3) | (np.abs(u + v) <= 0.3)) & (r <= 1.0)
    if kind == "triangle":
        return (v <= 0.7) & (v >= 1.8 * au - 0.9)
    if kind == "hbar":
        return (au <= 0.9) & (av <= 0.25)
    if kind == "vbar":
        return (au <= 0.25) & (av <= 0.9)
    if kind == "tee":
        return ((v >= -0.85) & (v <= -0.45) & (au <= 0.85)) | ((au <= 0.2) & (v >= -0.85) & (v <= 0.85))
    if kind == "diamond":
        return au + av <= 0.9
    if kind == "ell":
        return ((u >= -0.7) & (u <= -0.3) & (av <= 0.85)) | ((v >= 0.45) & (v <= 0.85) & (u >= -0.7) & (u <= 0.7))
    if kind == "dots":
        return (np.hypot(u - 0.45, v) <= 0.3) | (np.hypot(u + 0.45, v) <= 0.3)
    raise ValueError(f"unknown glyph {kind!r}")


def render_glyph(kind: str, rng: np.random.Generator, size: int, channels: int, noise: float,
                 rotation: float = 0.0, hflip: bool = False, vflip: bool = False,
                 clutter: int = 0) -> np.ndarray:
    """Draw one glyph with random colour, scale, offset and additive noise.

    ``clutter`` adds that many small random dots as distractors.
    """
    ss = 2  # supersampling factor
    n = size * ss
    coords = (np.arange(n) + 0.5) / ss - size / 2.0
    scale = size * 0.36 * rng.uniform(0.85, 1.1)
    oy, ox = rng.uniform(-0.1, 0.1, size=2) * size
    y, x = np.meshgrid(coords - oy, coords - ox, indexing="ij")
    theta = math.radians(rotation)
    u = (math.cos(theta) * x + math.sin(theta) * y) / scale
    v = (-math.sin(theta) * x + math.cos(theta) * y) / scale
    if hflip:
        u = -u
    if vflip:
        v = -v
    mask = _glyph_mask(kind, u, v).astype(np.float64)
    mask = mask.reshape(size, ss, size, ss).mean(axis=(1, 3))
    color = rng.uniform(0.55, 1.0, size=channels)
    background = rng.uniform(0.0, 0.2, size=channels)
    img = background[:, None, None] + (color - background)[:, None, None] * mask[None]
    if clutter:
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        for _ in range(clutter):
            cy, cx = rng.uniform(0, size, size=2)
            dot = np.hypot(yy - cy, xx - cx) <= rng.uniform(1.0, 2.0)
            img[:, dot] = rng.uniform(0.3, 1.0, size=channels)[:, None]
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _title(rng: np.random.Generator, token: str) -> str:
    words = list(rng.choice(FILLER, size=int(rng.integers(1, 4))))
    words.insert(int(rng.integers(0, len(words) + 1)), token)
    return " ".join(str(w) for w in words).capitalize()


def generate(config: SynthConfig) -> tuple[list[SampleRecord], list[np.ndarray], LabelTable]:
    """Build records and images in memory (image paths are relative)."""
    table = LabelTable(config.classes, config.ambiguity)
    records, images = [], []
    for split_id, split in enumerate(("train", "validation", "test")):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, 101, split_id])))
        for i in range(getattr(config, split)):
            c = int(rng.integers(config.classes))
            ambiguous = rng.random() < config.ambiguity
            glyph, token = table.ambiguous(c) if ambiguous else table.clear(c)
            rotation, hflip, vflip = 0.0, False, False
            if split == "test":
                if config.test_rotation:
                    rotation = float(rng.uniform(-config.test_rotation, config.test_rotation))
                if config.test_flips:
                    hflip, vflip = bool(rng.random() < 0.5), bool(rng.random() < 0.5)
            img = render_glyph(glyph, rng, config.image_size, config.channels, config.noise, rotation, hflip, vflip,
                               config.clutter)
            ext = "ppm" if config.channels == 3 else "pgm"
            records.append(SampleRecord(f"{split}/{i:05d}.{ext}", table.class_names[c], _title(rng, token), split))
            images.append(img)
    return records, images, table


def write_dataset(out_dir: str | os.PathLike, config: SynthConfig) -> Manifest:
    """Generate a dataset under ``out_dir`` and write ``manifest.csv``."""
    out = Path(out_dir)
    records, images, _ = generate(config)
    for split in ("train", "validation", "test"):
        (out / split).mkdir(parents=True, exist_ok=True)
    for rec, img in zip(records, images):
        write_pnm(out / rec.image, img)
    write_manifest(out / "manifest.csv", records)
    return Manifest(tuple(records), str(out))


def in_memory_manifest(config: SynthConfig) -> tuple[Manifest, dict[str, np.ndarray]]:
    """Generate without touching disk: returns a manifest and a path -> image map."""
    records, images, _ = generate(config)
    return Manifest(tuple(records)), {r.image: img for r, img in zip(records, images)}
