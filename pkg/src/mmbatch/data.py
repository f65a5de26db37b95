"""Manifest-driven multimodal data loading.

A manifest is a UTF-8 CSV with header ``image,description,aux,split``. The
``description`` column carries the label-bearing text, ``aux`` the extra
input (a title, or plane information such as ``"hd vf yes"``).
"""

from __future__ import annotations

import csv
import io
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np

from .augment import AugmentPolicy, RngStream, TransformParams, augment_batch
from .checkpoint import load_checkpoint
from .errors import ManifestError
from .pnm import read_pnm

SPLITS = ("train", "validation", "test")
COLUMNS = ("image", "description", "aux", "split")


@dataclass(frozen=True)
class SampleRecord:
    image: str
    description: str
    aux: str
    split: str

    def __post_init__(self):
        if not self.image:
            raise ManifestError("image path must be non-empty")
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class Manifest:
    records: tuple[SampleRecord, ...] = ()
    root: Optional[str] = None
    splits: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        index = {s: [] for s in SPLITS}
        for i, rec in enumerate(self.records):
            index[rec.split].append(i)
        object.__setattr__(self, "splits", {s: tuple(v) for s, v in index.items()})

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[SampleRecord]:
        return [self.records[i] for i in self.indices(name)]

    def indices(self, name: str) -> tuple[int, ...]:
        if name not in self.splits:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")
        return self.splits[name]

    def resolve(self, record: SampleRecord) -> str:
        if self.root is None or os.path.isabs(record.image):
            return record.image
        return os.path.join(self.root, record.image)

    def replace_records(self, records: Iterable[SampleRecord]) -> "Manifest":
        return Manifest(tuple(records), self.root)


def parse_manifest(data: bytes | str, root: Optional[str] = None) -> Manifest:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    rows = csv.reader(io.StringIO(text, newline=""))
    header = next(rows, None)
    if header is None:
        return Manifest((), root)
    header = [h.strip() for h in header]
    for col in COLUMNS:
        if col not in header:
            raise ManifestError(f"row 1: missing column {col!r}")
    pos = [header.index(col) for col in COLUMNS]
    records = []
    for rownum, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ManifestError(f"row {rownum}: expected {len(header)} fields, got {len(row)}")
        image, description, aux, split = (row[p] for p in pos)
        if split not in SPLITS:
            raise ManifestError(f"row {rownum}: unknown split {split!r}")
        if not image:
            raise ManifestError(f"row {rownum}: empty image path")
        records.append(SampleRecord(image, description, aux, split))
    return Manifest(tuple(records), root)


def encode_manifest(manifest: Manifest | Iterable[SampleRecord]) -> bytes:
    records = manifest.records if isinstance(manifest, Manifest) else manifest
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in records:
        writer.writerow((r.image, r.description, r.aux, r.split))
    return buf.getvalue().encode("utf-8")


def read_manifest(path: str | os.PathLike) -> Manifest:
    path = Path(path)
    return parse_manifest(path.read_bytes(), root=str(path.parent))


def write_manifest(path: str | os.PathLike, manifest: Manifest | Iterable[SampleRecord]) -> None:
    Path(path).write_bytes(encode_manifest(manifest))


def extract_label(description: str, detect_word: str) -> bool:
    """True when ``detect_word`` occurs in ``description`` as a whole word (any case)."""
    if not detect_word:
        raise ValueError("detect_word must be non-empty")
    pattern = r"(?<!\w)" + re.escape(detect_word) + r"(?!\w)"
    return re.search(pattern, description, flags=re.IGNORECASE) is not None


# --- plane information -----------------------------------------------------

@dataclass(frozen=True)
class PlaneInfo:
    head: str  # "hu" | "hd"
    view: str  # "vb" | "vf"
    invasive: bool

    def __post_init__(self):
        if self.head not in ("hu", "hd"):
            raise ValueError(f"head orientation must be 'hu' or 'hd', got {self.head!r}")
        if self.view not in ("vb", "vf"):
            raise ValueError(f"view must be 'vb' or 'vf', got {self.view!r}")

    @property
    def bits(self) -> tuple[int, int, int]:
        return int(self.head == "hd"), int(self.view == "vf"), int(self.invasive)


_INVASIVE = {"yes": True, "invasive": True, "no": False, "noninvasive": False, "non-invasive": False}


def parse_plane_info(text: str) -> PlaneInfo:
    head = view = None
    invasive = None
    for tok in text.lower().replace(",", " ").split():
        if tok in ("hu", "hd"):
            head = tok
        elif tok in ("vb", "vf"):
            view = tok
        elif tok in _INVASIVE:
            invasive = _INVASIVE[tok]
    if head is None or view is None or invasive is None:
        raise ValueError(f"incomplete plane information: {text!r}")
    return PlaneInfo(head, view, invasive)


def encode_plane_info(info: PlaneInfo) -> float:
    """Scalar code ``(4*hd + 2*vf + invasive) / 7`` in [0, 1]."""
    hd, vf, inv = info.bits
    return (4 * hd + 2 * vf + inv) / 7.0


def encode_plane_features(info: PlaneInfo) -> np.ndarray:
    """Alternative encoding: the three binary indicators."""
    return np.asarray(info.bits, dtype=np.float32)


# --- titles and vocabulary ---------------------------------------------------

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(title: str) -> list[str]:
    """Lowercase, split on whitespace, and split off each punctuation character."""
    return _TOKEN_RE.findall(title.lower())


class Vocabulary:
    """Token ids with ``<unk>`` = 0 and ``<pad>`` = 1 reserved."""

    UNK = 0
    PAD = 1
    SPECIALS = ("<unk>", "<pad>")

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(self.SPECIALS)
        self.stoi: dict[str, int] = {}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, self.UNK)

    def encode(self, title: str) -> list[int]:
        return [self.lookup(t) for t in tokenize(title)]

    @property
    def tokens(self) -> list[str]:
        return self.itos[len(self.SPECIALS):]

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(line for line in text.split("\n") if line)


def build_vocab(titles: Iterable[str]) -> Vocabulary:
    vocab = Vocabulary()
    for title in titles:
        for tok in tokenize(title):
            vocab.add(tok)
    return vocab


def filter_titles(records: Iterable[SampleRecord]) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Drop training records whose title (``aux``) is shorter than two characters.

    Returns ``(kept, dropped)``; validation and test records are always kept.
    """
    kept, dropped = [], []
    for rec in records:
        if rec.split == "train" and len(rec.aux.strip()) < 2:
            dropped.append(rec)
        else:
            kept.append(rec)
    return kept, dropped


# --- labels ----------------------------------------------------------------

@dataclass(frozen=True)
class Labeler:
    """Maps a record's description to a class index.

    With ``detect_word`` set, labels are binary (0 negative, 1 positive).
    Otherwise the description is a class name looked up in ``classes``.
    """

    detect_word: Optional[str] = None
    classes: tuple[str, ...] = ()

    @classmethod
    def from_manifest(cls, manifest: Manifest, detect_word: Optional[str] = None) -> "Labeler":
        if detect_word:
            return cls(detect_word=detect_word)
        names = sorted({r.description.strip() for r in manifest.split("train")})
        return cls(classes=tuple(names))

    @property
    def num_classes(self) -> int:
        return 2 if self.detect_word else len(self.classes)

    def __call__(self, record: SampleRecord) -> int:
        if self.detect_word:
            return int(extract_label(record.description, self.detect_word))
        name = record.description.strip()
        try:
            return self.classes.index(name)
        except ValueError:
            raise ValueError(f"unknown class label {name!r} for image {record.image!r}") from None


# --- batching ----------------------------------------------------------------

def make_batches(
    manifest: Manifest,
    split: str,
    batch_size: int,
    shuffle: bool = False,
    seed: int = 0,
    epoch: int = 0,
) -> list[list[int]]:
    """Partition a split into batches of manifest indices; only the last may be short."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = np.asarray(manifest.indices(split), dtype=np.int64)
    if shuffle and order.size:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 7, epoch])))
        order = order[rng.permutation(order.size)]
    return [order[i : i + batch_size].tolist() for i in range(0, order.size, batch_size)]


class ImageStore:
    """Loads and caches images referenced by a manifest.

    PPM/PGM files are decoded to float [0, 1]; ``.mmck`` files hold a raw
    ``C x H x W`` tensor (the first one stored, or the one named ``image``).
    """

    def __init__(self, manifest: Manifest, images: Optional[Mapping[str, np.ndarray]] = None):
        self.manifest = manifest
        self._cache: dict[str, np.ndarray] = dict(images or {})

    def load(self, record: SampleRecord) -> np.ndarray:
        path = self.manifest.resolve(record)
        img = self._cache.get(path)
        if img is None:
            img = self._cache[path] = load_image(path)
        return img


def load_image(path: str | os.PathLike) -> np.ndarray:
    if str(path).endswith(".mmck"):
        tensors = load_checkpoint(path)
        if not tensors:
            raise ValueError(f"{path}: empty tensor file")
        img = tensors.get("image", next(iter(tensors.values())))
        if img.ndim == 2:
            img = img[None]
        return img.astype(np.float32)
    return read_pnm(path)


@dataclass
class Batch:
    images: Optional[np.ndarray]
    labels: np.ndarray
    records: list[SampleRecord]
    indices: list[int]
    params: list[TransformParams]

    def __len__(self) -> int:
        return len(self.records)


StreamFactory = Callable[..., RngStream]


class DataLoader:
    """Yields augmented :class:`Batch` objects for one split, one epoch at a time.

    Random draws are keyed by ``(seed, epoch, batch, sample, phase)`` through
    ``stream_factory``, so prefetching in worker threads does not change
    results. Batches are always delivered in order.
    """

    def __init__(
        self,
        manifest: Manifest,
        split: str,
        batch_size: int,
        policy: AugmentPolicy,
        labeler: Callable[[SampleRecord], int],
        *,
        shuffle: bool = False,
        seed: int = 0,
        phase: int = 0,
        store: Optional[ImageStore] = None,
        prefetch: int = 0,
        stream_factory: StreamFactory = RngStream,
        images: bool = True,
    ):
        manifest.indices(split)
        self.manifest = manifest
        self.split = split
        self.batch_size = batch_size
        self.policy = policy
        self.labeler = labeler
        self.shuffle = shuffle
        self.seed = seed
        self.phase = phase
        self.store = store or ImageStore(manifest)
        self.prefetch = prefetch
        self.stream_factory = stream_factory
        self.with_images = images

    def __len__(self) -> int:
        n = len(self.manifest.indices(self.split))
        return -(-n // self.batch_size)

    def num_samples(self) -> int:
        return len(self.manifest.indices(self.split))

    def build(self, epoch: int, j: int, indices: Sequence[int]) -> Batch:
        records = [self.manifest.records[i] for i in indices]
        labels = np.asarray([self.labeler(r) for r in records], dtype=np.int64)
        if not self.with_images:
            return Batch(None, labels, records, list(indices), [])
        images = [self.store.load(r) for r in records]
        streams = [self.stream_factory(self.seed, epoch, j, s, self.phase) for s in range(len(records))]
        batch_stream = self.stream_factory(self.seed, epoch, j, None, self.phase)
        out, params = augment_batch(images, self.policy, streams, batch_stream)
        return Batch(out, labels, records, list(indices), params)

    def epoch(self, epoch: int = 0) -> Iterator[Batch]:
        plan = make_batches(self.manifest, self.split, self.batch_size, self.shuffle, self.seed, epoch)
        if self.prefetch <= 0:
            for j, idx in enumerate(plan):
                yield self.build(epoch, j, idx)
            return
        with ThreadPoolExecutor(max_workers=self.prefetch) as pool:
            pending = []
            for j, idx in enumerate(plan):
                pending.append(pool.submit(self.build, epoch, j, idx))
                if len(pending) > self.prefetch:
                    yield pending.pop(0).result()
            for fut in pending:
                yield fut.result()
