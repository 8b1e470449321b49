"""Embedding datasets: in-memory representation, the ZSED container format,
split validation, per-class queries, and a synthetic generator for
desk-scale verification.

ZSED layout (all integers little-endian u32, all reals little-endian
float32): magic "ZSED", version, d_I, d_T, item_count, class_count,
seen_count + seen ids, unseen_count + unseen ids, then per item a class
label followed by the image and text embeddings.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    CenterSamplingFailed,
    DanglingLabel,
    EmptyClass,
    FormatError,
    SpecInvalid,
    SplitOverlap,
    UnknownClass,
    VersionMismatch,
)

MAGIC = b"ZSED"
VERSION = 1
MAX_CENTER_REJECTIONS = 100_000
CENTER_COS_LIMIT = 0.7


@dataclass
class EmbeddingDataset:
    """Per-item image/text embeddings with a disjoint seen/unseen class split."""

    images: np.ndarray  # (n, d_i) float32
    texts: np.ndarray  # (n, d_t) float32
    labels: np.ndarray  # (n,) uint32
    seen: tuple[int, ...]
    unseen: tuple[int, ...]

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.texts = np.ascontiguousarray(self.texts, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        self.seen = tuple(sorted(int(c) for c in self.seen))
        self.unseen = tuple(sorted(int(c) for c in self.unseen))

    @property
    def d_i(self) -> int:
        return self.images.shape[1]

    @property
    def d_t(self) -> int:
        return self.texts.shape[1]

    @property
    def item_count(self) -> int:
        return self.images.shape[0]

    @property
    def class_count(self) -> int:
        return len(self.seen) + len(self.unseen)

    def items_of(self, class_id: int) -> np.ndarray:
        """Indices of all items carrying the given label."""
        return np.nonzero(self.labels == np.uint32(class_id))[0]


def validate_split(ds: EmbeddingDataset) -> None:
    """Check the split invariants; raises on the first violation."""
    overlap = set(ds.seen) & set(ds.unseen)
    if overlap:
        raise SplitOverlap(f"classes in both splits: {sorted(overlap)}")
    declared = set(ds.seen) | set(ds.unseen)
    present = set(int(c) for c in np.unique(ds.labels))
    dangling = present - declared
    if dangling:
        raise DanglingLabel(f"items reference undeclared classes: {sorted(dangling)}")
    empty = declared - present
    if empty:
        raise EmptyClass(f"declared classes with no items: {sorted(empty)}")


def save_dataset(ds: EmbeddingDataset, path) -> None:
    validate_split(ds)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<6I", VERSION, ds.d_i, ds.d_t, ds.item_count, ds.class_count, len(ds.seen)))
        fh.write(struct.pack(f"<{len(ds.seen)}I", *ds.seen))
        fh.write(struct.pack("<I", len(ds.unseen)))
        if ds.unseen:
            fh.write(struct.pack(f"<{len(ds.unseen)}I", *ds.unseen))
        for k in range(ds.item_count):
            fh.write(struct.pack("<I", int(ds.labels[k])))
            fh.write(ds.images[k].astype("<f4").tobytes())
            fh.write(ds.texts[k].astype("<f4").tobytes())


def load_dataset(path) -> EmbeddingDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if len(raw) < 4 or bytes(view[:4]) != MAGIC:
        raise FormatError(f"{path}: bad magic")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise FormatError(f"{path}: truncated file")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {VERSION}")
    d_i, d_t, item_count, class_count, seen_count = take("<5I")
    seen = take(f"<{seen_count}I") if seen_count else ()
    (unseen_count,) = take("<I")
    unseen = take(f"<{unseen_count}I") if unseen_count else ()
    if seen_count + unseen_count != class_count:
        raise FormatError(f"{path}: class_count {class_count} != {seen_count}+{unseen_count}")
    images = np.empty((item_count, d_i), dtype=np.float32)
    texts = np.empty((item_count, d_t), dtype=np.float32)
    labels = np.empty(item_count, dtype=np.uint32)
    rec = 4 + 4 * d_i + 4 * d_t
    if off + rec * item_count > len(raw):
        raise FormatError(f"{path}: truncated file")
    for k in range(item_count):
        (labels[k],) = struct.unpack_from("<I", raw, off)
        images[k] = np.frombuffer(raw, dtype="<f4", count=d_i, offset=off + 4)
        texts[k] = np.frombuffer(raw, dtype="<f4", count=d_t, offset=off + 4 + 4 * d_i)
        off += rec
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    ds = EmbeddingDataset(images, texts, labels, seen, unseen)
    validate_split(ds)
    return ds


@dataclass(frozen=True)
class ClassQuery:
    class_id: int
    phi_t: np.ndarray  # (d_t,) float32


def per_class_text_embedding(ds: EmbeddingDataset, class_id: int) -> ClassQuery:
    """Arithmetic mean of the class's item text embeddings."""
    idx = ds.items_of(class_id)
    if idx.size == 0:
        raise UnknownClass(f"class {class_id} has no items in this dataset")
    phi = ds.texts[idx].mean(axis=0, dtype=np.float64).astype(np.float32)
    return ClassQuery(int(class_id), phi)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a separable synthetic world with a known cross-modal map."""

    n_classes: int
    n_seen: int
    items_per_class: int
    d_i: int
    d_t: int
    image_noise_std: float
    text_noise_std: float
    seed: int

    def validate(self):
        if not (1 <= self.n_seen < self.n_classes):
            raise SpecInvalid(f"need 1 <= n_seen < n_classes, got {self.n_seen}/{self.n_classes}")
        if self.items_per_class < 1:
            raise SpecInvalid("items_per_class must be >= 1")
        if self.d_i < 1 or self.d_t < 1:
            raise SpecInvalid("embedding dimensions must be positive")
        if self.image_noise_std < 0 or self.text_noise_std < 0:
            raise SpecInvalid("noise standard deviations must be non-negative")


def synth_generate(spec: SyntheticSpec) -> EmbeddingDataset:
    """Deterministic synthetic dataset.

    Each class gets a unit-norm image-space center (rejection-sampled so all
    pairwise cosine similarities stay below 0.7). Items are relu(center +
    noise) on the image side and a fixed random linear map of the center
    plus noise on the text side, so a learnable cross-modal mapping exists
    by construction. The first n_seen classes are seen.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centers = _sample_centers(spec.n_classes, spec.d_i, rng)
    text_map = rng.standard_normal((spec.d_i, spec.d_t)) / np.sqrt(spec.d_i)

    n = spec.n_classes * spec.items_per_class
    images = np.empty((n, spec.d_i), dtype=np.float32)
    texts = np.empty((n, spec.d_t), dtype=np.float32)
    labels = np.empty(n, dtype=np.uint32)
    k = 0
    for y in range(spec.n_classes):
        base_text = centers[y] @ text_map
        for _ in range(spec.items_per_class):
            img = centers[y] + spec.image_noise_std * rng.standard_normal(spec.d_i)
            images[k] = np.maximum(img, 0.0)
            texts[k] = base_text + spec.text_noise_std * rng.standard_normal(spec.d_t)
            labels[k] = y
            k += 1
    seen = tuple(range(spec.n_seen))
    unseen = tuple(range(spec.n_seen, spec.n_classes))
    return EmbeddingDataset(images, texts, labels, seen, unseen)


def _sample_centers(n_classes: int, d_i: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((n_classes, d_i))
    rejections = 0
    have = 0
    while have < n_classes:
        v = rng.standard_normal(d_i)
        v /= np.linalg.norm(v)
        if have and np.max(centers[:have] @ v) >= CENTER_COS_LIMIT:
            rejections += 1
            if rejections > MAX_CENTER_REJECTIONS:
                raise CenterSamplingFailed(
                    f"could not place {n_classes} centers with pairwise cosine < {CENTER_COS_LIMIT}"
                )
            continue
        centers[have] = v
        have += 1
    return centers
