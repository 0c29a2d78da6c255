"""
Toy datasets, the labeled / soft-labeled containers and their file format.

Dataset file layout (little endian):
    magic "ESD1" | u8 kind (0 labeled, 1 soft, 2 labeled + per-sample tags)
    | u32 ndim, u32 dims... (per-sample shape) | u32 n | u32 K | i32 epoch_tag
    | u16 name_len, name | float64 inputs | labels (i32 n) or soft labels
    (float64 n*K) | tags (i32 n, kind 2 only)
"""

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd

from src.config import Config
from src.errors import DatasetFormatError, DimensionError, DomainError

logger = logging.getLogger(__name__)

KIND_LABELED = 0
KIND_SOFT = 1
KIND_TAGGED = 2

DIGIT_GLYPHS = (
    ("..####..", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", "..####..", "........"),
    ("...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "..####..", "........"),
    ("..####..", ".#....#.", "......#.", ".....#..", "...##...", "..#.....", ".######.", "........"),
    (".#####..", "......#.", "......#.", "..####..", "......#.", "......#.", ".#####..", "........"),
    (".....#..", "....##..", "...#.#..", "..#..#..", ".######.", ".....#..", ".....#..", "........"),
    (".######.", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####..", "........"),
    ("..####..", ".#......", ".#......", ".#####..", ".#....#.", ".#....#.", "..####..", "........"),
    (".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "........"),
    ("..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", "..####..", "........"),
    ("..####..", ".#....#.", ".#....#.", "..#####.", "......#.", "......#.", "..####..", "........"),
)
DIGITS_SHAPE = (1, 8, 8)


@dataclass
class DistributionSpec:
    """Parameters a toy dataset was drawn from."""

    kind: str
    class_count: int
    spread: float
    centers: Optional[np.ndarray] = None
    shear: float = 0.0


@dataclass
class ShiftSpec:
    amount: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.amount <= 1.0:
            raise DomainError(f"shift amount must be in [0, 1], got {self.amount}")


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = ""
    source: Optional[DistributionSpec] = None
    tags: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) == 0:
            raise DomainError(f"dataset {self.name!r} is empty")
        if self.labels.shape != (len(self.inputs),):
            raise DimensionError(f"{len(self.inputs)} inputs but labels of shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DomainError(f"labels must lie in [0, {self.class_count})")
        if self.tags is not None:
            self.tags = np.asarray(self.tags, dtype=np.int64)
            if self.tags.shape != self.labels.shape:
                raise DimensionError("one tag per sample is required")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


@dataclass
class SoftDataset:
    """One epoch of synthetic inputs; ``soft_labels`` is None until labeled."""

    inputs: np.ndarray
    soft_labels: Optional[np.ndarray] = None
    epoch_tag: int = 0
    name: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.soft_labels is not None:
            self.soft_labels = np.asarray(self.soft_labels, dtype=np.float64)
            if self.soft_labels.ndim != 2 or len(self.soft_labels) != len(self.inputs):
                raise DimensionError(
                    f"{len(self.inputs)} inputs but soft labels of shape {self.soft_labels.shape}"
                )
            if (self.soft_labels < 0).any() or not np.allclose(
                self.soft_labels.sum(axis=1), 1.0, atol=1e-6, rtol=0.0
            ):
                raise DomainError("soft label rows must lie on the probability simplex")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def class_count(self) -> int:
        return 0 if self.soft_labels is None else self.soft_labels.shape[1]

    def with_labels(self, soft_labels: np.ndarray) -> "SoftDataset":
        return replace(self, soft_labels=soft_labels)


# ---------------------------------------------------------------------------
# generators


def _spawn(seed: int, count: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def _balanced_labels(n: int, class_count: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % class_count)


def _sample_blobs(spec: DistributionSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(0.0, spec.spread, size=(len(labels), spec.centers.shape[1]))
    return np.clip(spec.centers[labels] + noise, -1.0, 1.0)


def gen_blobs(K: int, dim: int, n: int, spread: float, seed: int) -> LabeledDataset:
    """K Gaussian clusters, balanced classes, clipped to [-1, 1]."""
    if K < 2 or n < K:
        raise DomainError(f"gen_blobs needs K >= 2 and n >= K, got K={K} n={n}")
    if dim < 1 or spread < 0:
        raise DomainError(f"invalid blobs shape: dim={dim} spread={spread}")
    center_rng, label_rng, sample_rng = _spawn(seed, 3)
    spec = DistributionSpec(
        kind="blobs",
        class_count=K,
        spread=spread,
        centers=center_rng.uniform(-0.5, 0.5, size=(K, dim)),
    )
    labels = _balanced_labels(n, K, label_rng)
    return LabeledDataset(_sample_blobs(spec, labels, sample_rng), labels, K, name="blobs", source=spec)


def _glyph_bank() -> np.ndarray:
    bank = np.array(
        [[[1.0 if ch == "#" else -1.0 for ch in row] for row in glyph] for glyph in DIGIT_GLYPHS]
    )
    return bank


def _shift_fill(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.full_like(image, -1.0)
    h, w = image.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = image[ys, xs]
    return out


def _shear(image: np.ndarray, amount: float) -> np.ndarray:
    out = np.empty_like(image)
    for row in range(image.shape[0]):
        offset = int(round(amount * (row - (image.shape[0] - 1) / 2.0)))
        out[row] = _shift_fill(image[row:row + 1], 0, offset)[0]
    return out


def _sample_digits(spec: DistributionSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    bank = _glyph_bank()
    images = np.empty((len(labels),) + DIGITS_SHAPE)
    for i, label in enumerate(labels):
        glyph = bank[label]
        if spec.shear:
            glyph = _shear(glyph, spec.shear)
        dy, dx = rng.integers(-1, 2, size=2)
        glyph = _shift_fill(glyph, int(dy), int(dx))
        images[i, 0] = glyph + rng.normal(0.0, spec.spread, size=glyph.shape)
    return np.clip(images, -1.0, 1.0)


def gen_digits_like(n: int, seed: int, noise: float = 0.25) -> LabeledDataset:
    """Ten hand-drawn 8x8 glyphs with one-pixel jitter and Gaussian noise."""
    if n < 10:
        raise DomainError(f"gen_digits_like needs n >= 10, got {n}")
    label_rng, sample_rng = _spawn(seed, 2)
    spec = DistributionSpec(kind="digits", class_count=10, spread=noise)
    labels = _balanced_labels(n, 10, label_rng)
    return LabeledDataset(_sample_digits(spec, labels, sample_rng), labels, 10, name="digits", source=spec)


def make_auxiliary(base: LabeledDataset, shift: ShiftSpec, seed: int) -> LabeledDataset:
    """
    Distribution-shifted sibling of ``base``: blob centers rotated by
    shift*pi/2 toward a random orthogonal direction, or glyphs sheared and
    noised harder. ``shift == 0`` reproduces the base parameters.
    """
    spec = base.source
    if spec is None:
        raise DomainError(f"dataset {base.name!r} carries no distribution parameters to shift")
    direction_rng, label_rng, sample_rng = _spawn(seed, 3)
    labels = _balanced_labels(len(base), spec.class_count, label_rng)

    if spec.kind == "blobs":
        theta = shift.amount * np.pi / 2.0
        rotated = np.empty_like(spec.centers)
        for k, center in enumerate(spec.centers):
            u = direction_rng.normal(size=center.shape)
            norm_c = np.dot(center, center)
            if norm_c > 0:
                u = u - (np.dot(u, center) / norm_c) * center
            u = u / max(np.linalg.norm(u), 1e-12) * np.sqrt(norm_c)
            rotated[k] = np.cos(theta) * center + np.sin(theta) * u
        shifted = replace(spec, centers=rotated)
        inputs = _sample_blobs(shifted, labels, sample_rng)
    elif spec.kind == "digits":
        shifted = replace(spec, shear=spec.shear + 1.2 * shift.amount, spread=spec.spread + 0.3 * shift.amount)
        inputs = _sample_digits(shifted, labels, sample_rng)
    else:
        raise DomainError(f"unknown distribution kind {spec.kind!r}")

    logger.info("Built auxiliary %s set (shift=%.2f, n=%d)", spec.kind, shift.amount, len(labels))
    return LabeledDataset(inputs, labels, spec.class_count, name=f"{base.name}-aux", source=shifted)


def train_test_split(
    dataset: LabeledDataset, test_fraction: float, seed: int
) -> Tuple[LabeledDataset, LabeledDataset]:
    """Stratified split; the two index sets are disjoint."""
    if not 0.0 < test_fraction < 1.0:
        raise DomainError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for k in range(dataset.class_count):
        members = rng.permutation(np.flatnonzero(dataset.labels == k))
        cut = int(round(len(members) * test_fraction))
        test_idx.append(members[:cut])
        train_idx.append(members[cut:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))

    def subset(idx: np.ndarray, suffix: str) -> LabeledDataset:
        return LabeledDataset(
            dataset.inputs[idx],
            dataset.labels[idx],
            dataset.class_count,
            name=f"{dataset.name}-{suffix}",
            source=dataset.source,
        )

    return subset(train_idx, "train"), subset(test_idx, "test")


# ---------------------------------------------------------------------------
# file format

AnyDataset = Union[LabeledDataset, SoftDataset]


def save_dataset(dataset: AnyDataset, path: Union[str, Path]) -> None:
    path = Path(path)
    inputs = dataset.inputs
    shape = inputs.shape[1:]
    if isinstance(dataset, SoftDataset):
        if dataset.soft_labels is None:
            raise DomainError("cannot save a synthetic dataset before it is labeled")
        kind, class_count, epoch_tag = KIND_SOFT, dataset.class_count, dataset.epoch_tag
    else:
        kind = KIND_LABELED if dataset.tags is None else KIND_TAGGED
        class_count, epoch_tag = dataset.class_count, 0
    name = dataset.name.encode("utf-8")

    chunks = [
        Config.DATASET_MAGIC,
        struct.pack("<BI", kind, len(shape)),
        struct.pack(f"<{len(shape)}I", *shape),
        struct.pack("<IIi", len(inputs), class_count, epoch_tag),
        struct.pack("<H", len(name)) + name,
        inputs.astype("<f8").tobytes(),
    ]
    if kind == KIND_SOFT:
        chunks.append(dataset.soft_labels.astype("<f8").tobytes())
    else:
        chunks.append(dataset.labels.astype("<i4").tobytes())
        if kind == KIND_TAGGED:
            chunks.append(dataset.tags.astype("<i4").tobytes())

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    logger.info("Saved dataset %s (%d samples)", path, len(inputs))


class _Cursor:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.blob):
            raise DatasetFormatError(f"{self.path}: short dataset file")
        chunk = self.blob[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(width * count), dtype=dtype)


def load_dataset(path: Union[str, Path]) -> AnyDataset:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        logger.error("Failed to read dataset %s: %s", path, e)
        raise DatasetFormatError(f"{path}: {e}") from e

    cursor = _Cursor(blob, path)
    if cursor.take(len(Config.DATASET_MAGIC)) != Config.DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: wrong magic")
    kind, ndim = cursor.unpack("<BI")
    if kind not in (KIND_LABELED, KIND_SOFT, KIND_TAGGED):
        raise DatasetFormatError(f"{path}: unknown dataset kind {kind}")
    shape = cursor.unpack(f"<{ndim}I")
    n, class_count, epoch_tag = cursor.unpack("<IIi")
    (name_len,) = cursor.unpack("<H")
    name = cursor.take(name_len).decode("utf-8")
    inputs = cursor.array("<f8", n * int(np.prod(shape))).astype(np.float64).reshape((n,) + tuple(shape))

    try:
        if kind == KIND_SOFT:
            soft = cursor.array("<f8", n * class_count).astype(np.float64).reshape(n, class_count)
            dataset: AnyDataset = SoftDataset(inputs, soft, epoch_tag=epoch_tag, name=name)
        else:
            labels = cursor.array("<i4", n).astype(np.int64)
            tags = cursor.array("<i4", n).astype(np.int64) if kind == KIND_TAGGED else None
            dataset = LabeledDataset(inputs, labels, class_count, name=name, tags=tags)
    except (DomainError, DimensionError) as e:
        raise DatasetFormatError(f"{path}: {e}") from e
    if cursor.offset != len(blob):
        raise DatasetFormatError(f"{path}: trailing bytes")
    return dataset


def export_csv(dataset: AnyDataset, path: Union[str, Path]) -> pd.DataFrame:
    """One row per sample, flattened inputs first, label column(s) last."""
    flat = dataset.inputs.reshape(len(dataset), -1)
    df = pd.DataFrame(flat, columns=[f"x{i}" for i in range(flat.shape[1])])
    if isinstance(dataset, SoftDataset):
        if dataset.soft_labels is not None:
            for k in range(dataset.class_count):
                df[f"p{k}"] = dataset.soft_labels[:, k]
    else:
        if dataset.tags is not None:
            df["epoch"] = dataset.tags
        df["label"] = dataset.labels
    df.to_csv(path, index=False)
    logger.info("Exported %d rows to %s", len(df), path)
    return df
