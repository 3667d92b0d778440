"""UTKFace-style ingestion: labels from filenames, part I/II/III splits,
preprocessing to normalized 3x48x48 tensors, and seeded batch iteration.

Filenames follow the ``age_gender_race_whatever.ext`` convention; the three
leading underscore-separated integers are the labels and the remainder is
ignored. Part 1 is the training split, part 2 test, part 3 validation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .imgio import read_image
from .tensor import Tensor

__all__ = [
    "AGE_RANGE",
    "GENDER_NAMES",
    "ETHNICITY_NAMES",
    "EXPECTED_SPLIT_SIZES",
    "FilenameError",
    "LabelTriple",
    "LabelBatch",
    "Dataset",
    "parse_utk_filename",
    "load_split",
    "preprocess",
    "resize_bilinear",
    "batch_iter",
]

log = logging.getLogger("facemtl.data")

AGE_RANGE = (0, 116)
GENDER_NAMES = ("male", "female")
ETHNICITY_NAMES = ("White", "Black", "Asian", "Indian", "Others")
EXPECTED_SPLIT_SIZES = {1: 10437, 2: 10719, 3: 3252}
INPUT_HW = 48
SPLIT_NAMES = {1: "train", 2: "test", 3: "val"}


class FilenameError(ValueError):
    """Filename does not follow the age_gender_race_* convention."""


@dataclass(frozen=True)
class LabelTriple:
    age: int        # years, 0..116
    gender: int     # 0 male, 1 female
    ethnicity: int  # 0 White, 1 Black, 2 Asian, 3 Indian, 4 Others

    def __post_init__(self):
        if not (AGE_RANGE[0] <= self.age <= AGE_RANGE[1]):
            raise FilenameError(f"age {self.age} outside {AGE_RANGE}")
        if self.gender not in (0, 1):
            raise FilenameError(f"gender {self.gender} not in {{0, 1}}")
        if not (0 <= self.ethnicity < len(ETHNICITY_NAMES)):
            raise FilenameError(f"ethnicity {self.ethnicity} not in 0..4")


@dataclass
class LabelBatch:
    """Column-wise labels for a batch; aligned with the image order."""

    age: np.ndarray
    gender: np.ndarray
    ethnicity: np.ndarray

    @classmethod
    def from_triples(cls, triples: Sequence[LabelTriple]) -> "LabelBatch":
        return cls(
            age=np.array([t.age for t in triples], dtype=np.float32),
            gender=np.array([t.gender for t in triples], dtype=np.float32),
            ethnicity=np.array([t.ethnicity for t in triples], dtype=np.int64),
        )

    def take(self, indices) -> "LabelBatch":
        return LabelBatch(self.age[indices], self.gender[indices], self.ethnicity[indices])

    def __len__(self) -> int:
        return len(self.age)


def parse_utk_filename(name: str) -> LabelTriple:
    """Extract (age, gender, ethnicity) from the leading integer fields."""
    stem = Path(name).name
    if "." in stem:
        stem = stem[: stem.rindex(".")]
    parts = stem.split("_")
    if len(parts) < 3:
        raise FilenameError(f"{name!r}: expected at least 3 underscore-separated fields")
    try:
        age, gender, ethnicity = (int(parts[i]) for i in range(3))
    except ValueError as exc:
        raise FilenameError(f"{name!r}: non-integer label field") from exc
    return LabelTriple(age=age, gender=gender, ethnicity=ethnicity)


@dataclass
class Dataset:
    """A split's samples: image paths (or preloaded arrays) plus labels."""

    split: str
    samples: list[tuple[Path | None, LabelTriple]]
    masked: bool = False
    images: np.ndarray | None = field(default=None, repr=False)  # (N, 3, 48, 48) float32

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> LabelBatch:
        return LabelBatch.from_triples([lt for _, lt in self.samples])

    @classmethod
    def from_arrays(cls, images: np.ndarray, labels: Sequence[LabelTriple],
                    split: str = "memory", masked: bool = False) -> "Dataset":
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1:] != (3, INPUT_HW, INPUT_HW):
            raise ValueError(f"expected (N, 3, {INPUT_HW}, {INPUT_HW}) images, got {images.shape}")
        if len(images) != len(labels):
            raise ValueError("images and labels misaligned")
        return cls(split=split, samples=[(None, lt) for lt in labels],
                   masked=masked, images=images)

    def load_images(self, indices: Sequence[int]) -> np.ndarray:
        if self.images is not None:
            return self.images[np.asarray(indices)]
        out = np.empty((len(indices), 3, INPUT_HW, INPUT_HW), dtype=np.float32)
        for row, i in enumerate(indices):
            path, _ = self.samples[i]
            out[row] = preprocess(path).data
        return out

    def preload(self) -> "Dataset":
        """Decode and cache every image in memory (≈1.1 MB per 100 images)."""
        if self.images is None:
            self.images = self.load_images(range(len(self)))
        return self


def load_split(root_dir: str | Path, part: int) -> Dataset:
    """Enumerate ``root/part{part}`` in lexicographic filename order.

    Malformed filenames are skipped with a warning; the sample count is
    checked against the published split sizes (warning only on mismatch).
    """
    if part not in (1, 2, 3):
        raise ValueError(f"part must be 1, 2 or 3, got {part}")
    directory = Path(root_dir) / f"part{part}"
    if not directory.is_dir():
        raise FileNotFoundError(f"split directory not found: {directory}")
    samples: list[tuple[Path | None, LabelTriple]] = []
    skipped = 0
    files = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in (".png", ".ppm") and p.is_file())
    for path in files:
        try:
            samples.append((path, parse_utk_filename(path.name)))
        except FilenameError as exc:
            skipped += 1
            log.warning("skipping %s: %s", path.name, exc)
    expected = EXPECTED_SPLIT_SIZES[part]
    if len(samples) != expected:
        log.warning("part %d has %d samples, expected %d", part, len(samples), expected)
    if skipped:
        log.warning("part %d: skipped %d malformed filenames", part, skipped)
    log.info("part %d: %d samples", part, len(samples))
    return Dataset(split=SPLIT_NAMES[part], samples=samples)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-center alignment, channels last."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None] if img.ndim == 3 else (ys - y0)[:, None]
    wx = (xs - x0)[None, :, None] if img.ndim == 3 else (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def preprocess(image: str | Path | np.ndarray) -> Tensor:
    """Decode (if needed), resize to 48x48 bilinearly, scale to [0, 1], and
    return a 3x48x48 RGB tensor."""
    arr = read_image(image) if isinstance(image, (str, Path)) else np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 RGB image, got shape {arr.shape}")
    resized = resize_bilinear(arr.astype(np.float64) / 255.0, INPUT_HW, INPUT_HW)
    return Tensor(np.clip(resized, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32))


def batch_iter(
    ds: Dataset,
    batch_size: int,
    seed=0,
    shuffle: bool = True,
) -> Iterator[tuple[Tensor, LabelBatch]]:
    """Yield (images, labels) batches covering every sample exactly once.

    Order is a seeded permutation when ``shuffle`` else the dataset's
    lexicographic order; the last partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    if n == 0:
        raise ValueError("batch_iter: empty dataset")
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    labels = ds.labels
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield Tensor(ds.load_images(idx)), labels.take(idx)
