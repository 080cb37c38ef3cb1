"""Dataset container, synthetic generators, splits, and binary file I/O.

Images are integer grids (uint8, 0..255) so that hashing is exact; base
learners convert to unit-scaled reals internally. All generators are pure
functions of their seeds via PCG64.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_MAGIC = b"DPAD"
_VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed or out-of-range dataset file."""


@dataclass(frozen=True)
class LabeledSample:
    pixels: np.ndarray  # (H, W, C) uint8
    label: int


@dataclass(frozen=True)
class Dataset:
    pixels: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray  # (N,) int64
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise ValueError("pixels must be (N, H, W, C)")
        if self.pixels.shape[0] != self.labels.shape[0]:
            raise ValueError("pixels/labels length mismatch")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape[1:]

    @property
    def input_dim(self) -> int:
        h, w, c = self.shape
        return h * w * c

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(self.pixels[i], int(self.labels[i]))

    def take(self, indices: np.ndarray, provenance: str | None = None) -> Dataset:
        return Dataset(self.pixels[indices], self.labels[indices],
                       self.num_classes,
                       provenance if provenance is not None else self.provenance)


def generate_blobs(seed: int, num_classes: int, per_class: int,
                   shape: tuple[int, int, int], noise: int = 20) -> Dataset:
    """Class-template images plus bounded uniform pixel noise.

    Each class gets one random uint8 template; samples are the template
    plus integer noise in [-noise, noise], clamped to [0, 255].
    """
    h, w, c = shape
    if h < 4 or w < 4 or c < 1:
        raise ValueError(f"shape must be at least 4x4x1, got {shape}")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    templates = rng.integers(0, 256, size=(num_classes, h, w, c), dtype=np.int64)
    pixels = np.repeat(templates, per_class, axis=0)
    if noise > 0:
        pixels = pixels + rng.integers(-noise, noise + 1, size=pixels.shape)
    pixels = np.clip(pixels, 0, 255).astype(np.uint8)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    return Dataset(pixels, labels, num_classes,
                   provenance=f"blobs(seed={seed}, classes={num_classes}, "
                              f"per_class={per_class}, shape={shape}, noise={noise})")


def split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle then prefix/suffix split into (first, rest)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    n = len(dataset)
    cut = round(fraction * n)
    if cut == 0 or cut == n:
        raise ValueError("split would leave one side empty")
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(n)
    prov = dataset.provenance
    return (dataset.take(perm[:cut], f"{prov} | split[:{fraction}] seed={seed}"),
            dataset.take(perm[cut:], f"{prov} | split[{fraction}:] seed={seed}"))


def subsample_fraction(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Seeded uniform subset of size round(fraction * N), without replacement."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    n = len(dataset)
    size = round(fraction * n)
    if size == 0:
        raise ValueError("subsample would be empty")
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = rng.choice(n, size=size, replace=False)
    return dataset.take(np.sort(idx),
                        f"{dataset.provenance} | subsample({fraction}) seed={seed}")


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Binary record file plus a JSON manifest with the provenance string."""
    path = Path(path)
    h, w, c = dataset.shape
    n = len(dataset)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IIIIII", _VERSION, h, w, c, dataset.num_classes, n))
        labels = dataset.labels.astype("<u2")
        flat = dataset.pixels.reshape(n, h * w * c)
        for i in range(n):
            f.write(labels[i].tobytes())
            f.write(flat[i].tobytes())
    manifest = {"provenance": dataset.provenance, "num_samples": n,
                "shape": [h, w, c], "num_classes": dataset.num_classes}
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 + 24:
        raise DatasetFormatError(f"{path}: truncated header")
    if raw[:4] != _MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, h, w, c, num_classes, n = struct.unpack("<IIIIII", raw[4:28])
    if version != _VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    rec = 2 + h * w * c
    body = raw[28:]
    if len(body) != n * rec:
        raise DatasetFormatError(f"{path}: expected {n * rec} record bytes, "
                                 f"got {len(body)}")
    labels = np.empty(n, dtype=np.int64)
    pixels = np.empty((n, h, w, c), dtype=np.uint8)
    for i in range(n):
        off = i * rec
        labels[i] = struct.unpack_from("<H", body, off)[0]
        pixels[i] = np.frombuffer(body, dtype=np.uint8, count=h * w * c,
                                  offset=off + 2).reshape(h, w, c)
    if n and labels.max() >= num_classes:
        raise DatasetFormatError(f"{path}: label {labels.max()} out of range "
                                 f"for {num_classes} classes")
    manifest_path = Path(str(path) + ".json")
    provenance = str(path)
    if manifest_path.exists():
        provenance = json.loads(manifest_path.read_text()).get("provenance", provenance)
    return Dataset(pixels, labels, num_classes, provenance)
