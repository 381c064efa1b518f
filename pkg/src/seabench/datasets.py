"""Dataset handles and parsers for the MNIST IDX and CIFAR-10 binary formats.

Pixels are scaled to [0, 1] floats and quantized at exponent 0, so a raw byte
255 becomes the int8 value 127. IDX files stay big-endian per their spec;
gzip-compressed files are accepted transparently.
"""

from __future__ import annotations

import gzip
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .qtensor import quantize

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixels

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class DatasetHandle:
    """int8 image tensors plus integer labels for one split."""

    images: np.ndarray
    labels: np.ndarray
    split: str
    provenance: str = "file"
    num_classes: int = 10

    def __post_init__(self):
        if self.images.dtype != np.int8:
            raise ValidationError("images must be int8")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValidationError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError("labels out of range")

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, n: int) -> "DatasetHandle":
        return DatasetHandle(self.images[:n], self.labels[:n], self.split,
                             self.provenance, self.num_classes)


def quantize_pixels(pixels01: np.ndarray) -> np.ndarray:
    """[0, 1] floats to the input exponent-0 int8 domain."""
    return quantize(pixels01, 0).values


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _find_file(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        p = directory / name
        if p.exists():
            return p
    raise ParseError(f"missing dataset file {stem}[.gz] under {directory}")


def _parse_idx(data: bytes, expect_magic: int, origin: str) -> np.ndarray:
    if len(data) < 4:
        raise ParseError(f"{origin}: truncated header, {len(data)} bytes at offset 0")
    magic = int.from_bytes(data[0:4], "big")
    if magic != expect_magic:
        raise ParseError(
            f"{origin}: bad magic 0x{magic:08x} at offset 0, expected 0x{expect_magic:08x}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ParseError(f"{origin}: truncated dimension header at offset {len(data)}")
    dims = [int.from_bytes(data[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    expected = header + int(np.prod(dims))
    if len(data) != expected:
        raise ParseError(
            f"{origin}: expected {expected} bytes for dims {dims}, got {len(data)}"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(path, split: str = "train") -> DatasetHandle:
    """Parse an MNIST-style IDX pair from a directory; images flattened to 784."""
    directory = Path(path)
    if split not in MNIST_FILES:
        raise ValidationError(f"split must be train or test, got {split!r}")
    img_name, lab_name = MNIST_FILES[split]
    img_path = _find_file(directory, img_name)
    lab_path = _find_file(directory, lab_name)
    raw_images = _parse_idx(_read_bytes(img_path), IDX_MAGIC_IMAGES, img_path.name)
    raw_labels = _parse_idx(_read_bytes(lab_path), IDX_MAGIC_LABELS, lab_path.name)
    if raw_images.shape[0] != raw_labels.shape[0]:
        raise ParseError(
            f"{img_path.name}: {raw_images.shape[0]} images vs "
            f"{raw_labels.shape[0]} labels in {lab_path.name}"
        )
    images = quantize_pixels(raw_images.reshape(raw_images.shape[0], -1) / 255.0)
    return DatasetHandle(images, raw_labels.astype(np.int64), split)


def load_cifar10_bin(path, split: str = "train") -> DatasetHandle:
    """Parse CIFAR-10 binary batches (3073-byte records, CHW pixel layout)."""
    directory = Path(path)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    images = []
    labels = []
    for name in names:
        p = _find_file(directory, name)
        data = _read_bytes(p)
        if len(data) % CIFAR_RECORD:
            raise ParseError(
                f"{p.name}: size {len(data)} is not a multiple of {CIFAR_RECORD}-byte records"
            )
        arr = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = arr[:, 0]
        bad = np.nonzero(lab > 9)[0]
        if bad.size:
            raise ParseError(
                f"{p.name}: label byte {int(lab[bad[0]])} at record {int(bad[0])} "
                f"(offset {int(bad[0]) * CIFAR_RECORD})"
            )
        labels.append(lab.astype(np.int64))
        images.append(arr[:, 1:].reshape(-1, 3, 32, 32))
    raw = np.concatenate(images)
    return DatasetHandle(quantize_pixels(raw / 255.0), np.concatenate(labels), split)


def synthetic_dataset(kind: str, n_train: int, n_test: int, seed: int,
                      num_classes: int = 10):
    """Deterministic procedural stand-in task (class templates plus noise).

    kind "mlp" produces flat 784-pixel images, "cnn" (3, 32, 32) images. Used
    where the real benchmark files are unavailable; difficulty is tuned so a
    trained model is confident on most inputs but not all.
    """
    rng = np.random.default_rng(seed)
    if kind == "mlp":
        h = w = 28
        channels = 1
        flat = True
    elif kind == "cnn":
        h = w = 32
        channels = 3
        flat = False
    else:
        raise ValidationError(f"unknown synthetic kind {kind!r}")
    grid = 7
    templates = rng.random(size=(num_classes, channels, grid, grid))
    reps = (h + grid - 1) // grid
    templates = np.repeat(np.repeat(templates, reps, axis=2), reps, axis=3)[:, :, :h, :w]

    def make(n, split):
        labels = rng.integers(0, num_classes, size=n)
        distract = (labels + rng.integers(1, num_classes, size=n)) % num_classes
        scale = rng.uniform(0.32, 0.75, size=(n, 1, 1, 1))
        mix = rng.uniform(0.0, 0.45, size=(n, 1, 1, 1))
        noise = rng.normal(0.0, 0.29, size=(n, channels, h, w))
        x = np.clip(templates[labels] * scale + templates[distract] * mix + noise, 0.0, 1.0)
        images = quantize_pixels(x if not flat else x.reshape(n, -1))
        return DatasetHandle(images, labels.astype(np.int64), split, "synthetic", num_classes)

    return make(n_train, "train"), make(n_test, "test")
