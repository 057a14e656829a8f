import gzip
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import structlog

from perturbex.errors import (
    CountMismatchError,
    DatasetFormatError,
    LabelRangeError,
    MagicNumberError,
    StateError,
    TruncatedFileError,
)
from perturbex.tensor import DEFAULT_DTYPE, RngStream

log = structlog.get_logger()

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGE_SIZE = (28, 28)
CIFAR_RECORD_SIZE = 3073
STD_FLOOR = 1e-6

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


class Dataset(Enum):
    MNIST = "mnist"
    CIFAR10 = "cifar10"

    @property
    def image_shape(self) -> tuple:
        match self:
            case Dataset.MNIST:
                return (1, 28, 28)
            case Dataset.CIFAR10:
                return (3, 32, 32)


class Space(Enum):
    RAW = "raw"
    STANDARDIZED = "standardized"


@dataclass(frozen=True)
class DatasetStats:
    """Per-channel mean and standard deviation of a raw training split."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.std) <= 0):
            raise ValueError("Dataset std must be positive")

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, values: dict) -> "DatasetStats":
        return cls(np.asarray(values["mean"], dtype=np.float64), np.asarray(values["std"], dtype=np.float64))


@dataclass
class ImageBatch:
    """
    N images of shape C x H x W with their integer labels.

    Attributes
    ----------
    pixels : numpy.ndarray
        Array of shape (N, C, H, W). In raw space every value lies in [0, 1].
    labels : numpy.ndarray
        N integer labels in [0, 9].
    space : Space
        Raw [0, 1] pixels or standardized values.
    """

    pixels: np.ndarray
    labels: np.ndarray
    space: Space = field(default=Space.RAW)

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise ValueError(f"Pixels must have shape N x C x H x W, got {self.pixels.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.pixels):
            raise CountMismatchError(f"{len(self.pixels)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 9):
            raise LabelRangeError("Labels must lie in [0, 9]")

    def __len__(self):
        return len(self.labels)

    def __repr__(self):
        return f"ImageBatch(n={len(self)}, shape={self.pixels.shape[1:]}, space={self.space.value})"

    @property
    def image_shape(self) -> tuple:
        return tuple(self.pixels.shape[1:])

    def take(self, indices) -> "ImageBatch":
        indices = np.asarray(indices, dtype=np.int64)
        return ImageBatch(self.pixels[indices], self.labels[indices], self.space)

    def require_raw(self) -> None:
        if self.space is not Space.RAW:
            raise StateError("Operation requires raw [0, 1] images; batch is standardized")


def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as file:
            return file.read()
    return path.read_bytes()


def _parse_idx(content: bytes, expected_magic: int, dims: int, name: str) -> np.ndarray:
    header_size = 4 * (1 + dims)
    if len(content) < header_size:
        raise TruncatedFileError(f"{name}: file shorter than its {header_size}-byte header")
    header = np.frombuffer(content, dtype=">u4", count=1 + dims)
    if int(header[0]) != expected_magic:
        raise MagicNumberError(f"{name}: magic 0x{int(header[0]):08x}, expected 0x{expected_magic:08x}")
    shape = tuple(int(v) for v in header[1:])
    size = int(np.prod(shape))
    found = len(content) - header_size
    if found < size:
        raise TruncatedFileError(f"{name}: expected {size} data bytes, found {found}")
    if found > size:
        raise DatasetFormatError(f"{name}: {found - size} trailing bytes after {size} data bytes")
    return np.frombuffer(content, dtype=np.uint8, count=size, offset=header_size).reshape(shape)


def load_idx(images_path, labels_path) -> ImageBatch:
    """
    Reads an IDX image file and its IDX label file (MNIST layout).

    Files ending in ``.gz`` are decompressed transparently.

    Raises
    ------
    MagicNumberError, TruncatedFileError, CountMismatchError, DatasetFormatError
        When the files do not follow the IDX layout, hold images other than
        28x28, carry trailing bytes or disagree on the count.
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, str(labels_path))
    if images.shape[1:] != IDX_IMAGE_SIZE:
        raise DatasetFormatError(f"{images_path}: images are {images.shape[1]}x{images.shape[2]}, expected 28x28")
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images in {images_path} but {len(labels)} labels in {labels_path}")

    pixels = (images[:, None, :, :].astype(DEFAULT_DTYPE) / 255.0).astype(DEFAULT_DTYPE)
    batch = ImageBatch(pixels, labels.astype(np.int64))
    log.info("IDX dataset loaded", images=str(images_path), n=len(batch), shape=batch.image_shape)
    return batch


def load_cifar10(batch_paths: list) -> ImageBatch:
    """
    Reads CIFAR-10 binary batches: 3073-byte records, one label byte
    followed by the 1024 R, 1024 G and 1024 B bytes of a 32x32 image.
    """
    pixels, labels = [], []
    for path in batch_paths:
        content = _read_bytes(path)
        if len(content) == 0 or len(content) % CIFAR_RECORD_SIZE != 0:
            raise TruncatedFileError(f"{path}: {len(content)} bytes is not a multiple of {CIFAR_RECORD_SIZE}")
        records = np.frombuffer(content, dtype=np.uint8).reshape(-1, CIFAR_RECORD_SIZE)
        if records[:, 0].max() > 9:
            raise LabelRangeError(f"{path}: label byte {int(records[:, 0].max())} exceeds 9")
        labels.append(records[:, 0].astype(np.int64))
        pixels.append(records[:, 1:].reshape(-1, 3, 32, 32))

    if not pixels:
        raise DatasetFormatError("No CIFAR-10 batch files given")
    images = np.concatenate(pixels)
    batch = ImageBatch((images.astype(DEFAULT_DTYPE) / 255.0).astype(DEFAULT_DTYPE), np.concatenate(labels))
    log.info("CIFAR-10 dataset loaded", files=len(batch_paths), n=len(batch), shape=batch.image_shape)
    return batch


def _resolve(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{name} not found in {directory}")


def load_mnist(directory, split: str = "train") -> ImageBatch:
    """Loads the canonical MNIST file pair for ``split`` ('train' or 'test') from ``directory``."""
    if split not in MNIST_FILES:
        raise ValueError(f"Split {split} is not supported. Supported splits: 'train', 'test'")
    images, labels = MNIST_FILES[split]
    directory = Path(directory)
    return load_idx(_resolve(directory, images), _resolve(directory, labels))


def load_cifar10_dir(directory, split: str = "train") -> ImageBatch:
    """Loads the canonical CIFAR-10 binary batches for ``split`` from ``directory``."""
    if split not in CIFAR_FILES:
        raise ValueError(f"Split {split} is not supported. Supported splits: 'train', 'test'")
    directory = Path(directory)
    return load_cifar10([_resolve(directory, name) for name in CIFAR_FILES[split]])


def compute_stats(batch: ImageBatch) -> DatasetStats:
    """
    Per-channel mean and population std over every pixel of a raw batch.

    Channels with std below 1e-6 are floored at 1e-6.
    """
    batch.require_raw()
    if len(batch) == 0:
        raise ValueError("Cannot compute statistics of an empty batch")
    values = batch.pixels.astype(np.float64)
    mean = values.mean(axis=(0, 2, 3))
    std = np.sqrt(((values - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3)))
    return DatasetStats(mean, np.maximum(std, STD_FLOOR))


def standardize(batch: ImageBatch, stats: DatasetStats) -> ImageBatch:
    batch.require_raw()
    if len(stats.mean) != batch.pixels.shape[1]:
        raise ValueError(f"Statistics cover {len(stats.mean)} channels, batch has {batch.pixels.shape[1]}")
    mean = np.asarray(stats.mean)[None, :, None, None]
    std = np.asarray(stats.std)[None, :, None, None]
    pixels = ((batch.pixels.astype(np.float64) - mean) / std).astype(batch.pixels.dtype)
    return ImageBatch(pixels, batch.labels.copy(), Space.STANDARDIZED)


def batches(batch: ImageBatch, batch_size: int, rng: RngStream = None):
    """
    Yields consecutive mini-batches; the final short batch is kept.

    When ``rng`` is given the order is a fresh uniform permutation drawn from
    it, so successive calls with the same stream give successive epochs.
    """
    for indices in batch_indices(len(batch), batch_size, rng):
        yield batch.take(indices)


def batch_indices(n: int, batch_size: int, rng: RngStream = None):
    if batch_size < 1:
        raise ValueError(f"Batch size must be at least 1, got {batch_size}")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def subset(batch: ImageBatch, size: int, rng: RngStream) -> ImageBatch:
    """Shuffles with ``rng`` and keeps the first ``size`` samples."""
    if size is None or size >= len(batch):
        return batch
    if size < 0:
        raise ValueError(f"Subset size must be non-negative, got {size}")
    return batch.take(rng.permutation(len(batch))[:size])
