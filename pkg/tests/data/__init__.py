import gzip
import struct
from pathlib import Path

import numpy as np

from perturbex.data import ImageBatch
from perturbex.network import NetworkConfig

TINY_LAYERS = "conv:4:3:1:1, pool, flatten, linear:10"


def idx_images_bytes(images: np.ndarray, magic: int = 0x00000803) -> bytes:
    n, height, width = images.shape
    return struct.pack(">IIII", magic, n, height, width) + images.astype(np.uint8).tobytes()


def idx_labels_bytes(labels: np.ndarray, magic: int = 0x00000801) -> bytes:
    return struct.pack(">II", magic, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()


def cifar_bytes(images: np.ndarray, labels: np.ndarray) -> bytes:
    records = [bytes([int(label)]) + image.astype(np.uint8).tobytes() for image, label in zip(images, labels)]
    return b"".join(records)


def toy_digits(n: int, seed: int = 0) -> tuple:
    """
    Separable 28x28 uint8 images: class ``c`` has a bright 6x6 square in
    its own cell of a 2 x 5 grid, on a faint random background.
    """
    generator = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    images = generator.integers(0, 40, size=(n, 28, 28)).astype(np.uint8)
    for image, label in zip(images, labels):
        row, col = 3 + 13 * (label // 5), 1 + 5 * (label % 5)
        image[row:row + 6, col:col + 4] = 230
    return images, labels


def toy_batch(n: int = 64, seed: int = 0) -> ImageBatch:
    images, labels = toy_digits(n, seed)
    return ImageBatch((images[:, None].astype(np.float32) / 255.0).astype(np.float32), labels)


def write_mnist_dir(directory, n_train: int = 64, n_test: int = 20, compress: bool = False) -> Path:
    """Writes the four canonical MNIST files of a toy dataset into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    splits = {"train": toy_digits(n_train, seed=1), "t10k": toy_digits(n_test, seed=2)}
    for prefix, (images, labels) in splits.items():
        for name, content in ((f"{prefix}-images-idx3-ubyte", idx_images_bytes(images)),
                              (f"{prefix}-labels-idx1-ubyte", idx_labels_bytes(labels))):
            if compress:
                with gzip.open(directory / f"{name}.gz", "wb") as file:
                    file.write(content)
            else:
                (directory / name).write_bytes(content)
    return directory


def tiny_config(**overrides) -> NetworkConfig:
    values = {"dataset": "mnist", "layers": TINY_LAYERS}
    values.update(overrides)
    return NetworkConfig(**values)
