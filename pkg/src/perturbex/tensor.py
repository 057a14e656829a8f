import zlib

import numpy as np

from perturbex.errors import DimensionError

# A Tensor is a dense, row-major numpy array.
Tensor = np.ndarray

DEFAULT_DTYPE = np.float32
CHECK_DTYPE = np.float64


def as_tensor(data, dtype=DEFAULT_DTYPE) -> Tensor:
    return np.ascontiguousarray(data, dtype=dtype)


def check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"Shape mismatch: {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of an ``m x k`` and a ``k x n`` tensor.

    Raises
    ------
    DimensionError
        If either operand is not two-dimensional or the inner dimensions differ.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"Cannot multiply tensors of shape {a.shape} and {b.shape}")
    return np.matmul(a, b)


class RngStream:
    """
    Deterministic, seedable random stream.

    The stream draws from numpy's counter-based Philox generator, keyed
    through a ``SeedSequence`` built from the 64-bit seed and the split path.
    Identical (seed, path) pairs yield bit-identical samples on every platform.

    Attributes
    ----------
    seed : int
        Unsigned 64-bit base seed.
    path : tuple of int
        Labels of the splits leading from the root stream to this one.

    Methods
    -------
    split(self, label) -> RngStream
        Child stream derived from (seed, path, label); does not advance this stream.
    """

    def __init__(self, seed: int, path: tuple = ()) -> None:
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"Seed {seed} is not an unsigned 64-bit integer")
        self.seed = int(seed)
        self.path = tuple(path)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"

    def split(self, label) -> "RngStream":
        if isinstance(label, str):
            label = zlib.crc32(label.encode("utf-8"))
        if int(label) < 0:
            raise ValueError(f"Split label {label} must be non-negative")
        return RngStream(self.seed, self.path + (int(label),))

    def uniform(self, count: int) -> np.ndarray:
        """Float64 samples in [0, 1)."""
        return self.generator.random(count)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def sample_normal(rng: RngStream, count: int, mean: float = 0.0, std: float = 1.0, dtype=CHECK_DTYPE) -> Tensor:
    """
    Draws ``count`` i.i.d. normal samples with the Box-Muller transform.

    Pairs of uniforms ``u1`` in (0, 1] and ``u2`` in [0, 1) give the two
    normals ``sqrt(-2 ln u1) * cos(2 pi u2)`` and ``sqrt(-2 ln u1) * sin(2 pi u2)``.
    With ``std == 0`` every sample equals ``mean`` exactly.
    """
    if count < 1:
        raise ValueError(f"Sample count must be positive, got {count}")
    if std < 0:
        raise ValueError(f"Standard deviation must be non-negative, got {std}")

    pairs = (count + 1) // 2
    u1 = 1.0 - rng.uniform(pairs)
    u2 = rng.uniform(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.empty(2 * pairs)
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    return (mean + std * z[:count]).astype(dtype)


def sample_bernoulli(rng: RngStream, p: float, count: int, dtype=DEFAULT_DTYPE) -> Tensor:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"Bernoulli probability must lie in [0, 1], got {p}")
    if count < 1:
        raise ValueError(f"Sample count must be positive, got {count}")
    return (rng.uniform(count) < p).astype(dtype)


def uniform_indices(rng: RngStream, bounds: tuple, count: int, distinct: bool = True) -> np.ndarray:
    """
    Uniformly chosen ``(row, col)`` coordinates inside an ``H x W`` grid.

    Returns
    -------
    numpy.ndarray
        Integer array of shape ``(count, 2)``. With ``distinct`` no cell repeats.
    """
    height, width = bounds
    cells = height * width
    if count < 0:
        raise ValueError(f"Index count must be non-negative, got {count}")
    if distinct and count > cells:
        raise ValueError(f"Cannot draw {count} distinct cells from a {height}x{width} grid")

    if distinct:
        flat = rng.permutation(cells)[:count]
    else:
        flat = rng.generator.integers(0, cells, size=count)
    rows, cols = np.divmod(flat, width)
    return np.stack([rows, cols], axis=1).astype(np.int64)
