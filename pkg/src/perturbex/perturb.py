import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate

from perturbex.data import ImageBatch
from perturbex.errors import StateError
from perturbex.tensor import RngStream, sample_normal, uniform_indices


class PixelKind(Enum):
    STUCK = "stuck"
    HOT = "hot"
    DEAD = "dead"


@dataclass(frozen=True)
class PixelDefectSpec:
    kind: PixelKind
    count: int

    def __post_init__(self):
        if not isinstance(self.kind, PixelKind):
            object.__setattr__(self, "kind", PixelKind(self.kind))
        if int(self.count) < 1:
            raise ValueError(f"Pixel defect count must be at least 1, got {self.count}")

    @property
    def family(self) -> str:
        return "pixel"

    @property
    def label(self) -> str:
        return self.kind.value

    @property
    def value(self) -> float:
        return float(self.count)

    @property
    def stochastic(self) -> bool:
        return True

    def __str__(self):
        return f"pixel:{self.kind.value}:{self.count}"


@dataclass(frozen=True)
class NoiseSpec:
    variance: float

    def __post_init__(self):
        object.__setattr__(self, "variance", float(self.variance))
        if not self.variance >= 0:
            raise ValueError(f"Noise variance must be non-negative, got {self.variance}")

    @property
    def family(self) -> str:
        return "noise"

    @property
    def label(self) -> str:
        return "noise"

    @property
    def value(self) -> float:
        return float(self.variance)

    @property
    def stochastic(self) -> bool:
        return True

    def __str__(self):
        return f"noise:{self.variance!r}"


@dataclass(frozen=True)
class BlurSpec:
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "sigma", float(self.sigma))
        if not self.sigma >= 0:
            raise ValueError(f"Blur sigma must be non-negative, got {self.sigma}")

    @property
    def family(self) -> str:
        return "blur"

    @property
    def label(self) -> str:
        return "blur"

    @property
    def value(self) -> float:
        return float(self.sigma)

    @property
    def stochastic(self) -> bool:
        return False

    def __str__(self):
        return f"blur:{self.sigma!r}"


@dataclass(frozen=True)
class NaturalSpec:
    """The empty perturbation."""

    @property
    def family(self) -> str:
        return "natural"

    @property
    def label(self) -> str:
        return "natural"

    @property
    def value(self) -> float:
        return 0.0

    @property
    def stochastic(self) -> bool:
        return False

    def __str__(self):
        return "none"


NATURAL = NaturalSpec()

PerturbationSpec = PixelDefectSpec | NoiseSpec | BlurSpec | NaturalSpec


def parse_perturbation(text: str) -> PerturbationSpec:
    """
    Parses ``none``, ``pixel:KIND:COUNT``, ``noise:VARIANCE`` or ``blur:SIGMA``.
    """
    parts = text.strip().lower().split(":")
    try:
        match parts:
            case ["none"] | ["natural"]:
                return NATURAL
            case ["pixel", kind, count]:
                return PixelDefectSpec(PixelKind(kind), int(count))
            case ["noise", variance]:
                return NoiseSpec(float(variance))
            case ["blur", sigma]:
                return BlurSpec(float(sigma))
    except ValueError as error:
        raise ValueError(f"Invalid perturbation '{text}': {error}") from error
    raise ValueError(
        f"Perturbation '{text}' is not supported. Supported forms: none, pixel:KIND:COUNT, noise:VARIANCE, blur:SIGMA"
    )


def _require_raw_image(image: np.ndarray) -> None:
    if image.ndim != 3:
        raise ValueError(f"Image must have shape C x H x W, got {image.shape}")
    if image.size and (image.min() < 0 or image.max() > 1):
        raise StateError("Perturbations are defined on raw [0, 1] images")


def apply_pixel_defect(image: np.ndarray, spec: PixelDefectSpec, rng: RngStream) -> np.ndarray:
    """
    Forces ``spec.count`` distinct pixel locations to a defect value.

    Dead pixels are set to 0 and hot pixels to 1 on every channel; stuck
    pixels draw each channel independently from U[0, 1]. All other pixels
    are returned unchanged.
    """
    _require_raw_image(image)
    channels, height, width = image.shape
    if spec.count > height * width:
        raise ValueError(f"Cannot modify {spec.count} pixels of a {height}x{width} image")

    locations = uniform_indices(rng, (height, width), spec.count, distinct=True)
    rows, cols = locations[:, 0], locations[:, 1]
    output = image.copy()
    match spec.kind:
        case PixelKind.DEAD:
            output[:, rows, cols] = 0.0
        case PixelKind.HOT:
            output[:, rows, cols] = 1.0
        case PixelKind.STUCK:
            values = rng.uniform(channels * spec.count).reshape(spec.count, channels)
            output[:, rows, cols] = values.T
    return output


def apply_noise(image: np.ndarray, spec: NoiseSpec, rng: RngStream) -> np.ndarray:
    """
    Adds zero-mean Gaussian noise of variance ``spec.variance`` to every
    element; samples are clamped to [-1, 1] and the sum to [0, 1].
    """
    _require_raw_image(image)
    noise = sample_normal(rng, image.size, 0.0, math.sqrt(spec.variance)).reshape(image.shape)
    noise = np.clip(noise, -1.0, 1.0)
    return np.clip(image.astype(np.float64) + noise, 0.0, 1.0).astype(image.dtype)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """
    Discrete, normalized 2D Gaussian of radius ``ceil(3 * sigma)``.

    Returns
    -------
    numpy.ndarray
        Float64 array of shape (2r + 1, 2r + 1) summing to 1.
    """
    if not sigma > 0:
        raise ValueError(f"Kernel sigma must be positive, got {sigma}")
    radius = math.ceil(3 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    squared = offsets[:, None] ** 2 + offsets[None, :] ** 2
    weights = np.exp(-squared / (2 * sigma**2))
    return weights / weights.sum()


def _blur_array(pixels: np.ndarray, sigma: float) -> np.ndarray:
    # pixels has shape (..., H, W); the kernel only spans the last two axes
    kernel = gaussian_kernel(sigma)
    kernel = kernel.reshape((1,) * (pixels.ndim - 2) + kernel.shape)
    values = pixels.astype(np.float64)
    forward = correlate(values, kernel, mode="reflect")
    mirrored = correlate(np.ascontiguousarray(values[..., ::-1]), kernel, mode="reflect")[..., ::-1]
    # averaging both passes makes the filter commute exactly with a horizontal flip
    blurred = 0.5 * (forward + mirrored)
    return np.clip(blurred, 0.0, 1.0).astype(pixels.dtype)


def apply_blur(image: np.ndarray, spec: BlurSpec) -> np.ndarray:
    """
    Convolves every channel with ``gaussian_kernel(spec.sigma)`` using
    reflect padding; ``sigma == 0`` is the identity. Deterministic.
    """
    _require_raw_image(image)
    if spec.sigma == 0:
        return image.copy()
    return _blur_array(image, spec.sigma)


def apply(image: np.ndarray, spec: PerturbationSpec, rng: RngStream = None) -> np.ndarray:
    match spec:
        case NaturalSpec():
            _require_raw_image(image)
            return image.copy()
        case PixelDefectSpec():
            return apply_pixel_defect(image, spec, rng)
        case NoiseSpec():
            return apply_noise(image, spec, rng)
        case BlurSpec():
            return apply_blur(image, spec)
    raise ValueError(f"Unsupported perturbation {spec!r}")


def perturb_batch(batch: ImageBatch, spec: PerturbationSpec, rng: RngStream = None) -> ImageBatch:
    """
    Perturbs every image of a raw batch; image ``i`` uses ``rng.split(i)``.

    The input batch is left untouched.
    """
    batch.require_raw()
    match spec:
        case NaturalSpec():
            pixels = batch.pixels.copy()
        case BlurSpec():
            pixels = batch.pixels.copy() if spec.sigma == 0 else _blur_array(batch.pixels, spec.sigma)
        case _:
            if rng is None:
                raise ValueError(f"Perturbation {spec} needs a random stream")
            pixels = np.empty_like(batch.pixels)
            for i, image in enumerate(batch.pixels):
                pixels[i] = apply(image, spec, rng.split(i))
    return ImageBatch(pixels, batch.labels.copy(), batch.space)


def write_pnm(path, image: np.ndarray) -> Path:
    """
    Writes a raw image as plain-text PGM (1 channel, ``P2``) or PPM (3 channels, ``P3``).
    """
    _require_raw_image(image)
    channels, height, width = image.shape
    match channels:
        case 1:
            magic = "P2"
        case 3:
            magic = "P3"
        case _:
            raise ValueError(f"PNM output supports 1 or 3 channels, got {channels}")

    levels = np.rint(image.astype(np.float64) * 255).astype(np.int64)
    rows = levels.transpose(1, 2, 0).reshape(height, width * channels)
    lines = [magic, f"{width} {height}", "255"]
    lines.extend(" ".join(str(v) for v in row) for row in rows)
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path
