import numpy as np


def one_hot(labels: np.ndarray, classes: int = 10, dtype=np.float32) -> np.ndarray:
    """
    Returns the one-hot encoding of integer labels.

    Parameters
    ----------
    labels : numpy.ndarray
        Integer class labels in [0, classes).
    classes : int, default 10
        Width of the encoding.

    Returns
    -------
    numpy.ndarray
        Array of shape (len(labels), classes).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"Labels must lie in [0, {classes - 1}]")
    encoded = np.zeros((len(labels), classes), dtype=dtype)
    encoded[np.arange(len(labels)), labels] = 1
    return encoded


def linear_grid(start: float, stop: float, count: int) -> list:
    """
    Linearly spaced values with both endpoints reproduced exactly.
    """
    if count < 1:
        raise ValueError("Grid must contain at least one value")
    if count == 1:
        return [float(start)]
    values = [float(v) for v in np.linspace(start, stop, count)]
    values[0], values[-1] = float(start), float(stop)
    return values


def check_increasing(values) -> None:
    for previous, current in zip(values, values[1:]):
        if not current > previous:
            raise ValueError(f"Axis values must be strictly increasing: {list(values)}")


def central_difference(f, array: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """
    Numerical gradient of the scalar function ``f`` with respect to ``array``.

    ``array`` is perturbed in place one element at a time and restored, so
    ``f`` must read it by reference (a parameter or input tensor).
    """
    gradient = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = f()
        flat[i] = original - h
        minus = f()
        flat[i] = original
        gradient.reshape(-1)[i] = (plus - minus) / (2 * h)
    return gradient


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """
    Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ValueError("The two gradients must have the same shape.")
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
