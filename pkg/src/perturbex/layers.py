import math

import numpy as np

from perturbex.errors import ConfigurationError, DimensionError, StateError
from perturbex.tensor import RngStream, matmul, sample_bernoulli, sample_normal

BN_EPSILON = 1e-5
LOG_FLOOR = 1e-12


class Layer:
    """
    Base class of the network layers.

    A layer maps an (N, ...) input to an (N, ...) output. Learnable tensors
    live in ``parameters`` and their gradients, filled by ``backward``, in
    ``gradients`` under the same names. Non-learnable state (batch-norm
    running statistics) lives in ``buffers``.

    Methods
    -------
    output_shape(self, input_shape: tuple) -> tuple
        Per-sample output shape; raises ConfigurationError on invalid geometry.
    forward(self, x: numpy.ndarray, training: bool) -> numpy.ndarray
    backward(self, grad_out: numpy.ndarray) -> numpy.ndarray
        Returns the gradient with respect to the last forward input.
    """

    kind = "layer"

    def __init__(self) -> None:
        self.parameters = {}
        self.gradients = {}
        self.buffers = {}
        self.frozen = False
        self._cache = None

    def __repr__(self):
        return f"{type(self).__name__}()"

    def output_shape(self, input_shape: tuple) -> tuple:
        return tuple(input_shape)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_gradients(self) -> None:
        self.gradients = {name: np.zeros_like(value) for name, value in self.parameters.items()}

    def _cached(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache


class Conv2d(Layer):
    """
    2D convolution (cross-correlation, no kernel flip) with zero padding.

    For an n x n input the output is z x z with z = (n + 2p - k) / s + 1.

    Attributes
    ----------
    weight : numpy.ndarray
        Kernels of shape (units, in_channels, k, k).
    bias : numpy.ndarray
        Shape (units,); absent when the layer feeds a batch normalization.
    """

    kind = "conv"

    def __init__(self, in_channels: int, units: int, kernel: int, padding: int = 0, stride: int = 1,
                 bias: bool = True, dtype=np.float32) -> None:
        super().__init__()
        if min(in_channels, units, kernel, stride) < 1 or padding < 0:
            raise ConfigurationError(
                f"Invalid convolution: in={in_channels} units={units} kernel={kernel} padding={padding} stride={stride}"
            )
        self.in_channels = in_channels
        self.units = units
        self.kernel = kernel
        self.padding = padding
        self.stride = stride
        self.parameters["weight"] = np.zeros((units, in_channels, kernel, kernel), dtype=dtype)
        if bias:
            self.parameters["bias"] = np.zeros(units, dtype=dtype)
        self.zero_gradients()

    def __repr__(self):
        return (f"Conv2d({self.in_channels}, {self.units}, k={self.kernel}, p={self.padding}, "
                f"s={self.stride}, bias={'bias' in self.parameters})")

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel * self.kernel

    def output_shape(self, input_shape: tuple) -> tuple:
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ConfigurationError(f"{self!r} cannot take input of shape {input_shape}")
        sizes = []
        for n in input_shape[1:]:
            span = n + 2 * self.padding - self.kernel
            if span < 0 or span % self.stride != 0:
                raise ConfigurationError(
                    f"{self!r}: (n + 2p - k) = {span} is not a non-negative multiple of the stride for n={n}"
                )
            sizes.append(span // self.stride + 1)
        return (self.units, *sizes)

    def _windows(self, height: int, width: int):
        # output slice positions for every kernel offset
        out_h, out_w = self.output_shape((self.in_channels, height, width))[1:]
        span_h, span_w = self.stride * (out_h - 1) + 1, self.stride * (out_w - 1) + 1
        for i in range(self.kernel):
            for j in range(self.kernel):
                yield i, j, (slice(i, i + span_h, self.stride), slice(j, j + span_w, self.stride))

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        n, _, height, width = x.shape
        out_c, out_h, out_w = self.output_shape(x.shape[1:])
        p = self.padding
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        weight = self.parameters["weight"]

        output = np.zeros((n, out_c, out_h, out_w), dtype=x.dtype)
        for i, j, (rows, cols) in self._windows(height, width):
            output += np.einsum("nchw,oc->nohw", padded[:, :, rows, cols], weight[:, :, i, j], optimize=True)
        if "bias" in self.parameters:
            output += self.parameters["bias"][None, :, None, None]
        self._cache = (padded, x.shape)
        return output

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        padded, input_shape = self._cached()
        _, _, height, width = input_shape
        weight = self.parameters["weight"]
        grad_padded = np.zeros_like(padded)
        grad_weight = np.zeros_like(weight)

        for i, j, (rows, cols) in self._windows(height, width):
            grad_weight[:, :, i, j] = np.einsum("nohw,nchw->oc", grad_out, padded[:, :, rows, cols], optimize=True)
            grad_padded[:, :, rows, cols] += np.einsum("nohw,oc->nchw", grad_out, weight[:, :, i, j], optimize=True)

        self.gradients["weight"] = grad_weight
        if "bias" in self.parameters:
            self.gradients["bias"] = grad_out.sum(axis=(0, 2, 3))
        p = self.padding
        return grad_padded[:, :, p:p + height, p:p + width] if p else grad_padded


class BatchNorm2d(Layer):
    """
    Per-channel batch normalization: ``y = gamma * (x - mu) / sqrt(var + eps) + beta``.

    Training uses the biased batch statistics over the batch and spatial axes
    and folds them into exponential moving averages; evaluation uses the
    moving averages.
    """

    kind = "batchnorm"

    def __init__(self, units: int, momentum: float = 0.1, dtype=np.float32) -> None:
        super().__init__()
        self.units = units
        self.momentum = momentum
        self.eps = BN_EPSILON
        self.parameters["gamma"] = np.ones(units, dtype=dtype)
        self.parameters["beta"] = np.zeros(units, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(units, dtype=dtype)
        self.buffers["running_var"] = np.ones(units, dtype=dtype)
        self.buffers["updates"] = np.zeros(1, dtype=dtype)
        self.zero_gradients()

    def __repr__(self):
        return f"BatchNorm2d({self.units})"

    def output_shape(self, input_shape: tuple) -> tuple:
        if len(input_shape) != 3 or input_shape[0] != self.units:
            raise ConfigurationError(f"{self!r} cannot take input of shape {input_shape}")
        return tuple(input_shape)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        gamma = self.parameters["gamma"][None, :, None, None]
        beta = self.parameters["beta"][None, :, None, None]

        if training:
            count = x.shape[0] * x.shape[2] * x.shape[3]
            if count < 2:
                raise StateError(f"Batch normalization needs at least 2 values per unit in training, got {count}")
            mean = x.mean(axis=(0, 2, 3))
            var = ((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
            m = self.momentum
            self.buffers["running_mean"] = ((1 - m) * self.buffers["running_mean"] + m * mean).astype(x.dtype)
            self.buffers["running_var"] = ((1 - m) * self.buffers["running_var"] + m * var).astype(x.dtype)
            self.buffers["updates"] = self.buffers["updates"] + 1
        else:
            if self.buffers["updates"][0] == 0:
                raise StateError("Batch normalization evaluated before any training update")
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]

        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (x_hat, inv_std, training)
        return (gamma * x_hat + beta).astype(x.dtype)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x_hat, inv_std, training = self._cached()
        gamma = self.parameters["gamma"]
        self.gradients["gamma"] = (grad_out * x_hat).sum(axis=(0, 2, 3))
        self.gradients["beta"] = grad_out.sum(axis=(0, 2, 3))

        scale = (gamma * inv_std)[None, :, None, None]
        if not training:
            return grad_out * scale

        count = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
        grad_sum = self.gradients["beta"][None, :, None, None]
        grad_dot = self.gradients["gamma"][None, :, None, None]
        return scale * (grad_out - grad_sum / count - x_hat * grad_dot / count)


class Linear(Layer):
    """Affine map ``y = x W^T + b`` on flattened inputs."""

    kind = "linear"

    def __init__(self, in_features: int, units: int, dtype=np.float32) -> None:
        super().__init__()
        if min(in_features, units) < 1:
            raise ConfigurationError(f"Invalid linear layer: in={in_features} units={units}")
        self.in_features = in_features
        self.units = units
        self.parameters["weight"] = np.zeros((units, in_features), dtype=dtype)
        self.parameters["bias"] = np.zeros(units, dtype=dtype)
        self.zero_gradients()

    def __repr__(self):
        return f"Linear({self.in_features}, {self.units})"

    @property
    def fan_in(self) -> int:
        return self.in_features

    def output_shape(self, input_shape: tuple) -> tuple:
        if tuple(input_shape) != (self.in_features,):
            raise ConfigurationError(f"{self!r} cannot take input of shape {input_shape}")
        return (self.units,)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        self._cache = x
        return matmul(x, self.parameters["weight"].T) + self.parameters["bias"]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x = self._cached()
        self.gradients["weight"] = matmul(grad_out.T, x)
        self.gradients["bias"] = grad_out.sum(axis=0)
        return matmul(grad_out, self.parameters["weight"])


class Activation(Layer):
    kind = "activation"

    def __init__(self, function: str = "relu") -> None:
        super().__init__()
        if function not in ("relu", "tanh"):
            raise ConfigurationError(f"Activation {function} is not supported. Supported activations: 'relu', 'tanh'")
        self.function = function

    def __repr__(self):
        return f"Activation({self.function})"

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        match self.function:
            case "relu":
                output = np.maximum(x, 0)
            case "tanh":
                output = np.tanh(x)
        self._cache = (x, output)
        return output

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x, output = self._cached()
        match self.function:
            case "relu":
                return grad_out * (x > 0)
            case "tanh":
                return grad_out * (1 - output**2)


class MaxPool2d(Layer):
    """Non-overlapping max pooling; ties route the gradient to the first cell."""

    kind = "pool"

    def __init__(self, size: int = 2) -> None:
        super().__init__()
        self.size = size

    def __repr__(self):
        return f"MaxPool2d({self.size})"

    def output_shape(self, input_shape: tuple) -> tuple:
        channels, height, width = input_shape
        if height % self.size or width % self.size:
            raise ConfigurationError(f"{self!r}: spatial size {height}x{width} is not divisible by {self.size}")
        return (channels, height // self.size, width // self.size)

    def _blocks(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        s = self.size
        blocks = x.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5)
        return blocks.reshape(n, c, h // s, w // s, s * s)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        self.output_shape(x.shape[1:])
        blocks = self._blocks(x)
        argmax = blocks.argmax(axis=-1)
        self._cache = (argmax, x.shape)
        return np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        argmax, input_shape = self._cached()
        n, c, h, w = input_shape
        s = self.size
        blocks = np.zeros((n, c, h // s, w // s, s * s), dtype=grad_out.dtype)
        np.put_along_axis(blocks, argmax[..., None], grad_out[..., None], axis=-1)
        blocks = blocks.reshape(n, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5)
        return blocks.reshape(input_shape)


class Dropout(Layer):
    """
    Inverted dropout: in training each element is kept with probability
    ``1 - p`` and scaled by ``1 / (1 - p)``; evaluation is the identity.
    """

    kind = "dropout"

    def __init__(self, p: float = 0.2, rng: RngStream = None) -> None:
        super().__init__()
        if not 0 <= p < 1:
            raise ConfigurationError(f"Dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def __repr__(self):
        return f"Dropout({self.p})"

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if not training or self.p == 0:
            self._cache = None
            return x
        if self.rng is None:
            raise StateError("Dropout in training mode needs a random stream")
        keep = 1 - self.p
        mask = sample_bernoulli(self.rng, keep, x.size, dtype=x.dtype).reshape(x.shape) / x.dtype.type(keep)
        self._cache = mask
        return x * mask

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            return grad_out
        return grad_out * self._cache


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape: tuple) -> tuple:
        return (math.prod(input_shape),)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out.reshape(self._cached())


def initialize(layer: Layer, rng: RngStream, activation: str = "relu") -> None:
    """
    Fan-in scaled zero-mean normal weights: std = sqrt(2 / fan_in) for ReLU
    networks and sqrt(1 / fan_in) for tanh networks. Biases start at zero.
    """
    if not isinstance(layer, (Conv2d, Linear)):
        return
    gain = 2.0 if activation == "relu" else 1.0
    weight = layer.parameters["weight"]
    std = math.sqrt(gain / layer.fan_in)
    layer.parameters["weight"] = sample_normal(rng, weight.size, 0.0, std, dtype=weight.dtype).reshape(weight.shape)
    if "bias" in layer.parameters:
        layer.parameters["bias"] = np.zeros_like(layer.parameters["bias"])


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    if logits.ndim != 2:
        raise DimensionError(f"Softmax expects N x K logits, got {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exponentials = np.exp(shifted)
    return exponentials / exponentials.sum(axis=1, keepdims=True)


def nll_loss(probs: np.ndarray, targets: np.ndarray) -> float:
    """
    Mean negative log likelihood ``-(1/N) sum_n sum_k t_nk log p_nk``,
    with probabilities floored at 1e-12 inside the log.
    """
    if probs.shape != targets.shape:
        raise DimensionError(f"Shape mismatch: {probs.shape} vs {targets.shape}")
    log_probs = np.log(np.maximum(probs.astype(np.float64), LOG_FLOOR))
    return float(-(targets * log_probs).sum() / probs.shape[0])


def softmax_nll_gradient(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of ``nll_loss(softmax(y), t)`` with respect to the logits ``y``."""
    if probs.shape != targets.shape:
        raise DimensionError(f"Shape mismatch: {probs.shape} vs {targets.shape}")
    return ((probs - targets) / probs.shape[0]).astype(probs.dtype)
