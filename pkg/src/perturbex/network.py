from contextlib import contextmanager
from dataclasses import dataclass, replace

import numpy as np

from perturbex.data import Dataset, DatasetStats
from perturbex.errors import ConfigurationError, DimensionError
from perturbex.functions import one_hot
from perturbex.layers import (
    Activation,
    BatchNorm2d,
    Conv2d,
    Dropout,
    Flatten,
    Layer,
    Linear,
    MaxPool2d,
    initialize,
    nll_loss,
    softmax,
    softmax_nll_gradient,
)
from perturbex.resources import get_configuration_file, get_reference_network, get_transfer_head
from perturbex.tensor import DEFAULT_DTYPE, RngStream

CLASSES = 10


@dataclass(frozen=True)
class LayerSpec:
    """
    One entry of the layer grammar.

    ``conv:UNITS:KERNEL:PADDING:STRIDE``, ``pool``, ``flatten``,
    ``dense:UNITS`` (hidden linear + activation) or ``linear:UNITS`` (output).
    """

    kind: str
    units: int = 0
    kernel: int = 0
    padding: int = 0
    stride: int = 1

    def __str__(self):
        match self.kind:
            case "conv":
                return f"conv:{self.units}:{self.kernel}:{self.padding}:{self.stride}"
            case "dense" | "linear":
                return f"{self.kind}:{self.units}"
            case _:
                return self.kind


def parse_layers(text: str) -> tuple:
    specs = []
    for token in text.split(","):
        parts = token.strip().lower().split(":")
        try:
            match parts:
                case ["conv", units, kernel, padding, stride]:
                    specs.append(LayerSpec("conv", int(units), int(kernel), int(padding), int(stride)))
                case ["conv", units, kernel]:
                    specs.append(LayerSpec("conv", int(units), int(kernel)))
                case ["pool"] | ["flatten"]:
                    specs.append(LayerSpec(parts[0]))
                case ["dense" | "linear", units]:
                    specs.append(LayerSpec(parts[0], int(units)))
                case _:
                    raise ConfigurationError(f"Unknown layer token '{token.strip()}'")
        except ValueError as error:
            if isinstance(error, ConfigurationError):
                raise
            raise ConfigurationError(f"Invalid layer token '{token.strip()}': {error}") from error
    return tuple(specs)


def format_layers(specs) -> str:
    return ", ".join(str(spec) for spec in specs)


@dataclass(frozen=True)
class NetworkConfig:
    """
    Declarative network description with the ablation toggles.

    Attributes
    ----------
    dataset : Dataset
        Fixes the input shape (1x28x28 or 3x32x32).
    layers : tuple of LayerSpec
        Layer grammar entries; the last one must be ``linear:10``.
    activation : str
        'relu' or 'tanh'.
    use_batchnorm : bool
        Inserts a batch normalization after every convolution.
    use_dropout : bool
        Inserts a dropout after every pool.
    use_pooling : bool
        When False the pool entries add no max pooling (dropout placement is kept).
    backbone_layers : int
        Number of leading entries of ``layers`` inherited from a pretrained network.
    """

    dataset: Dataset
    layers: tuple
    activation: str = "relu"
    use_batchnorm: bool = True
    use_dropout: bool = True
    dropout_p: float = 0.2
    use_pooling: bool = True
    bn_momentum: float = 0.1
    backbone_layers: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dataset", Dataset(self.dataset))
        if isinstance(self.layers, str):
            object.__setattr__(self, "layers", parse_layers(self.layers))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.activation not in ("relu", "tanh"):
            raise ConfigurationError(f"Activation {self.activation} is not supported. Supported activations: 'relu', 'tanh'")
        if not self.layers or self.layers[-1] != LayerSpec("linear", CLASSES):
            raise ConfigurationError(f"The final layer must be linear:{CLASSES}")
        if any(spec.kind == "linear" for spec in self.layers[:-1]):
            raise ConfigurationError("Only the final layer may be an output linear layer; use dense:UNITS for hidden layers")
        if not 0 <= self.dropout_p < 1:
            raise ConfigurationError(f"Dropout probability must lie in [0, 1), got {self.dropout_p}")

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.value,
            "layers": format_layers(self.layers),
            "activation": self.activation,
            "use_batchnorm": self.use_batchnorm,
            "use_dropout": self.use_dropout,
            "dropout_p": self.dropout_p,
            "use_pooling": self.use_pooling,
            "bn_momentum": self.bn_momentum,
            "backbone_layers": self.backbone_layers,
        }

    @classmethod
    def from_dict(cls, values: dict) -> "NetworkConfig":
        return cls(**values)


def reference_config(name: str, **overrides) -> NetworkConfig:
    """
    Reference architecture ``name`` ('mnist_ref' or 'cifar_ref') with the
    packaged toggle defaults, optionally overridden.
    """
    reference = get_reference_network(name)
    defaults = get_configuration_file()["network"]
    values = {
        "dataset": reference["dataset"],
        "layers": reference["layers"],
        "activation": defaults["activation"],
        "use_batchnorm": defaults["batchnorm"],
        "use_dropout": defaults["dropout"],
        "dropout_p": defaults["dropout_p"],
        "use_pooling": defaults["pooling"],
        "bn_momentum": defaults["bn_momentum"],
    }
    values.update(overrides)
    return NetworkConfig(**values)


class Network:
    """
    A built network: the expanded layer list with its parameters.

    Parameters are addressed as ``layer{index}.{name}`` in declaration order.

    Attributes
    ----------
    config : NetworkConfig
    layers : list of Layer
    shapes : list of tuple
        Statically derived per-sample output shape of every layer.
    stats : DatasetStats or None
        Standardization statistics of the data the network was trained on.
    training : bool
        Train mode enables dropout and batch statistics.
    """

    def __init__(self, config: NetworkConfig, layers: list, origins: list, stats: DatasetStats = None) -> None:
        self.config = config
        self.layers = layers
        self.origins = origins
        self.input_shape = config.dataset.image_shape
        self.stats = stats
        self.training = False

        self.shapes = []
        shape = self.input_shape
        for layer in layers:
            shape = layer.output_shape(shape)
            self.shapes.append(shape)
        if shape != (CLASSES,):
            raise ConfigurationError(f"Network output shape is {shape}, expected ({CLASSES},)")

    def __repr__(self):
        return "Network(\n" + "\n".join(f"  {layer!r} -> {shape}" for layer, shape in zip(self.layers, self.shapes)) + "\n)"

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    @contextmanager
    def evaluating(self):
        previous = self.training
        self.training = False
        try:
            yield self
        finally:
            self.training = previous

    def count(self, kind: str) -> int:
        return sum(1 for layer in self.layers if layer.kind == kind)

    @property
    def activations(self) -> set:
        return {layer.function for layer in self.layers if isinstance(layer, Activation)}

    def named_parameters(self) -> dict:
        return {
            f"layer{index}.{name}": value
            for index, layer in enumerate(self.layers)
            for name, value in layer.parameters.items()
        }

    def named_buffers(self) -> dict:
        return {
            f"layer{index}.{name}": value
            for index, layer in enumerate(self.layers)
            for name, value in layer.buffers.items()
        }

    def named_gradients(self) -> dict:
        return {
            f"layer{index}.{name}": layer.gradients[name]
            for index, layer in enumerate(self.layers)
            for name in layer.parameters
            if not layer.frozen
        }

    def trainable_parameters(self) -> dict:
        return {
            f"layer{index}.{name}": value
            for index, layer in enumerate(self.layers)
            for name, value in layer.parameters.items()
            if not layer.frozen
        }

    @property
    def dtype(self):
        for value in self.named_parameters().values():
            return value.dtype
        return np.dtype(DEFAULT_DTYPE)

    def parameter_count(self) -> int:
        return sum(value.size for value in self.named_parameters().values())

    def load_state(self, parameters: dict, buffers: dict) -> None:
        """Copies parameter and buffer values into the layers; names and shapes must match."""
        for target, source in ((self.named_parameters(), parameters), (self.named_buffers(), buffers)):
            if set(target) != set(source):
                raise DimensionError(f"State names differ: {sorted(set(target) ^ set(source))}")
            for name, value in target.items():
                if value.shape != source[name].shape:
                    raise DimensionError(f"{name}: shape {source[name].shape} vs {value.shape}")
                value[...] = source[name]

    @property
    def backbone_size(self) -> int:
        """Number of leading layers expanded from pretrained layer entries."""
        return sum(1 for origin in self.origins if origin < self.config.backbone_layers)

    def freeze_backbone(self) -> None:
        for layer in self.layers[:self.backbone_size]:
            layer.frozen = True

    def unfreeze(self) -> None:
        for layer in self.layers:
            layer.frozen = False

    def forward(self, x: np.ndarray) -> np.ndarray:
        """
        Runs the layers in order and returns N x 10 logits.

        Frozen layers always run in evaluation mode.
        """
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"Network expects inputs of shape (N, {self.input_shape}), got {x.shape}")
        for layer, shape in zip(self.layers, self.shapes):
            x = layer.forward(x, training=self.training and not layer.frozen)
            if tuple(x.shape[1:]) != shape:
                raise DimensionError(f"{layer!r} produced {x.shape[1:]}, expected {shape}")
        return x

    def backward(self, grad_logits: np.ndarray) -> dict:
        """
        Backpropagates the logit gradient through every trainable layer and
        returns the parameter gradients by name. Backpropagation stops at
        the first frozen layer.
        """
        grad = grad_logits
        for layer in reversed(self.layers):
            if layer.frozen:
                break
            grad = layer.backward(grad)
        return self.named_gradients()

    def compute_gradients(self, x: np.ndarray, labels: np.ndarray) -> tuple:
        """
        Forward pass, loss and backward pass on one batch.

        Returns
        -------
        tuple
            (loss, probabilities, gradients by parameter name)
        """
        logits = self.forward(x)
        probs = softmax(logits)
        targets = one_hot(labels, CLASSES, dtype=probs.dtype)
        loss = nll_loss(probs, targets)
        gradients = self.backward(softmax_nll_gradient(probs, targets))
        return loss, probs, gradients

    def predict(self, x: np.ndarray, chunk_size: int = 1000) -> np.ndarray:
        """Evaluation-mode logits, computed ``chunk_size`` samples at a time."""
        with self.evaluating():
            outputs = [self.forward(x[start:start + chunk_size]) for start in range(0, len(x), chunk_size)]
        if not outputs:
            return np.zeros((0, CLASSES), dtype=x.dtype)
        return np.concatenate(outputs)


def _expand(config: NetworkConfig, dtype) -> tuple:
    layers, origins = [], []
    shape = config.dataset.image_shape

    def add(layer: Layer, origin: int):
        nonlocal shape
        shape = layer.output_shape(shape)
        layers.append(layer)
        origins.append(origin)

    for origin, spec in enumerate(config.layers):
        match spec.kind:
            case "conv":
                if len(shape) != 3:
                    raise ConfigurationError(f"Convolution entry {origin} follows a flattened layer")
                add(Conv2d(shape[0], spec.units, spec.kernel, spec.padding, spec.stride,
                           bias=not config.use_batchnorm, dtype=dtype), origin)
                if config.use_batchnorm:
                    add(BatchNorm2d(spec.units, config.bn_momentum, dtype=dtype), origin)
                add(Activation(config.activation), origin)
            case "pool":
                if config.use_pooling:
                    add(MaxPool2d(2), origin)
                if config.use_dropout:
                    add(Dropout(config.dropout_p), origin)
            case "flatten":
                add(Flatten(), origin)
            case "dense" | "linear":
                if len(shape) != 1:
                    raise ConfigurationError(f"Linear entry {origin} needs a flattened input, got shape {shape}")
                add(Linear(shape[0], spec.units, dtype=dtype), origin)
                if spec.kind == "dense":
                    add(Activation(config.activation), origin)
    return layers, origins


def build_network(config: NetworkConfig, rng: RngStream, dtype=DEFAULT_DTYPE) -> Network:
    """
    Instantiates ``config`` with freshly initialized parameters.

    Layer ``i`` draws its initial weights from ``rng.split('init').split(i)``
    and its dropout masks from ``rng.split('dropout').split(i)``.

    Raises
    ------
    ConfigurationError
        When the layer geometry does not chain (indivisible strides or pools,
        channel mismatches, wrong output width).
    """
    layers, origins = _expand(config, dtype)
    init_rng, dropout_rng = rng.split("init"), rng.split("dropout")
    for index, layer in enumerate(layers):
        initialize(layer, init_rng.split(index), config.activation)
        layer.zero_gradients()
        if isinstance(layer, Dropout):
            layer.rng = dropout_rng.split(index)
    return Network(config, layers, origins)


def build_transfer_model(pretrained: Network, dataset, rng: RngStream) -> Network:
    """
    Replaces the final linear(10) of ``pretrained`` with the transfer head.

    MNIST appends dense:256 and linear:10; CIFAR-10 appends dense:256,
    dense:512 and linear:10. The head is freshly initialized, every
    pretrained parameter and buffer is copied unchanged.

    Raises
    ------
    ConfigurationError
        When the pretrained network was built for another dataset.
    """
    dataset = Dataset(dataset)
    if pretrained.config.dataset is not dataset:
        raise ConfigurationError(
            f"Pretrained network was built for {pretrained.config.dataset.value}, not {dataset.value}"
        )

    backbone = pretrained.config.layers[:-1]
    head = parse_layers(get_transfer_head(dataset.value))
    config = replace(pretrained.config, layers=backbone + head, backbone_layers=len(backbone))
    model = build_network(config, rng, dtype=pretrained.dtype)

    pretrained_parameters = pretrained.named_parameters()
    pretrained_buffers = pretrained.named_buffers()
    for index, layer in enumerate(model.layers[:model.backbone_size]):
        for name in layer.parameters:
            layer.parameters[name] = pretrained_parameters[f"layer{index}.{name}"].copy()
        for name in layer.buffers:
            layer.buffers[name] = pretrained_buffers[f"layer{index}.{name}"].copy()
        layer.zero_gradients()
    model.stats = pretrained.stats
    return model
