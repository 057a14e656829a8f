"""
Training regimens: natural training and the three robustness techniques
(constant, incremental and transfer learning).
"""
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd
import structlog

from perturbex.data import ImageBatch, Space, batch_indices, compute_stats, standardize
from perturbex.errors import ConfigurationError, NumericalError, StateError
from perturbex.evaluation import evaluate_accuracy
from perturbex.network import Network, NetworkConfig, build_network, build_transfer_model
from perturbex.optim import AdamState, adam_step
from perturbex.perturb import NATURAL, NaturalSpec, perturb_batch
from perturbex.resources import get_configuration_file
from perturbex.tensor import RngStream

log = structlog.get_logger()

__all__ = [
    "RegimenKind",
    "RegimenSpec",
    "TrainLog",
    "incremental_fraction",
    "perturbed_count",
    "train",
    "train_natural",
    "train_constant",
    "train_incremental",
    "train_transfer",
    "build_transfer_model",
]

LOG_COLUMNS = ["epoch", "loss", "train_acc", "held_out_acc", "perturbed_fraction"]


class RegimenKind(Enum):
    NATURAL = "natural"
    CONSTANT = "constant"
    INCREMENTAL = "incremental"
    TRANSFER = "transfer"


@dataclass(frozen=True)
class RegimenSpec:
    """
    How one model is trained.

    Attributes
    ----------
    kind : RegimenKind
    perturbation : PerturbationSpec
        Training perturbation; ``none`` exactly for the natural regimen.
    epochs, batch_size : int
    lr : float
        Adam learning rate.
    seed : int
        Root seed of initialization, shuffling, perturbation and dropout.
    fine_tune_all : bool
        Transfer only. When False the pretrained backbone is frozen.
    incremental_start : float
        Perturbed fraction of every batch at epoch 1 of incremental training.
    """

    kind: RegimenKind
    perturbation: object = NATURAL
    epochs: int = 1
    batch_size: int = 100
    lr: float = 0.05
    seed: int = 0
    fine_tune_all: bool = True
    incremental_start: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "kind", RegimenKind(self.kind))
        natural = isinstance(self.perturbation, NaturalSpec)
        if self.kind is RegimenKind.NATURAL and not natural:
            raise ConfigurationError(f"Natural training takes no perturbation, got {self.perturbation}")
        if self.kind is not RegimenKind.NATURAL and natural:
            raise ConfigurationError(f"{self.kind.value} training needs a perturbation")
        if self.epochs < 0:
            raise ConfigurationError(f"Epoch count must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"Batch size must be at least 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigurationError(f"Learning rate must be positive, got {self.lr}")
        if not 0 <= self.incremental_start <= 1:
            raise ConfigurationError(f"incremental_start must lie in [0, 1], got {self.incremental_start}")

    @property
    def freeze_backbone(self) -> bool:
        return not self.fine_tune_all

    @classmethod
    def for_dataset(cls, dataset: str, kind=RegimenKind.NATURAL, perturbation=NATURAL, **overrides) -> "RegimenSpec":
        """Regimen with the packaged learning rate, epoch count and batch size of ``dataset``."""
        configuration = get_configuration_file()
        budget = configuration["datasets"][dataset]
        values = {
            "epochs": budget["epochs"],
            "batch_size": budget["batch_size"],
            "lr": budget["lr"],
            "fine_tune_all": configuration["regimen"]["fine_tune_all"],
            "incremental_start": configuration["regimen"]["incremental_start"],
        }
        values.update(overrides)
        return cls(kind, perturbation, **values)


@dataclass
class TrainLog:
    """
    Per-epoch training record.

    Attributes
    ----------
    records : list of dict
        One entry per finished epoch with the ``LOG_COLUMNS`` keys.
    wall_time : float
        Seconds spent in the training loop.
    optimizer : AdamState or None
        Optimizer state after the final update.
    """

    records: list = field(default_factory=list)
    wall_time: float = 0.0
    optimizer: AdamState = None

    def __len__(self):
        return len(self.records)

    @property
    def frame(self) -> pd.DataFrame:
        return pd.DataFrame.from_records(self.records, columns=LOG_COLUMNS)

    @property
    def losses(self) -> list:
        return [record["loss"] for record in self.records]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(path, index=False)
        return path


def incremental_fraction(epoch: int, total: int, start: float = 0.05) -> float:
    """
    Perturbed share of every batch at ``epoch`` (1-based) out of ``total``.

    Ramps linearly from ``start`` at epoch 1 to 1 at the last epoch.
    """
    return float(_ramp(epoch, total, start))


def _ramp(epoch: int, total: int, start: float) -> Fraction:
    if total < 1:
        raise ValueError(f"Total epoch count must be at least 1, got {total}")
    if not 1 <= epoch <= total:
        raise ValueError(f"Epoch {epoch} is outside 1..{total}")
    start = Fraction(str(start))
    return min(Fraction(1), start + (1 - start) * Fraction(epoch - 1, max(total - 1, 1)))


def perturbed_count(epoch: int, total: int, batch_size: int, start: float = 0.05) -> int:
    """Number of perturbed samples in a batch of ``batch_size``; exact floor of fraction times size."""
    return math.floor(_ramp(epoch, total, start) * batch_size)


def _require_raw(data: ImageBatch, name: str) -> None:
    if data.space is not Space.RAW:
        raise StateError(f"{name} must be raw [0, 1] images")


def _fit(network: Network, clean: ImageBatch, perturbed: ImageBatch, spec: RegimenSpec,
         held_out: ImageBatch = None) -> TrainLog:
    """
    Shared training loop over standardized data.

    Without ``perturbed`` every batch comes from ``clean``. With it, batch
    ``b`` of epoch ``e`` takes its first ``perturbed_count`` samples from
    ``perturbed`` and the rest from ``clean``, over the same indices.
    """
    train_log = TrainLog(optimizer=AdamState.with_defaults(spec.lr))
    shuffle_rng = RngStream(spec.seed).split("shuffle")
    n = len(clean)
    started = time.perf_counter()

    for epoch in range(1, spec.epochs + 1):
        network.train()
        loss_sum, correct, perturbed_samples = 0.0, 0, 0
        for indices in batch_indices(n, spec.batch_size, shuffle_rng.split(epoch)):
            if perturbed is None:
                x = clean.pixels[indices]
            else:
                k = perturbed_count(epoch, spec.epochs, len(indices), spec.incremental_start)
                x = np.concatenate([perturbed.pixels[indices[:k]], clean.pixels[indices[k:]]])
                perturbed_samples += k
            labels = clean.labels[indices]

            loss, probs, gradients = network.compute_gradients(x, labels)
            if not np.isfinite(loss):
                raise NumericalError(f"Loss became {loss} in epoch {epoch}")
            adam_step(train_log.optimizer, network.trainable_parameters(), gradients)
            loss_sum += loss * len(indices)
            correct += int(np.sum(probs.argmax(axis=1) == labels))

        record = {
            "epoch": epoch,
            "loss": loss_sum / n,
            "train_acc": correct / n,
            "held_out_acc": evaluate_accuracy(network, held_out) if held_out is not None else np.nan,
            "perturbed_fraction": perturbed_samples / n if perturbed is not None else 0.0,
        }
        train_log.records.append(record)
        log.info("Epoch finished", regimen=spec.kind.value, perturbation=str(spec.perturbation), **record)

    train_log.wall_time = time.perf_counter() - started
    network.eval()
    return train_log


def _prepare(network: Network, data: ImageBatch, held_out: ImageBatch) -> tuple:
    _require_raw(data, "Training data")
    if len(data) == 0:
        raise ValueError("Cannot train on an empty batch")
    if network.stats is None:
        network.stats = compute_stats(data)
    held = None
    if held_out is not None:
        _require_raw(held_out, "Held-out data")
        held = standardize(held_out, network.stats)
    return standardize(data, network.stats), held


def _frozen_perturbed_copy(data: ImageBatch, spec: RegimenSpec) -> ImageBatch:
    # every image is perturbed exactly once with its own child stream
    return perturb_batch(data, spec.perturbation, RngStream(spec.seed).split("perturb"))


def _require_kind(spec: RegimenSpec, kind: RegimenKind) -> None:
    if spec.kind is not kind:
        raise ConfigurationError(f"Expected a {kind.value} regimen, got {spec.kind.value}")


def _initial_network(config: NetworkConfig, spec: RegimenSpec) -> Network:
    return build_network(config, RngStream(spec.seed).split("model"))


def train_natural(config: NetworkConfig, data: ImageBatch, spec: RegimenSpec,
                  held_out: ImageBatch = None) -> tuple:
    """
    Trains a freshly initialized network on the raw, unperturbed ``data``.

    Returns
    -------
    tuple
        (Network in eval mode carrying the training statistics, TrainLog)
    """
    _require_kind(spec, RegimenKind.NATURAL)
    network = _initial_network(config, spec)
    clean, held = _prepare(network, data, held_out)
    return network, _fit(network, clean, None, spec, held)


def train_constant(config: NetworkConfig, data: ImageBatch, spec: RegimenSpec,
                   held_out: ImageBatch = None) -> tuple:
    """
    Perturbs the training set once, then trains only on that frozen copy.

    Standardization uses the statistics of the clean training split.
    """
    _require_kind(spec, RegimenKind.CONSTANT)
    network = _initial_network(config, spec)
    _, held = _prepare(network, data, held_out)
    perturbed = standardize(_frozen_perturbed_copy(data, spec), network.stats)
    return network, _fit(network, perturbed, None, spec, held)


def train_incremental(config: NetworkConfig, data: ImageBatch, spec: RegimenSpec,
                      held_out: ImageBatch = None) -> tuple:
    """
    Mixes a fully perturbed copy into every batch, with the perturbed share
    growing linearly from ``spec.incremental_start`` to 1 across epochs.
    """
    _require_kind(spec, RegimenKind.INCREMENTAL)
    network = _initial_network(config, spec)
    clean, held = _prepare(network, data, held_out)
    perturbed = standardize(_frozen_perturbed_copy(data, spec), network.stats)
    return network, _fit(network, clean, perturbed, spec, held)


def train_transfer(model: Network, data: ImageBatch, spec: RegimenSpec,
                   held_out: ImageBatch = None) -> tuple:
    """
    Retrains a network produced by ``build_transfer_model`` on a frozen
    perturbed copy of ``data``.

    By default every parameter is fine-tuned; with ``fine_tune_all=False``
    the pretrained backbone stays untouched and only the new head learns.
    The pretrained statistics are kept for standardization.
    """
    _require_kind(spec, RegimenKind.TRANSFER)
    if model.config.backbone_layers == 0:
        raise ConfigurationError("Transfer training needs a network built by build_transfer_model")
    _, held = _prepare(model, data, held_out)
    perturbed = standardize(_frozen_perturbed_copy(data, spec), model.stats)
    if spec.freeze_backbone:
        model.freeze_backbone()
    try:
        train_log = _fit(model, perturbed, None, spec, held)
    finally:
        model.unfreeze()
    return model, train_log


def train(config: NetworkConfig, data: ImageBatch, spec: RegimenSpec, held_out: ImageBatch = None,
          pretrained: Network = None) -> tuple:
    """
    Dispatches to the regimen named by ``spec.kind``.

    Transfer training builds its model from ``pretrained`` with a head
    initialized from ``RngStream(spec.seed).split('transfer')``.
    """
    match spec.kind:
        case RegimenKind.NATURAL:
            return train_natural(config, data, spec, held_out)
        case RegimenKind.CONSTANT:
            return train_constant(config, data, spec, held_out)
        case RegimenKind.INCREMENTAL:
            return train_incremental(config, data, spec, held_out)
        case RegimenKind.TRANSFER:
            if pretrained is None:
                raise ConfigurationError("Transfer training needs a pretrained network")
            model = build_transfer_model(pretrained, config.dataset, RngStream(spec.seed).split("transfer"))
            return train_transfer(model, data, spec, held_out)
