"""
Run configuration.

A run is described by an INI file with the sections ``[data]``,
``[network]``, ``[regimen]``, ``[perturbation]``, ``[evaluation]``,
``[run]`` and ``[scale]``. Every key is optional except ``data.path``
for commands that read a dataset; missing keys take the packaged
defaults of the selected dataset. See ``docs/chapters/configuration.rst``
for the full grammar.
"""
import configparser
import re
from dataclasses import dataclass, replace
from pathlib import Path

import structlog

from perturbex.data import Dataset
from perturbex.errors import ConfigurationError
from perturbex.matrix import Scale
from perturbex.network import NetworkConfig, format_layers, parse_layers, reference_config
from perturbex.perturb import NATURAL, parse_perturbation
from perturbex.regimen import RegimenKind, RegimenSpec
from perturbex.resources import get_configuration_file

log = structlog.get_logger()

KEYS = {
    "data": {"dataset", "path"},
    "network": {"reference", "layers", "activation", "batchnorm", "dropout", "dropout_p", "pooling", "bn_momentum"},
    "regimen": {"kind", "epochs", "batch_size", "lr", "fine_tune_all", "incremental_start", "pretrained"},
    "perturbation": {"spec"},
    "evaluation": {"trials", "eval_batch_size", "checkpoint"},
    "run": {"seed", "out", "workers"},
    "scale": {"subset", "epochs_scale", "models"},
}

_SECTION = re.compile(r"^\s*\[([^\]]+)\]")
_OPTION = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


@dataclass(frozen=True)
class RunConfig:
    """
    Everything one CLI invocation needs.

    Attributes
    ----------
    dataset : Dataset
    data_path : str or None
        Directory holding the canonical dataset files.
    network : NetworkConfig
    regimen : RegimenSpec
        Training regimen, perturbation and seed included.
    pretrained : str or None
        Checkpoint of the natural model used by transfer training and the matrix.
    checkpoint : str or None
        Checkpoint evaluated by the single-model sweeps.
    trials, eval_batch_size : int
    out : str
        Output directory.
    workers : int
        Process pool size of the robustness matrix.
    scale : Scale
    """

    dataset: Dataset
    data_path: str
    network: NetworkConfig
    regimen: RegimenSpec
    pretrained: str = None
    checkpoint: str = None
    trials: int = 25
    eval_batch_size: int = 1000
    out: str = "runs"
    workers: int = 1
    scale: Scale = Scale()

    @property
    def seed(self) -> int:
        return self.regimen.seed

    def require_data_path(self) -> Path:
        if self.data_path is None:
            raise ConfigurationError("a dataset directory is required", key="data.path")
        return Path(self.data_path)

    def with_overrides(self, seed: int = None, out: str = None, workers: int = None, subset: int = None,
                       epochs_scale: float = None) -> "RunConfig":
        """Applies command-line overrides; ``None`` keeps the configured value."""
        config = self
        if seed is not None:
            config = replace(config, regimen=replace(config.regimen, seed=seed))
        if out is not None:
            config = replace(config, out=out)
        if workers is not None:
            if workers < 1:
                raise ConfigurationError(f"worker count must be at least 1, got {workers}", key="run.workers")
            config = replace(config, workers=workers)
        if subset is not None or epochs_scale is not None:
            config = replace(config, scale=replace(
                config.scale,
                subset=subset if subset is not None else config.scale.subset,
                epochs_scale=epochs_scale if epochs_scale is not None else config.scale.epochs_scale,
            ))
        return config

    def to_ini(self) -> str:
        """Canonical form; ``parse_run_config(config.to_ini()) == config``."""
        parser = configparser.ConfigParser(interpolation=None)
        network, regimen = self.network, self.regimen
        parser["data"] = _strip({"dataset": self.dataset.value, "path": self.data_path})
        parser["network"] = {
            "layers": format_layers(network.layers),
            "activation": network.activation,
            "batchnorm": _format(network.use_batchnorm),
            "dropout": _format(network.use_dropout),
            "dropout_p": repr(network.dropout_p),
            "pooling": _format(network.use_pooling),
            "bn_momentum": repr(network.bn_momentum),
        }
        parser["regimen"] = _strip({
            "kind": regimen.kind.value,
            "epochs": str(regimen.epochs),
            "batch_size": str(regimen.batch_size),
            "lr": repr(regimen.lr),
            "fine_tune_all": _format(regimen.fine_tune_all),
            "incremental_start": repr(regimen.incremental_start),
            "pretrained": self.pretrained,
        })
        parser["perturbation"] = {"spec": str(regimen.perturbation)}
        parser["evaluation"] = _strip({
            "trials": str(self.trials),
            "eval_batch_size": str(self.eval_batch_size),
            "checkpoint": self.checkpoint,
        })
        parser["run"] = {"seed": str(regimen.seed), "out": self.out, "workers": str(self.workers)}
        parser["scale"] = _strip({
            "subset": None if self.scale.subset is None else str(self.scale.subset),
            "epochs_scale": repr(self.scale.epochs_scale),
            "models": None if self.scale.models is None else str(self.scale.models),
        })
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{key} = {value}" for key, value in parser[section].items())
            lines.append("")
        return "\n".join(lines)


def _format(flag: bool) -> str:
    return "true" if flag else "false"


def _strip(values: dict) -> dict:
    return {key: value for key, value in values.items() if value is not None}


def _line_numbers(text: str) -> dict:
    """Maps (section, key) and (section, None) to their 1-based line numbers."""
    lines, section = {}, None
    for number, line in enumerate(text.splitlines(), start=1):
        if match := _SECTION.match(line):
            section = match.group(1).strip()
            lines.setdefault((section, None), number)
        elif section is not None and (match := _OPTION.match(line)):
            lines.setdefault((section, match.group(1).strip().lower()), number)
    return lines


class _Reader:
    """Typed access to a parsed file that reports file, line and key on failure."""

    def __init__(self, parser: configparser.ConfigParser, path: str, lines: dict) -> None:
        self.parser = parser
        self.path = path
        self.lines = lines

    def error(self, message: str, section: str, key: str = None) -> ConfigurationError:
        line = self.lines.get((section, key)) or self.lines.get((section, None))
        return ConfigurationError(message, path=self.path, line=line, key=f"{section}.{key}" if key else section)

    def has(self, section: str, key: str) -> bool:
        return self.parser.has_option(section, key)

    def get(self, section: str, key: str, convert, default):
        if not self.has(section, key):
            return default
        raw = self.parser.get(section, key).strip()
        try:
            return convert(raw)
        except (ValueError, KeyError) as error:
            raise self.error(f"invalid value '{raw}': {error}", section, key) from error


def _boolean(text: str) -> bool:
    value = configparser.ConfigParser.BOOLEAN_STATES.get(text.lower())
    if value is None:
        raise ValueError("expected true or false")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise ValueError("must be at least 1")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise ValueError("must be non-negative")
    return value


def _optional_positive_int(text: str):
    return None if text.lower() in ("", "none") else _positive_int(text)


def _optional_non_negative_int(text: str):
    return None if text.lower() in ("", "none") else _non_negative_int(text)


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise ValueError("must be positive")
    return value


def _probability(text: str) -> float:
    value = float(text)
    if not 0 <= value < 1:
        raise ValueError("must lie in [0, 1)")
    return value


def _fraction(text: str) -> float:
    value = float(text)
    if not 0 <= value <= 1:
        raise ValueError("must lie in [0, 1]")
    return value


def _activation(text: str) -> str:
    value = text.lower()
    if value not in ("relu", "tanh"):
        raise ValueError(f"activation {value} is not supported. Supported activations: 'relu', 'tanh'")
    return value


def parse_run_config(text: str, path: str = "<string>") -> RunConfig:
    """
    Parses INI ``text`` into a RunConfig.

    Raises
    ------
    ConfigurationError
        Syntax errors, unknown sections or keys and malformed values; the
        error names the file, line and ``section.key``.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as error:
        line = getattr(error, "lineno", None)
        section = getattr(error, "section", None)
        option = getattr(error, "option", None)
        key = f"{section}.{option}" if section and option else section
        raise ConfigurationError(error.message.splitlines()[0], path=str(path), line=line, key=key) from error

    reader = _Reader(parser, str(path), _line_numbers(text))
    for section in parser.sections():
        if section not in KEYS:
            raise reader.error(f"unknown section [{section}]. Supported sections: {sorted(KEYS)}", section)
        for key in parser.options(section):
            if key not in KEYS[section]:
                raise reader.error(f"unknown key. Supported keys: {sorted(KEYS[section])}", section, key)

    configuration = get_configuration_file()
    dataset = reader.get("data", "dataset", Dataset, Dataset.MNIST)
    budget = configuration["datasets"][dataset.value]

    reference = reader.get("network", "reference", str, budget["network"])
    try:
        network = reference_config(reference)
    except ValueError as error:
        raise reader.error(str(error), "network", "reference") from error
    if network.dataset is not dataset:
        raise reader.error(f"network {reference} is built for {network.dataset.value}", "network", "reference")
    layer_text = reader.get("network", "layers", str, None)
    try:
        network = replace(
            network,
            layers=parse_layers(layer_text) if layer_text is not None else network.layers,
            activation=reader.get("network", "activation", _activation, network.activation),
            use_batchnorm=reader.get("network", "batchnorm", _boolean, network.use_batchnorm),
            use_dropout=reader.get("network", "dropout", _boolean, network.use_dropout),
            dropout_p=reader.get("network", "dropout_p", _probability, network.dropout_p),
            use_pooling=reader.get("network", "pooling", _boolean, network.use_pooling),
            bn_momentum=reader.get("network", "bn_momentum", _fraction, network.bn_momentum),
        )
    except ConfigurationError as error:
        if error.path is not None:
            raise
        raise reader.error(str(error), "network", "layers" if reader.has("network", "layers") else None) from error

    defaults = configuration["regimen"]
    perturbation = reader.get("perturbation", "spec", parse_perturbation, NATURAL)
    try:
        regimen = RegimenSpec(
            kind=reader.get("regimen", "kind", RegimenKind, RegimenKind(defaults["kind"])),
            perturbation=perturbation,
            epochs=reader.get("regimen", "epochs", _non_negative_int, budget["epochs"]),
            batch_size=reader.get("regimen", "batch_size", _positive_int, budget["batch_size"]),
            lr=reader.get("regimen", "lr", _positive_float, budget["lr"]),
            seed=reader.get("run", "seed", _non_negative_int, configuration["run"]["seed"]),
            fine_tune_all=reader.get("regimen", "fine_tune_all", _boolean, defaults["fine_tune_all"]),
            incremental_start=reader.get("regimen", "incremental_start", _fraction, defaults["incremental_start"]),
        )
    except ConfigurationError as error:
        if error.path is not None:
            raise
        # only the kind/perturbation pairing is left to check here
        key = ("regimen", "kind") if reader.has("regimen", "kind") or not reader.has("perturbation", "spec") \
            else ("perturbation", "spec")
        raise reader.error(str(error), *key) from error

    scale_defaults = configuration["scale"]
    scale = Scale(
        subset=reader.get("scale", "subset", _optional_positive_int, scale_defaults["subset"]),
        epochs_scale=reader.get("scale", "epochs_scale", _positive_float, scale_defaults["epochs_scale"]),
        models=reader.get("scale", "models", _optional_non_negative_int, scale_defaults["models"]),
    )

    evaluation = configuration["evaluation"]
    config = RunConfig(
        dataset=dataset,
        data_path=reader.get("data", "path", str, None),
        network=network,
        regimen=regimen,
        pretrained=reader.get("regimen", "pretrained", str, None),
        checkpoint=reader.get("evaluation", "checkpoint", str, None),
        trials=reader.get("evaluation", "trials", _positive_int, evaluation["trials"]),
        eval_batch_size=reader.get("evaluation", "eval_batch_size", _positive_int, evaluation["eval_batch_size"]),
        out=reader.get("run", "out", str, configuration["run"]["out"]),
        workers=reader.get("run", "workers", _positive_int, configuration["run"]["workers"]),
        scale=scale,
    )
    log.debug("Configuration parsed", path=str(path), dataset=dataset.value, regimen=regimen.kind.value)
    return config


def load_run_config(path=None) -> RunConfig:
    """Reads ``path``; without a path the packaged MNIST defaults are returned."""
    if path is None:
        return parse_run_config("")
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as error:
        raise ConfigurationError(f"cannot read configuration: {error.strerror}", path=str(path)) from error
    return parse_run_config(text, path)
