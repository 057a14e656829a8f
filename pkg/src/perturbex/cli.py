"""
Command-line entry point: ``perturbex {train, sweep, preview, ablate}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure during training.
"""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import pandas as pd
import structlog

from perturbex.checkpoint import load_checkpoint, save_checkpoint
from perturbex.config import RunConfig, load_run_config
from perturbex.data import Dataset, compute_stats, load_cifar10_dir, load_mnist, standardize, subset
from perturbex.errors import ConfigurationError, DatasetFormatError, NumericalError, PerturbexError
from perturbex.evaluation import (
    evaluate_accuracy,
    run_blur_impact_sweep,
    run_noise_impact_sweep,
    run_pixel_impact_sweep,
)
from perturbex.matrix import run_robustness_matrix
from perturbex.network import build_network
from perturbex.perturb import NATURAL, NoiseSpec, apply, parse_perturbation, write_pnm
from perturbex.regimen import RegimenKind, train
from perturbex.resources import get_configuration_file
from perturbex.tensor import RngStream

log = structlog.get_logger()

ABLATION_COLUMNS = ["batchnorm", "dropout", "activation", "train_accuracy", "test_accuracy"]


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(level),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def load_split(config: RunConfig, split: str):
    directory = config.require_data_path()
    match config.dataset:
        case Dataset.MNIST:
            return load_mnist(directory, split)
        case Dataset.CIFAR10:
            return load_cifar10_dir(directory, split)


def _training_split(config: RunConfig):
    data = load_split(config, "train")
    return subset(data, config.scale.subset, RngStream(config.seed).split("subset"))


def _scaled_regimen(config: RunConfig):
    return replace(config.regimen, epochs=config.scale.epochs(config.regimen.epochs))


def _run_name(config: RunConfig) -> str:
    perturbation = str(config.regimen.perturbation).replace(":", "-")
    return f"{config.dataset.value}_{config.regimen.kind.value}_{perturbation}_seed{config.seed}"


def cmd_train(config: RunConfig) -> Path:
    """
    Trains one model and writes ``model.ckpt``, ``train_log.csv`` and the
    canonical ``config.ini`` into ``out/<run name>/``.
    """
    spec = _scaled_regimen(config)
    pretrained = None
    if spec.kind is RegimenKind.TRANSFER:
        if config.pretrained is None:
            raise ConfigurationError("transfer training needs a pretrained checkpoint", key="regimen.pretrained")
        pretrained, _, _ = load_checkpoint(config.pretrained)
    data = _training_split(config)
    held_out = load_split(config, "test")

    network, train_log = train(config.network, data, spec, held_out, pretrained)
    directory = Path(config.out) / _run_name(config)
    metadata = {"regimen": spec.kind.value, "perturbation": str(spec.perturbation), "seed": spec.seed,
                "epochs": spec.epochs}
    save_checkpoint(directory / "model.ckpt", network, train_log.optimizer, metadata)
    train_log.to_csv(directory / "train_log.csv")
    (directory / "config.ini").write_text(config.to_ini())
    log.info("Training finished", out=str(directory), epochs=len(train_log),
             held_out_acc=train_log.records[-1]["held_out_acc"] if train_log.records else None)
    return directory


def cmd_sweep(config: RunConfig, kind: str) -> Path:
    """
    Runs a single-model sweep ('pixel', 'noise', 'blur') on
    ``evaluation.checkpoint`` or the robustness matrix ('matrix').
    """
    directory = Path(config.out)
    test = load_split(config, "test")
    if kind == "matrix":
        base = replace(config.regimen, kind=RegimenKind.NATURAL, perturbation=NATURAL)
        result = run_robustness_matrix(
            config.network, load_split(config, "train"), test, base, scale=config.scale,
            baseline=config.pretrained, trials=config.trials, workers=config.workers,
            chunk_size=config.eval_batch_size,
        )
        result.write(directory / "matrix")
        log.info("Matrix finished", cells=len(result.cells), failed=len(result.errors))
        return directory / "matrix"

    if config.checkpoint is None:
        raise ConfigurationError("a checkpoint to evaluate is required", key="evaluation.checkpoint")
    network, _, _ = load_checkpoint(config.checkpoint)
    options = {"base_seed": config.seed, "model_id": str(config.checkpoint), "chunk_size": config.eval_batch_size}
    match kind:
        case "pixel":
            report = run_pixel_impact_sweep(network, test, trials=config.trials, **options)
        case "noise":
            report = run_noise_impact_sweep(network, test, trials=config.trials, **options)
        case "blur":
            report = run_blur_impact_sweep(network, test, **options)
        case _:
            raise ConfigurationError(f"Sweep {kind} is not supported. Supported sweeps: pixel, noise, blur, matrix")
    report.to_csv(directory, f"{kind}_sweep")
    report.to_json(directory / f"{kind}_sweep.json")
    return directory


def cmd_preview(config: RunConfig, index: int, specs: list = None, split: str = "test") -> list:
    """
    Writes image ``index`` unperturbed and under every spec as PGM/PPM files.

    Without specs the configured perturbation is used, or the noise preview
    grid (0.001 to 0.1) when the configuration has none.
    """
    data = load_split(config, split)
    if not 0 <= index < len(data):
        raise IndexError(f"Image index {index} is outside 0..{len(data) - 1}")
    if not specs:
        if config.regimen.perturbation != NATURAL:
            specs = [config.regimen.perturbation]
        else:
            variances = get_configuration_file()["evaluation"]["preview_noise_variances"]
            specs = [NoiseSpec(variance) for variance in variances]

    image = data.pixels[index]
    extension = "pgm" if image.shape[0] == 1 else "ppm"
    directory = Path(config.out) / "preview"
    directory.mkdir(parents=True, exist_ok=True)
    rng = RngStream(config.seed).split("preview").split(index)
    paths = [write_pnm(directory / f"{split}_{index}_natural.{extension}", image)]
    for position, spec in enumerate(specs):
        name = str(spec).replace(":", "-")
        paths.append(write_pnm(directory / f"{split}_{index}_{name}.{extension}", apply(image, spec, rng.split(position))))
    log.info("Preview written", files=[str(path) for path in paths])
    return paths


def cmd_ablate(config: RunConfig) -> Path:
    """
    Trains the six batch normalization / dropout / activation combinations
    with identical hyperparameters and writes ``ablation.csv``.
    """
    spec = replace(_scaled_regimen(config), kind=RegimenKind.NATURAL, perturbation=NATURAL)
    data = _training_split(config)
    test = load_split(config, "test")
    stats = compute_stats(data)
    train_std, test_std = standardize(data, stats), standardize(test, stats)

    records = []
    for row in get_configuration_file()["ablation_rows"]:
        network_config = replace(config.network, use_batchnorm=row["batchnorm"], use_dropout=row["dropout"],
                                 activation=row["activation"])
        structure = build_network(network_config, RngStream(spec.seed))
        if (structure.count("batchnorm") > 0) != row["batchnorm"] or (structure.count("dropout") > 0) != row["dropout"] \
                or structure.activations != {row["activation"]}:
            raise ConfigurationError(f"Network structure does not match ablation row {row}", key="network.layers")
        network, _ = train(network_config, data, spec)
        records.append((row["batchnorm"], row["dropout"], row["activation"],
                        evaluate_accuracy(network, train_std, config.eval_batch_size),
                        evaluate_accuracy(network, test_std, config.eval_batch_size)))
        log.info("Ablation row finished", **dict(zip(ABLATION_COLUMNS, records[-1])))

    path = Path(config.out) / "ablation.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame.from_records(records, columns=ABLATION_COLUMNS).to_csv(path, index=False)
    return path


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="process pool size of the robustness matrix")
    common.add_argument("--subset", type=int, help="training samples kept after shuffling")
    common.add_argument("--epochs-scale", type=float, help="multiplier on every epoch count, rounded up")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true")
    verbosity.add_argument("--quiet", "-q", action="store_true")

    parser = _ArgumentParser(prog="perturbex", description="Robustness of CNNs to digital image perturbations.")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)
    commands.add_parser("train", parents=[common], help="train one model")
    sweep = commands.add_parser("sweep", parents=[common], help="run an impact sweep or the robustness matrix")
    sweep.add_argument("kind", choices=["pixel", "noise", "blur", "matrix"])
    preview = commands.add_parser("preview", parents=[common], help="write natural and perturbed images")
    preview.add_argument("--index", type=int, default=0)
    preview.add_argument("--spec", action="append", default=[], help="perturbation, repeatable")
    preview.add_argument("--split", choices=["train", "test"], default="test")
    commands.add_parser("ablate", parents=[common], help="train the batch norm / dropout / activation ablation")
    return parser


def main(argv: list = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        config = load_run_config(args.config).with_overrides(
            seed=args.seed, out=args.out, workers=args.workers, subset=args.subset, epochs_scale=args.epochs_scale,
        )
        match args.command:
            case "train":
                cmd_train(config)
            case "sweep":
                cmd_sweep(config, args.kind)
            case "preview":
                cmd_preview(config, args.index, [parse_perturbation(spec) for spec in args.spec], args.split)
            case "ablate":
                cmd_ablate(config)
    except NumericalError as error:
        log.error("Numerical failure", error=str(error))
        return 3
    except (DatasetFormatError, OSError) as error:
        log.error("Data error", error=str(error))
        return 2
    except (PerturbexError, ValueError, IndexError) as error:
        log.error("Configuration error", error=str(error))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
