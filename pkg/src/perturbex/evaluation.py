"""
Accuracy measurement, the repeated-trial perturbation protocol and the
single-model impact sweeps.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import structlog

from perturbex.data import ImageBatch, Space, standardize
from perturbex.errors import ConfigurationError, StateError
from perturbex.functions import check_increasing, linear_grid
from perturbex.network import Network
from perturbex.perturb import BlurSpec, NoiseSpec, PixelDefectSpec, PixelKind, perturb_batch
from perturbex.resources import get_configuration_file
from perturbex.tensor import RngStream

log = structlog.get_logger()

TRIAL_COLUMNS = ["axis_name", "axis_value", "kind", "trial_index", "accuracy"]
SUMMARY_COLUMNS = ["axis_name", "axis_value", "kind", "mean", "std", "n_trials"]


def _evaluation_defaults() -> dict:
    return get_configuration_file()["evaluation"]


def evaluate_accuracy(net: Network, data: ImageBatch, chunk_size: int = None) -> float:
    """
    Fraction of samples whose arg-max logit equals the label.

    Ties between logits resolve to the lowest class index. Inference runs
    in evaluation mode, ``chunk_size`` samples at a time.

    Raises
    ------
    StateError
        When ``data`` is still in raw pixel space.
    """
    if data.space is not Space.STANDARDIZED:
        raise StateError("Accuracy is measured on standardized data; standardize with the network statistics first")
    if len(data) == 0:
        raise ValueError("Cannot measure accuracy on an empty batch")
    if chunk_size is None:
        chunk_size = _evaluation_defaults()["eval_batch_size"]
    if chunk_size < 1:
        raise ConfigurationError(f"Chunk size must be at least 1, got {chunk_size}")
    predictions = net.predict(data.pixels, chunk_size).argmax(axis=1)
    return float(np.mean(predictions == data.labels))


@dataclass
class TrialReport:
    """
    Accuracies of repeated perturbed evaluations of one model.

    Attributes
    ----------
    spec : PerturbationSpec
        Perturbation applied to the test set.
    trials : list of float
        Accuracy of every trial, in trial order.
    model_id : str
        Free-form identifier of the evaluated model.
    seed : int
        Base seed; trial ``i`` draws from ``RngStream(seed).split(i)``.
    """

    spec: object
    trials: list = field(default_factory=list)
    model_id: str = ""
    seed: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean(self.trials))

    @property
    def std(self) -> float:
        return float(np.std(self.trials))

    def __len__(self):
        return len(self.trials)


def run_trials(net: Network, clean_test: ImageBatch, spec, trials: int = None, base_seed: int = 0,
               model_id: str = "", chunk_size: int = None) -> TrialReport:
    """
    Perturbs the whole raw test set ``trials`` times and records the accuracy
    of every trial.

    Deterministic perturbations (blur, none) are evaluated once. The test
    set is standardized with the statistics stored on ``net``.
    """
    if net.stats is None:
        raise StateError("The network carries no dataset statistics")
    if trials is None:
        trials = _evaluation_defaults()["trials"]
    if trials < 1:
        raise ConfigurationError(f"Trial count must be at least 1, got {trials}")
    count = trials if spec.stochastic else 1
    report = TrialReport(spec=spec, model_id=model_id, seed=base_seed)
    root = RngStream(base_seed)
    for index in range(count):
        perturbed = perturb_batch(clean_test, spec, root.split(index))
        accuracy = evaluate_accuracy(net, standardize(perturbed, net.stats), chunk_size)
        report.trials.append(accuracy)
        log.debug("Trial evaluated", spec=str(spec), trial=index, accuracy=accuracy, model=model_id)
    return report


@dataclass
class SweepReport:
    """
    Trial reports along one axis.

    Attributes
    ----------
    axis_name : str
        'pixel_count', 'noise_variance', 'blur_sigma' or a training axis of
        the robustness matrix.
    rows : list of tuple
        (axis value, {kind: TrialReport}) in strictly increasing axis order.
    """

    axis_name: str
    rows: list = field(default_factory=list)

    def __post_init__(self):
        check_increasing(self.axis_values)

    @property
    def axis_values(self) -> list:
        return [value for value, _ in self.rows]

    def add_row(self, value: float, reports: dict) -> None:
        check_increasing(self.axis_values + [value])
        self.rows.append((value, reports))

    def trials_frame(self) -> pd.DataFrame:
        records = [
            (self.axis_name, value, kind, index, accuracy)
            for value, reports in self.rows
            for kind, report in reports.items()
            for index, accuracy in enumerate(report.trials)
        ]
        return pd.DataFrame.from_records(records, columns=TRIAL_COLUMNS)

    def summary_frame(self) -> pd.DataFrame:
        records = [
            (self.axis_name, value, kind, report.mean, report.std, len(report))
            for value, reports in self.rows
            for kind, report in reports.items()
        ]
        return pd.DataFrame.from_records(records, columns=SUMMARY_COLUMNS)

    def to_csv(self, directory, stem: str) -> tuple:
        """Writes ``{stem}_trials.csv`` and ``{stem}_summary.csv`` into ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        trials_path = directory / f"{stem}_trials.csv"
        summary_path = directory / f"{stem}_summary.csv"
        self.trials_frame().to_csv(trials_path, index=False)
        self.summary_frame().to_csv(summary_path, index=False)
        return trials_path, summary_path

    def to_json(self, path) -> Path:
        content = {
            "axis_name": self.axis_name,
            "trials": self.trials_frame().to_dict(orient="records"),
            "summary": self.summary_frame().to_dict(orient="records"),
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(content, indent=2))
        return path


def _sweep(net: Network, test: ImageBatch, axis_name: str, grid: list, specs_for, trials: int,
           base_seed: int, model_id: str, chunk_size: int) -> SweepReport:
    report = SweepReport(axis_name)
    for value in grid:
        reports = {
            spec.label: run_trials(net, test, spec, trials, base_seed, model_id, chunk_size)
            for spec in specs_for(value)
        }
        report.add_row(value, reports)
        log.info("Sweep row finished", axis=axis_name, value=value,
                 means={kind: round(r.mean, 4) for kind, r in reports.items()})
    return report


def run_pixel_impact_sweep(net: Network, test: ImageBatch, counts: list = None, kinds: list = None,
                           trials: int = None, base_seed: int = 0, model_id: str = "",
                           chunk_size: int = None) -> SweepReport:
    """
    Accuracy as a function of the number of defective pixels, for every
    defect kind (stuck, hot and dead by default, counts 1 to 5).
    """
    defaults = _evaluation_defaults()
    counts = counts or defaults["pixel_counts"]
    kinds = [PixelKind(kind) for kind in (kinds or defaults["pixel_kinds"])]
    return _sweep(net, test, "pixel_count", [int(c) for c in counts],
                  lambda count: [PixelDefectSpec(kind, count) for kind in kinds],
                  trials, base_seed, model_id, chunk_size)


def run_noise_impact_sweep(net: Network, test: ImageBatch, variances: list = None,
                           trials: int = None, base_seed: int = 0, model_id: str = "",
                           chunk_size: int = None) -> SweepReport:
    """Accuracy as a function of the additive noise variance (0.001 to 0.05 by default)."""
    if variances is None:
        variances = linear_grid(*_evaluation_defaults()["noise_range"])
    return _sweep(net, test, "noise_variance", [float(v) for v in variances],
                  lambda variance: [NoiseSpec(variance)], trials, base_seed, model_id, chunk_size)


def run_blur_impact_sweep(net: Network, test: ImageBatch, sigmas: list = None,
                          base_seed: int = 0, model_id: str = "", chunk_size: int = None) -> SweepReport:
    """Accuracy at five linearly spaced blur sigmas in [0.04, 1.00]; one trial each."""
    if sigmas is None:
        sigmas = linear_grid(*_evaluation_defaults()["blur_range"])
    return _sweep(net, test, "blur_sigma", [float(s) for s in sigmas],
                  lambda sigma: [BlurSpec(sigma)], 1, base_seed, model_id, chunk_size)
