"""
Robustness matrix: every regimen trained on every training perturbation,
each model evaluated at the family's test points and on natural images.
"""
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd
import structlog

from perturbex.checkpoint import load_checkpoint
from perturbex.data import ImageBatch, standardize, subset
from perturbex.errors import PerturbexError
from perturbex.evaluation import SweepReport, evaluate_accuracy, run_trials
from perturbex.functions import linear_grid
from perturbex.network import Network, NetworkConfig
from perturbex.perturb import NATURAL, BlurSpec, NoiseSpec, PixelDefectSpec, PixelKind
from perturbex.regimen import RegimenKind, RegimenSpec, train, train_natural
from perturbex.resources import get_configuration_file
from perturbex.tensor import RngStream

log = structlog.get_logger()

AXIS_NAMES = {"pixel": "train_pixel_count", "noise": "train_noise_variance", "blur": "train_blur_sigma"}
ROBUSTNESS_COLUMNS = [
    "regimen", "family", "kind", "train_value", "test", "mean", "std", "n_trials", "deviation", "worst_case",
]


@dataclass(frozen=True)
class Scale:
    """
    Shrinks the full grid to desk scale.

    Attributes
    ----------
    subset : int or None
        Training samples kept after shuffling with the run seed.
    epochs_scale : float
        Multiplier on every epoch count, rounded up.
    models : int or None
        Upper bound on trained models; counts the natural baseline when the
        matrix trains it instead of receiving a pretrained one.
    """

    subset: int = None
    epochs_scale: float = 1.0
    models: int = None

    def __post_init__(self):
        if not self.epochs_scale > 0:
            raise ValueError(f"epochs_scale must be positive, got {self.epochs_scale}")
        if self.models is not None and self.models < 0:
            raise ValueError(f"Model bound must be non-negative, got {self.models}")
        if self.subset is not None and self.subset < 1:
            raise ValueError(f"Subset size must be positive, got {self.subset}")

    def epochs(self, epochs: int) -> int:
        return math.ceil(Fraction(str(self.epochs_scale)) * epochs)


@dataclass(frozen=True)
class MatrixCell:
    regimen: RegimenKind
    training: object

    @property
    def family(self) -> str:
        return self.training.family

    @property
    def cell_id(self) -> str:
        return f"{self.regimen.value}_{str(self.training).replace(':', '-')}"


@dataclass(frozen=True)
class MatrixGrid:
    """
    Training and test points of the robustness matrix.

    Pixel models are trained with 1 to 10 defects of each kind and tested at
    2 defects of every kind; noise and blur models are trained on five
    linearly spaced levels and tested at three fixed levels.
    """

    regimens: tuple
    pixel_kinds: tuple
    pixel_train_counts: tuple
    pixel_test_count: int
    noise_train: tuple
    noise_test: tuple
    blur_train: tuple
    blur_test: tuple

    @classmethod
    def from_defaults(cls, **overrides) -> "MatrixGrid":
        configuration = get_configuration_file()
        matrix = configuration["matrix"]
        values = {
            "regimens": tuple(RegimenKind(kind) for kind in matrix["regimens"]),
            "pixel_kinds": tuple(PixelKind(kind) for kind in configuration["evaluation"]["pixel_kinds"]),
            "pixel_train_counts": tuple(matrix["pixel_train_counts"]),
            "pixel_test_count": matrix["pixel_test_count"],
            "noise_train": tuple(linear_grid(*matrix["noise_train_range"])),
            "noise_test": tuple(matrix["noise_test_variances"]),
            "blur_train": tuple(linear_grid(*matrix["blur_train_range"])),
            "blur_test": tuple(matrix["blur_test_sigmas"]),
        }
        values.update(overrides)
        return cls(**values)

    def training_specs(self) -> list:
        specs = [PixelDefectSpec(kind, count) for kind in self.pixel_kinds for count in self.pixel_train_counts]
        specs += [NoiseSpec(variance) for variance in self.noise_train]
        specs += [BlurSpec(sigma) for sigma in self.blur_train]
        return specs

    def cells(self) -> list:
        return [MatrixCell(regimen, spec) for regimen in self.regimens for spec in self.training_specs()]

    def test_specs(self, family: str) -> list:
        """Natural images first, then the family's perturbed test points."""
        match family:
            case "pixel":
                perturbed = [PixelDefectSpec(kind, self.pixel_test_count) for kind in self.pixel_kinds]
            case "noise":
                perturbed = [NoiseSpec(variance) for variance in self.noise_test]
            case "blur":
                perturbed = [BlurSpec(sigma) for sigma in self.blur_test]
            case _:
                raise ValueError(f"Family {family} is not supported. Supported families: 'pixel', 'noise', 'blur'")
        return [NATURAL] + perturbed

    def model_count(self) -> int:
        """Trained models at full scale, the natural baseline included."""
        return len(self.cells()) + 1


@dataclass
class CellResult:
    cell: MatrixCell
    reports: dict = field(default_factory=dict)
    error: str = None

    @property
    def worst_case(self) -> float:
        means = [report.mean for name, report in self.reports.items() if name != str(NATURAL)]
        return min(means) if means else np.nan


@dataclass
class MatrixResult:
    """
    Outcome of ``run_robustness_matrix``.

    Attributes
    ----------
    ground_truth : float
        Natural model accuracy on natural test images (NaN when unavailable).
    cells : list of CellResult
    """

    ground_truth: float = np.nan
    cells: list = field(default_factory=list)

    @property
    def errors(self) -> dict:
        return {result.cell.cell_id: result.error for result in self.cells if result.error is not None}

    def sweeps(self) -> dict:
        """
        One SweepReport per (regimen, family, training kind) with the training
        level as the axis; every row maps the test point to its TrialReport.
        """
        grouped = {}
        for result in self.cells:
            if result.error is not None:
                continue
            training = result.cell.training
            key = (result.cell.regimen.value, training.family, training.label)
            grouped.setdefault(key, []).append((training.value, result.reports))
        return {
            key: SweepReport(AXIS_NAMES[key[1]], sorted(rows, key=lambda row: row[0]))
            for key, rows in grouped.items()
        }

    def robustness_frame(self) -> pd.DataFrame:
        records = [
            (
                result.cell.regimen.value, result.cell.family, result.cell.training.label,
                result.cell.training.value, test, report.mean, report.std, len(report),
                report.mean - self.ground_truth, result.worst_case,
            )
            for result in self.cells
            if result.error is None
            for test, report in result.reports.items()
        ]
        return pd.DataFrame.from_records(records, columns=ROBUSTNESS_COLUMNS)

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for (regimen, family, kind), report in self.sweeps().items():
            report.to_csv(directory, f"matrix_{regimen}_{family}_{kind}")
        self.robustness_frame().to_csv(directory / "matrix_robustness.csv", index=False)
        pd.DataFrame(list(self.errors.items()), columns=["cell", "error"]).to_csv(
            directory / "matrix_errors.csv", index=False
        )
        summary = {
            "ground_truth": None if np.isnan(self.ground_truth) else self.ground_truth,
            "robustness": self.robustness_frame().to_dict(orient="records"),
            "errors": self.errors,
        }
        (directory / "matrix.json").write_text(json.dumps(summary, indent=2))
        return directory


def _run_cell(cell: MatrixCell, config: NetworkConfig, train_data: ImageBatch, test_data: ImageBatch,
              base: RegimenSpec, baseline: Network, test_specs: list, trials: int,
              chunk_size: int = None) -> CellResult:
    result = CellResult(cell)
    try:
        if cell.regimen is RegimenKind.TRANSFER and baseline is None:
            raise PerturbexError("The pretrained natural model is unavailable")
        spec = replace(base, kind=cell.regimen, perturbation=cell.training)
        model, _ = train(config, train_data, spec, pretrained=baseline)
        for test in test_specs:
            result.reports[str(test)] = run_trials(
                model, test_data, test, trials, base.seed, cell.cell_id, chunk_size
            )
        log.info("Matrix cell trained", cell=cell.cell_id, worst_case=result.worst_case)
    except (PerturbexError, OSError) as error:
        result.error = str(error)
        log.warning("Matrix cell failed", cell=cell.cell_id, error=str(error))
    return result


def run_robustness_matrix(config: NetworkConfig, train_data: ImageBatch, test_data: ImageBatch,
                          base: RegimenSpec, grid: MatrixGrid = None, scale: Scale = Scale(),
                          baseline=None, trials: int = None, workers: int = 1,
                          chunk_size: int = None) -> MatrixResult:
    """
    Trains and evaluates every cell of ``grid``.

    Parameters
    ----------
    config : NetworkConfig
        Architecture shared by every cell.
    train_data, test_data : ImageBatch
        Raw training and test splits.
    base : RegimenSpec
        Natural regimen supplying epochs, batch size, learning rate and seed.
    grid : MatrixGrid, optional
        Defaults to the packaged grid.
    scale : Scale
        Training subset, epoch multiplier and model bound.
    baseline : Network or path, optional
        Pretrained natural model (or its checkpoint). Trained when omitted.
    trials : int, optional
        Trials per stochastic test point.
    workers : int
        Size of the process pool; 1 runs every cell in this process.
    chunk_size : int, optional
        Evaluation batch size.

    Returns
    -------
    MatrixResult
        Failed cells carry their error message; the grid continues past them.
    """
    grid = grid or MatrixGrid.from_defaults()
    result = MatrixResult()
    cells = grid.cells()
    if scale.models is not None:
        # the bound counts the natural baseline only when it is trained here
        budget = scale.models - (1 if baseline is None else 0)
        if scale.models == 0:
            return result
        cells = cells[:max(budget, 0)]

    train_data = subset(train_data, scale.subset, RngStream(base.seed).split("subset"))
    base = replace(base, epochs=scale.epochs(base.epochs))

    if baseline is None:
        baseline, _ = train_natural(config, train_data, base)
    elif not isinstance(baseline, Network):
        try:
            baseline, _, _ = load_checkpoint(baseline)
        except (PerturbexError, OSError) as error:
            log.warning("Pretrained checkpoint unavailable", path=str(baseline), error=str(error))
            baseline = None
    if baseline is not None:
        result.ground_truth = evaluate_accuracy(baseline, standardize(test_data, baseline.stats), chunk_size)
    log.info("Matrix started", cells=len(cells), ground_truth=result.ground_truth, workers=workers)

    arguments = [
        (cell, config, train_data, test_data, base, baseline, grid.test_specs(cell.family), trials, chunk_size)
        for cell in cells
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(_run_cell, *args) for args in arguments]
            result.cells = [future.result() for future in futures]
    else:
        result.cells = [_run_cell(*args) for args in arguments]
    return result
