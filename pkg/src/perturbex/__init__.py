from perturbex.checkpoint import load_checkpoint, save_checkpoint
from perturbex.data import Dataset, DatasetStats, ImageBatch, load_cifar10_dir, load_mnist
from perturbex.evaluation import SweepReport, TrialReport, evaluate_accuracy, run_trials
from perturbex.matrix import MatrixGrid, Scale, run_robustness_matrix
from perturbex.network import Network, NetworkConfig, build_network, build_transfer_model, reference_config
from perturbex.perturb import BlurSpec, NoiseSpec, PixelDefectSpec, PixelKind, parse_perturbation
from perturbex.regimen import RegimenKind, RegimenSpec, train
