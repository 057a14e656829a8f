import json
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd

from perturbex.data import compute_stats, standardize
from perturbex.errors import ConfigurationError, StateError
from perturbex.evaluation import (
    SUMMARY_COLUMNS,
    TRIAL_COLUMNS,
    SweepReport,
    TrialReport,
    evaluate_accuracy,
    run_blur_impact_sweep,
    run_noise_impact_sweep,
    run_pixel_impact_sweep,
    run_trials,
)
from perturbex.network import build_network
from perturbex.perturb import BlurSpec, NoiseSpec, PixelDefectSpec, PixelKind
from perturbex.regimen import RegimenSpec, train_natural
from perturbex.tensor import RngStream
from tests.data import tiny_config, toy_batch


class TestAccuracy(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        spec = RegimenSpec("natural", epochs=2, batch_size=16, lr=0.01, seed=0)
        cls.network, _ = train_natural(tiny_config(), toy_batch(48), spec)
        cls.test = toy_batch(20, seed=3)

    def test_constant_logits_pick_class_zero(self):
        network = build_network(tiny_config(use_batchnorm=False, use_dropout=False), RngStream(0))
        last = network.layers[-1]
        last.parameters["weight"][...] = 0
        last.parameters["bias"][...] = 0
        data = toy_batch(30)
        # ties resolve to class 0, which is a tenth of the labels
        self.assertAlmostEqual(evaluate_accuracy(network, standardize(data, compute_stats(data))), 0.1)

    def test_matches_loop(self):
        data = standardize(self.test, self.network.stats)
        correct = 0
        for image, label in zip(data.pixels, data.labels):
            logits = self.network.predict(image[None])[0]
            correct += int(np.argmax(logits) == label)
        self.assertAlmostEqual(evaluate_accuracy(self.network, data, chunk_size=7), correct / len(data))

    def test_raw_data_rejected(self):
        with self.assertRaises(StateError):
            evaluate_accuracy(self.network, self.test)

    def test_deterministic_perturbation_runs_once(self):
        report = run_trials(self.network, self.test, BlurSpec(0.5), trials=10)
        self.assertEqual(len(report), 1)
        self.assertEqual(report.std, 0.0)

    def test_zero_noise_trials_agree(self):
        report = run_trials(self.network, self.test, NoiseSpec(0.0), trials=4, base_seed=2)
        self.assertEqual(len(report), 4)
        self.assertEqual(len(set(report.trials)), 1)
        clean = evaluate_accuracy(self.network, standardize(self.test, self.network.stats))
        self.assertEqual(report.mean, clean)

    def test_trials_reproducible(self):
        spec = PixelDefectSpec(PixelKind.DEAD, 40)
        first = run_trials(self.network, self.test, spec, trials=3, base_seed=5)
        second = run_trials(self.network, self.test, spec, trials=3, base_seed=5)
        self.assertEqual(first.trials, second.trials)
        self.assertEqual(first.seed, 5)

    def test_trial_count_must_be_positive(self):
        for trials in (0, -2):
            with self.subTest(trials=trials), self.assertRaises(ConfigurationError):
                run_trials(self.network, self.test, NoiseSpec(0.01), trials=trials)
        with self.assertRaises(ConfigurationError):
            evaluate_accuracy(self.network, standardize(self.test, self.network.stats), chunk_size=0)

    def test_needs_statistics(self):
        network = build_network(tiny_config(), RngStream(0))
        with self.assertRaises(StateError):
            run_trials(network, self.test, NoiseSpec(0.01), trials=2)


class TestTrialReport(unittest.TestCase):

    def test_statistics(self):
        report = TrialReport(NoiseSpec(0.01), [0.9, 0.8, 0.7, 0.6])
        self.assertAlmostEqual(report.mean, 0.75)
        # population standard deviation
        self.assertAlmostEqual(report.std, float(np.sqrt(0.0125)))


class TestSweeps(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        spec = RegimenSpec("natural", epochs=1, batch_size=16, lr=0.01, seed=0)
        cls.network, _ = train_natural(tiny_config(), toy_batch(32), spec)
        cls.test = toy_batch(10, seed=3)

    def test_axis_must_increase(self):
        report = SweepReport("noise_variance")
        report.add_row(0.01, {})
        with self.assertRaises(ValueError):
            report.add_row(0.01, {})
        with self.assertRaises(ValueError):
            SweepReport("blur_sigma", [(0.5, {}), (0.2, {})])

    def test_pixel_sweep(self):
        report = run_pixel_impact_sweep(self.network, self.test, counts=[1, 3], trials=2)
        self.assertEqual(report.axis_name, "pixel_count")
        self.assertEqual(report.axis_values, [1, 3])
        trials = report.trials_frame()
        summary = report.summary_frame()
        self.assertEqual(list(trials.columns), TRIAL_COLUMNS)
        self.assertEqual(list(summary.columns), SUMMARY_COLUMNS)
        self.assertEqual(len(trials), 2 * 3 * 2)
        self.assertEqual(set(summary["kind"]), {"stuck", "hot", "dead"})
        self.assertTrue((summary["n_trials"] == 2).all())

    def test_noise_sweep_default_grid(self):
        report = run_noise_impact_sweep(self.network, self.test, trials=2)
        np.testing.assert_allclose(report.axis_values, [0.001, 0.01325, 0.0255, 0.03775, 0.05])

    def test_blur_sweep_files(self):
        report = run_blur_impact_sweep(self.network, self.test)
        np.testing.assert_allclose(report.axis_values, [0.04, 0.28, 0.52, 0.76, 1.0])
        with tempfile.TemporaryDirectory() as directory:
            trials_path, summary_path = report.to_csv(directory, "blur_sweep")
            self.assertEqual(summary_path.name, "blur_sweep_summary.csv")
            summary = pd.read_csv(summary_path)
            trials = pd.read_csv(trials_path)
            content = json.loads(report.to_json(Path(directory) / "blur_sweep.json").read_text())
        self.assertEqual(len(summary), 5)
        self.assertTrue((summary["std"] == 0).all())
        self.assertEqual(len(trials), 5)
        self.assertEqual(content["axis_name"], "blur_sigma")
        self.assertEqual(len(content["summary"]), 5)

    def test_summary_recomputes_from_trials(self):
        report = run_noise_impact_sweep(self.network, self.test, variances=[0.02, 0.04], trials=3)
        trials = report.trials_frame()
        for _, row in report.summary_frame().iterrows():
            accuracies = trials.loc[trials["axis_value"] == row["axis_value"], "accuracy"]
            self.assertAlmostEqual(row["mean"], accuracies.mean())
            self.assertAlmostEqual(row["std"], float(np.std(accuracies.to_numpy())))


if __name__ == "__main__":
    unittest.main()
