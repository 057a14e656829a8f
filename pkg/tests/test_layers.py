import math
import unittest

import numpy as np

from perturbex.errors import ConfigurationError, DimensionError, StateError
from perturbex.functions import central_difference, one_hot, relative_error
from perturbex.layers import (
    Activation,
    BatchNorm2d,
    Conv2d,
    Dropout,
    Flatten,
    Linear,
    MaxPool2d,
    initialize,
    nll_loss,
    softmax,
    softmax_nll_gradient,
)
from perturbex.network import NetworkConfig, build_network
from perturbex.tensor import RngStream

H = 1e-5
FLOOR = 1e-3


def gradient_errors(layer, x: np.ndarray, training: bool = True, seed: int = 0) -> dict:
    """Relative errors of the input and parameter gradients against central differences."""
    weights = np.random.default_rng(seed).standard_normal(layer.forward(x, training).shape)
    grad_input = layer.backward(weights)
    analytic = {name: value.copy() for name, value in layer.gradients.items()}

    def loss():
        return float(np.sum(layer.forward(x, training) * weights))

    errors = {"input": relative_error(grad_input, central_difference(loss, x, H), FLOOR)}
    for name, value in layer.parameters.items():
        errors[name] = relative_error(analytic[name], central_difference(loss, value, H), FLOOR)
    return errors


def randomize(layer, seed: int) -> None:
    generator = np.random.default_rng(seed)
    for value in layer.parameters.values():
        value[...] = generator.standard_normal(value.shape)


class TestGradients(unittest.TestCase):

    def assertGradientsMatch(self, errors: dict, tolerance: float = 1e-4):
        for name, error in errors.items():
            self.assertLess(error, tolerance, msg=f"{name}: relative error {error}")

    def test_conv_randomized_geometry(self):
        generator = np.random.default_rng(42)
        for seed in range(20):
            in_channels, units = generator.integers(1, 4, size=2)
            kernel = int(generator.integers(1, 4))
            padding = int(generator.integers(0, 2))
            stride = int(generator.integers(1, 3))
            outputs = int(generator.integers(2, 4))
            size = stride * (outputs - 1) + kernel - 2 * padding
            if size < 1:
                size += stride
            layer = Conv2d(int(in_channels), int(units), kernel, padding, stride, dtype=np.float64)
            randomize(layer, seed)
            x = generator.standard_normal((2, int(in_channels), size, size))
            with self.subTest(seed=seed, kernel=kernel, padding=padding, stride=stride, size=size):
                self.assertGradientsMatch(gradient_errors(layer, x, seed=seed))

    def test_batchnorm_training(self):
        for seed in range(3):
            layer = BatchNorm2d(3, dtype=np.float64)
            randomize(layer, seed)
            x = np.random.default_rng(seed).standard_normal((4, 3, 3, 3)) * 2 + 1
            with self.subTest(seed=seed):
                self.assertGradientsMatch(gradient_errors(layer, x, training=True, seed=seed), 1e-6)

    def test_batchnorm_evaluation(self):
        layer = BatchNorm2d(2, dtype=np.float64)
        randomize(layer, 1)
        x = np.random.default_rng(1).standard_normal((3, 2, 2, 2))
        layer.forward(x, training=True)
        self.assertGradientsMatch(gradient_errors(layer, x, training=False), 1e-6)

    def test_linear(self):
        for seed in range(3):
            layer = Linear(7, 5, dtype=np.float64)
            randomize(layer, seed)
            x = np.random.default_rng(seed).standard_normal((4, 7))
            with self.subTest(seed=seed):
                self.assertGradientsMatch(gradient_errors(layer, x, seed=seed), 1e-6)

    def test_activations(self):
        for function in ("relu", "tanh"):
            x = np.random.default_rng(3).standard_normal((5, 2, 3, 3))
            with self.subTest(function=function):
                self.assertGradientsMatch(gradient_errors(Activation(function), x))

    def test_maxpool(self):
        x = np.random.default_rng(4).standard_normal((2, 3, 4, 6))
        self.assertGradientsMatch(gradient_errors(MaxPool2d(2), x))

    def test_flatten(self):
        x = np.random.default_rng(5).standard_normal((2, 3, 2, 2))
        self.assertGradientsMatch(gradient_errors(Flatten(), x), 1e-6)

    def test_softmax_nll(self):
        generator = np.random.default_rng(6)
        logits = generator.standard_normal((5, 10))
        targets = one_hot(generator.integers(0, 10, size=5), dtype=np.float64)
        analytic = softmax_nll_gradient(softmax(logits), targets)
        numeric = central_difference(lambda: nll_loss(softmax(logits), targets), logits, H)
        self.assertLess(relative_error(analytic, numeric, FLOOR), 1e-6)

    def test_whole_network(self):
        config = NetworkConfig("mnist", "conv:2:4:0:2, flatten, linear:10", activation="tanh",
                               use_batchnorm=True, use_dropout=False)
        network = build_network(config, RngStream(0), dtype=np.float64).train()
        generator = np.random.default_rng(7)
        x = generator.standard_normal((4, 1, 28, 28))
        labels = np.array([0, 3, 3, 9])
        _, _, gradients = network.compute_gradients(x, labels)
        analytic = {name: value.copy() for name, value in gradients.items()}

        def loss():
            return nll_loss(softmax(network.forward(x)), one_hot(labels, dtype=np.float64))

        for name, value in network.named_parameters().items():
            with self.subTest(parameter=name):
                error = relative_error(analytic[name], central_difference(loss, value, H), FLOOR)
                self.assertLess(error, 1e-4)


class TestConv2d(unittest.TestCase):

    def test_output_shape(self):
        self.assertEqual(Conv2d(1, 32, 3, 1, 1).output_shape((1, 28, 28)), (32, 28, 28))
        self.assertEqual(Conv2d(3, 8, 5, 0, 1).output_shape((3, 32, 32)), (8, 28, 28))
        self.assertEqual(Conv2d(1, 2, 3, 1, 2).output_shape((1, 7, 7)), (2, 4, 4))

    def test_indivisible_stride(self):
        with self.assertRaises(ConfigurationError):
            Conv2d(1, 1, 3, 0, 2).output_shape((1, 6, 6))
        with self.assertRaises(ConfigurationError):
            Conv2d(1, 1, 5).output_shape((1, 3, 3))
        with self.assertRaises(ConfigurationError):
            Conv2d(2, 1, 3).output_shape((1, 8, 8))

    def test_known_values(self):
        layer = Conv2d(1, 1, 2, dtype=np.float64)
        layer.parameters["weight"][...] = 1.0
        layer.parameters["bias"][...] = 0.5
        output = layer.forward(np.ones((1, 1, 3, 3)))
        np.testing.assert_array_equal(output, np.full((1, 1, 2, 2), 4.5))

    def test_no_kernel_flip(self):
        layer = Conv2d(1, 1, 2, bias=False, dtype=np.float64)
        layer.parameters["weight"][0, 0] = [[1.0, 0.0], [0.0, 0.0]]
        x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
        np.testing.assert_array_equal(layer.forward(x)[0, 0], [[0, 1], [3, 4]])

    def test_matches_direct_summation(self):
        generator = np.random.default_rng(4)
        for channels, units, kernel, padding, stride, size in ((1, 1, 3, 0, 1, 5), (2, 3, 3, 1, 2, 5)):
            layer = Conv2d(channels, units, kernel, padding, stride, dtype=np.float64)
            layer.parameters["weight"][...] = generator.normal(size=layer.parameters["weight"].shape)
            layer.parameters["bias"][...] = generator.normal(size=units)
            x = generator.normal(size=(2, channels, size, size))
            padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
            out = (size + 2 * padding - kernel) // stride + 1
            expected = np.zeros((2, units, out, out))
            for n in range(2):
                for o in range(units):
                    for row in range(out):
                        for col in range(out):
                            total = layer.parameters["bias"][o]
                            for c in range(channels):
                                for i in range(kernel):
                                    for j in range(kernel):
                                        total += (layer.parameters["weight"][o, c, i, j]
                                                  * padded[n, c, row * stride + i, col * stride + j])
                            expected[n, o, row, col] = total
            with self.subTest(channels=channels, padding=padding, stride=stride):
                np.testing.assert_allclose(layer.forward(x), expected, atol=1e-6)

    def test_backward_before_forward(self):
        with self.assertRaises(StateError):
            Conv2d(1, 1, 3).backward(np.zeros((1, 1, 1, 1)))


class TestBatchNorm2d(unittest.TestCase):

    def test_constant_batch_normalizes_to_beta(self):
        layer = BatchNorm2d(2)
        output = layer.forward(np.full((4, 2, 3, 3), 3.0, dtype=np.float32), training=True)
        np.testing.assert_array_equal(output, np.zeros_like(output))

    def test_running_statistics(self):
        layer = BatchNorm2d(1, momentum=0.1, dtype=np.float64)
        x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        layer.forward(x, training=True)
        np.testing.assert_allclose(layer.buffers["running_mean"], [0.2])
        # biased variance of {1, 3} is 1
        np.testing.assert_allclose(layer.buffers["running_var"], [1.0])
        self.assertEqual(layer.buffers["updates"][0], 1)

    def test_evaluation_uses_running_statistics(self):
        layer = BatchNorm2d(1, momentum=1.0, dtype=np.float64)
        layer.forward(np.array([1.0, 3.0]).reshape(2, 1, 1, 1), training=True)
        output = layer.forward(np.array([2.0]).reshape(1, 1, 1, 1), training=False)
        self.assertAlmostEqual(float(output[0, 0, 0, 0]), 0.0, places=6)

    def test_evaluation_before_update(self):
        with self.assertRaises(StateError):
            BatchNorm2d(2).forward(np.zeros((1, 2, 2, 2), dtype=np.float32), training=False)

    def test_single_value_training(self):
        with self.assertRaises(StateError):
            BatchNorm2d(1).forward(np.zeros((1, 1, 1, 1), dtype=np.float32), training=True)


class TestDropout(unittest.TestCase):

    def test_evaluation_identity(self):
        x = np.random.default_rng(0).random((3, 4)).astype(np.float32)
        self.assertIs(Dropout(0.2, RngStream(0)).forward(x, training=False), x)

    def test_inverted_scaling(self):
        layer = Dropout(0.5, RngStream(1))
        output = layer.forward(np.ones(100_000, dtype=np.float32), training=True)
        self.assertAlmostEqual(float(output.mean()), 1.0, delta=0.02)
        self.assertAlmostEqual(float((output == 0).mean()), 0.5, delta=0.01)
        self.assertTrue(set(np.unique(output)) <= {0.0, 2.0})

    def test_backward_uses_mask(self):
        layer = Dropout(0.3, RngStream(2))
        x = np.ones((4, 5), dtype=np.float32)
        output = layer.forward(x, training=True)
        np.testing.assert_array_equal(layer.backward(np.ones_like(x)), output)

    def test_needs_stream(self):
        with self.assertRaises(StateError):
            Dropout(0.2).forward(np.ones((2, 2), dtype=np.float32), training=True)

    def test_probability_range(self):
        with self.assertRaises(ConfigurationError):
            Dropout(1.0)


class TestMaxPool2d(unittest.TestCase):

    def test_forward(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(MaxPool2d(2).forward(x)[0, 0], [[5, 7], [13, 15]])

    def test_ties_route_to_first_cell(self):
        layer = MaxPool2d(2)
        layer.forward(np.ones((1, 1, 2, 2)))
        np.testing.assert_array_equal(layer.backward(np.ones((1, 1, 1, 1)))[0, 0], [[1, 0], [0, 0]])

    def test_indivisible(self):
        with self.assertRaises(ConfigurationError):
            MaxPool2d(2).output_shape((1, 5, 4))


class TestOutputs(unittest.TestCase):

    def test_softmax_rows(self):
        probs = softmax(np.array([[1000.0, 1000.0, -1000.0], [0.0, 1.0, 2.0]]))
        np.testing.assert_allclose(probs.sum(axis=1), [1.0, 1.0])
        np.testing.assert_allclose(probs[0], [0.5, 0.5, 0.0])
        with self.assertRaises(DimensionError):
            softmax(np.zeros(3))

    def test_nll_loss(self):
        probs = np.full((2, 10), 0.1)
        self.assertAlmostEqual(nll_loss(probs, one_hot(np.array([1, 2]), dtype=np.float64)), math.log(10))
        zero = np.zeros((1, 10))
        zero[0, 0] = 1.0
        self.assertAlmostEqual(nll_loss(zero, one_hot(np.array([1]), dtype=np.float64)), -math.log(1e-12))
        with self.assertRaises(DimensionError):
            nll_loss(probs, np.zeros((2, 9)))

    def test_initialization_scale(self):
        for activation, gain in (("relu", 2.0), ("tanh", 1.0)):
            layer = Linear(1000, 400)
            initialize(layer, RngStream(3), activation)
            std = float(layer.parameters["weight"].std())
            with self.subTest(activation=activation):
                self.assertAlmostEqual(std, math.sqrt(gain / 1000), delta=0.02 * math.sqrt(gain / 1000))
                np.testing.assert_array_equal(layer.parameters["bias"], 0)


if __name__ == "__main__":
    unittest.main()
