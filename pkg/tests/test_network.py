import unittest

import numpy as np

from perturbex.data import Dataset, compute_stats, standardize
from perturbex.errors import ConfigurationError, DimensionError
from perturbex.network import (
    LayerSpec,
    NetworkConfig,
    build_network,
    build_transfer_model,
    format_layers,
    parse_layers,
    reference_config,
)
from perturbex.tensor import RngStream
from tests.data import TINY_LAYERS, tiny_config, toy_batch


def standardized_inputs(n: int = 4) -> tuple:
    batch = toy_batch(n)
    return standardize(batch, compute_stats(batch)).pixels, batch.labels


class TestLayerGrammar(unittest.TestCase):

    def test_parse(self):
        specs = parse_layers("conv:32:3:1:1, pool, flatten, dense:256, linear:10")
        self.assertEqual(specs[0], LayerSpec("conv", 32, 3, 1, 1))
        self.assertEqual([spec.kind for spec in specs], ["conv", "pool", "flatten", "dense", "linear"])
        self.assertEqual(specs[3].units, 256)

    def test_format_round_trip(self):
        text = "conv:32:3:1:1, pool, flatten, dense:256, linear:10"
        self.assertEqual(format_layers(parse_layers(text)), text)

    def test_short_conv_form(self):
        self.assertEqual(parse_layers("conv:8:5")[0], LayerSpec("conv", 8, 5, 0, 1))

    def test_invalid_tokens(self):
        for text in ("conv:32", "pooling", "dense:x", "linear"):
            with self.subTest(text=text):
                with self.assertRaises(ConfigurationError):
                    parse_layers(text)


class TestNetworkConfig(unittest.TestCase):

    def test_final_layer(self):
        with self.assertRaises(ConfigurationError):
            NetworkConfig("mnist", "conv:4:3, flatten, linear:5")
        with self.assertRaises(ConfigurationError):
            NetworkConfig("mnist", "flatten, linear:10, linear:10")

    def test_activation(self):
        with self.assertRaises(ConfigurationError):
            tiny_config(activation="sigmoid")

    def test_dict_round_trip(self):
        config = tiny_config(use_dropout=False, activation="tanh")
        self.assertEqual(NetworkConfig.from_dict(config.to_dict()), config)

    def test_reference_defaults(self):
        config = reference_config("mnist_ref")
        self.assertIs(config.dataset, Dataset.MNIST)
        self.assertTrue(config.use_batchnorm and config.use_dropout and config.use_pooling)
        self.assertEqual(config.activation, "relu")
        self.assertEqual(reference_config("cifar_ref").dataset, Dataset.CIFAR10)
        with self.assertRaises(ValueError):
            reference_config("resnet")


class TestBuildNetwork(unittest.TestCase):

    def test_mnist_reference_shapes(self):
        network = build_network(reference_config("mnist_ref"), RngStream(0))
        self.assertIn((64, 7, 7), network.shapes)
        self.assertIn((3136,), network.shapes)
        self.assertEqual(network.shapes[-1], (10,))

    def test_cifar_reference_shapes(self):
        network = build_network(reference_config("cifar_ref"), RngStream(0))
        self.assertEqual(network.count("conv"), 6)
        self.assertIn((128, 4, 4), network.shapes)
        self.assertEqual(network.shapes[-1], (10,))

    def test_toggles(self):
        for batchnorm in (True, False):
            for dropout in (True, False):
                network = build_network(tiny_config(use_batchnorm=batchnorm, use_dropout=dropout), RngStream(0))
                with self.subTest(batchnorm=batchnorm, dropout=dropout):
                    self.assertEqual(network.count("batchnorm") > 0, batchnorm)
                    self.assertEqual(network.count("dropout") > 0, dropout)
                    # convolution bias is dropped when a batch normalization follows
                    self.assertEqual("layer0.bias" in network.named_parameters(), not batchnorm)
        self.assertEqual(build_network(tiny_config(activation="tanh"), RngStream(0)).activations, {"tanh"})

    def test_pooling_toggle(self):
        network = build_network(tiny_config(use_pooling=False), RngStream(0))
        self.assertEqual(network.count("pool"), 0)
        self.assertIn((4 * 28 * 28,), network.shapes)

    def test_geometry_errors(self):
        with self.assertRaises(ConfigurationError):
            build_network(tiny_config(layers="conv:4:3:0:2, flatten, linear:10"), RngStream(0))
        with self.assertRaises(ConfigurationError):
            build_network(tiny_config(layers="flatten, conv:4:3, linear:10"), RngStream(0))
        with self.assertRaises(ConfigurationError):
            build_network(tiny_config(layers="conv:4:3, linear:10"), RngStream(0))

    def test_deterministic_initialization(self):
        first = build_network(tiny_config(), RngStream(5)).named_parameters()
        second = build_network(tiny_config(), RngStream(5)).named_parameters()
        third = build_network(tiny_config(), RngStream(6)).named_parameters()
        for name in first:
            np.testing.assert_array_equal(first[name], second[name])
        self.assertFalse(np.array_equal(first["layer0.weight"], third["layer0.weight"]))

    def test_forward_shapes(self):
        x, _ = standardized_inputs(3)
        network = build_network(tiny_config(), RngStream(0)).train()
        self.assertEqual(network.forward(x).shape, (3, 10))
        with self.assertRaises(DimensionError):
            network.forward(np.zeros((3, 3, 28, 28), dtype=np.float32))

    def test_predict_matches_forward(self):
        x, labels = standardized_inputs(10)
        network = build_network(tiny_config(use_dropout=False), RngStream(0)).train()
        network.compute_gradients(x, labels)
        logits = network.predict(x, chunk_size=3)
        self.assertTrue(network.training)
        with network.evaluating():
            np.testing.assert_allclose(logits, network.forward(x), rtol=1e-5, atol=1e-6)

    def test_load_state(self):
        source = build_network(tiny_config(), RngStream(1))
        target = build_network(tiny_config(), RngStream(2))
        target.load_state(source.named_parameters(), source.named_buffers())
        for name, value in source.named_parameters().items():
            np.testing.assert_array_equal(target.named_parameters()[name], value)
        with self.assertRaises(DimensionError):
            target.load_state({}, {})


class TestTransferSurgery(unittest.TestCase):

    def setUp(self):
        self.pretrained = build_network(reference_config("mnist_ref"), RngStream(0))
        self.pretrained.stats = compute_stats(toy_batch(8))

    def test_parameter_delta(self):
        model = build_transfer_model(self.pretrained, "mnist", RngStream(1))
        flatten_dim = 3136
        # the old linear(10) is removed, dense(256) and a new linear(10) are appended
        expected = 256 * (flatten_dim + 1) + 10 * (256 + 1) - 10 * (flatten_dim + 1)
        self.assertEqual(model.parameter_count() - self.pretrained.parameter_count(), expected)
        self.assertEqual(model.config.layers[-2:], parse_layers("dense:256, linear:10"))

    def test_backbone_retained(self):
        model = build_transfer_model(self.pretrained, Dataset.MNIST, RngStream(1))
        before = self.pretrained.named_parameters()
        after = model.named_parameters()
        for index in range(model.backbone_size):
            for name in model.layers[index].parameters:
                key = f"layer{index}.{name}"
                np.testing.assert_array_equal(after[key], before[key])
        self.assertIs(model.stats, self.pretrained.stats)

    def test_output_shape(self):
        model = build_transfer_model(self.pretrained, "mnist", RngStream(1)).train()
        x, _ = standardized_inputs(2)
        self.assertEqual(model.forward(x).shape, (2, 10))

    def test_cifar_head(self):
        pretrained = build_network(NetworkConfig("cifar10", "conv:4:3:1:1, pool, flatten, linear:10"), RngStream(0))
        model = build_transfer_model(pretrained, "cifar10", RngStream(1))
        self.assertEqual(format_layers(model.config.layers[-3:]), "dense:256, dense:512, linear:10")

    def test_dataset_mismatch(self):
        with self.assertRaises(ConfigurationError):
            build_transfer_model(self.pretrained, "cifar10", RngStream(1))

    def test_frozen_backbone_receives_no_updates(self):
        pretrained = build_network(tiny_config(), RngStream(0)).train()
        x, labels = standardized_inputs(4)
        pretrained.compute_gradients(x, labels)
        model = build_transfer_model(pretrained, "mnist", RngStream(1))
        model.freeze_backbone()
        model.train()
        buffers = {name: value.copy() for name, value in model.named_buffers().items()}
        _, _, gradients = model.compute_gradients(x, labels)
        backbone = {f"layer{i}.{name}" for i in range(model.backbone_size) for name in model.layers[i].parameters}
        self.assertTrue(backbone)
        self.assertFalse(backbone & set(gradients))
        for name, value in model.named_buffers().items():
            np.testing.assert_array_equal(value, buffers[name])
        model.unfreeze()
        self.assertTrue(backbone <= set(model.trainable_parameters()))
        self.assertEqual(TINY_LAYERS.split(", ")[:-1], [str(spec) for spec in model.config.layers[:3]])


if __name__ == "__main__":
    unittest.main()
