import unittest

import numpy as np

from perturbex.functions import central_difference, check_increasing, linear_grid, one_hot, relative_error


class TestFunctions(unittest.TestCase):

    def test_one_hot(self):
        encoded = one_hot(np.array([0, 3, 9]))
        self.assertEqual(encoded.shape, (3, 10))
        np.testing.assert_array_equal(encoded.argmax(axis=1), [0, 3, 9])
        self.assertEqual(encoded.sum(), 3)

    def test_one_hot_range(self):
        with self.assertRaises(ValueError):
            one_hot(np.array([10]))

    def test_linear_grid_endpoints(self):
        grid = linear_grid(0.04, 1.0, 5)
        self.assertEqual(len(grid), 5)
        self.assertEqual(grid[0], 0.04)
        self.assertEqual(grid[-1], 1.0)
        self.assertAlmostEqual(grid[2], 0.52, places=12)

    def test_linear_grid_noise_levels(self):
        np.testing.assert_allclose(linear_grid(0.001, 0.05, 5), [0.001, 0.01325, 0.0255, 0.03775, 0.05])

    def test_check_increasing(self):
        check_increasing([1, 2, 3])
        with self.assertRaises(ValueError):
            check_increasing([1, 1, 2])

    def test_central_difference(self):
        x = np.array([1.0, -2.0, 0.5])
        gradient = central_difference(lambda: float(np.sum(x**2)), x, h=1e-5)
        np.testing.assert_allclose(gradient, 2 * x, rtol=1e-8)
        np.testing.assert_array_equal(x, [1.0, -2.0, 0.5])

    def test_relative_error(self):
        self.assertEqual(relative_error(np.ones(3), np.ones(3)), 0.0)
        self.assertAlmostEqual(relative_error(np.array([1.0]), np.array([1.1])), 0.1 / 1.1)
        with self.assertRaises(ValueError):
            relative_error(np.ones(2), np.ones(3))


if __name__ == "__main__":
    unittest.main()
