import json
import os
from typing import Callable
from typing import Sequence
from unittest import TestCase

import numpy as np

from pyscarf import tensor as T
from pyscarf.models.common import Config

Config.instance(precision=64, workers=1)

where_am_i = os.path.dirname(os.path.realpath(__file__))
fixtures_dir = os.path.join(where_am_i, "fixtures")

slow = os.getenv("PYSCARF_SLOW")

GRAD_EPS = 1e-5
GRAD_TOL = 1e-4


def relative_error(a: float, b: float, floor: float = 1e-4) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def project(out: T.Tensor, seed: int = 99) -> T.Tensor:
    """Scalar loss sum(out * R) with a fixed random R, so every output
    element carries a distinct weight."""
    weights = np.random.default_rng(seed).uniform(-1, 1, size=out.dims)
    return T.reduce_sum(T.hadamard(out, T.Tensor(weights)))


class ScarfTestCase(TestCase):
    def setUp(self):
        self.maxDiff = None
        Config.instance(precision=64, workers=1)
        super().setUp()

    @staticmethod
    def load_fixture(file_name):
        path = f"{fixtures_dir}/{file_name}_expected.json"
        try:
            with open(path) as f:
                return json.load(f)
        except FileNotFoundError:
            return None

    def assertFixtureEqual(self, file_name, actual):
        expected = self.load_fixture(file_name)
        if expected is None:
            path = f"{fixtures_dir}/{file_name}_expected.json"
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, "w") as f:
                json.dump(actual, f, indent=4, sort_keys=True)
                f.write("\n")
            return self.assertFixtureEqual(file_name, actual)

        self.assertDictEqual(expected, actual)

    def assertArrayEqual(self, expected, actual):
        np.testing.assert_array_equal(np.asarray(actual), np.asarray(expected))

    def assertArrayAlmostEqual(self, expected, actual, atol=1e-9):
        np.testing.assert_allclose(np.asarray(actual), np.asarray(expected), rtol=0, atol=atol)

    def assertGradients(
        self,
        function: Callable[..., T.Tensor],
        arrays: Sequence[np.ndarray],
        samples: int = 8,
        seed: int = 0,
    ):
        """
        Compare tape gradients of a scalar function against central
        differences on a random sample of coordinates of every input.
        """
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        inputs = [T.Tensor(a, requires_grad=True) for a in arrays]
        with T.Tape():
            grads = T.backward(function(*inputs))

        rng = np.random.default_rng(seed)
        for index, array in enumerate(arrays):
            analytic = grads[inputs[index]]
            self.assertEqual(array.shape, analytic.shape)
            picks = rng.choice(array.size, size=min(samples, array.size), replace=False)
            for flat in picks:
                coord = np.unravel_index(flat, array.shape)
                numeric = self._central_difference(function, arrays, index, coord)
                error = relative_error(float(analytic[coord]), numeric)
                self.assertLess(
                    error, GRAD_TOL, f"input {index} at {coord}: {analytic[coord]} vs {numeric}"
                )

    @staticmethod
    def _central_difference(function, arrays, index, coord) -> float:
        values = []
        for sign in (1.0, -1.0):
            shifted = arrays[index].copy()
            shifted[coord] += sign * GRAD_EPS
            tensors = [
                T.Tensor(shifted if i == index else a) for i, a in enumerate(arrays)
            ]
            values.append(function(*tensors).item())
        return (values[0] - values[1]) / (2 * GRAD_EPS)
