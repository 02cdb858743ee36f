import os
import tempfile

import numpy as np

from pyscarf.constants import Difficulty
from pyscarf.constants import Shape
from pyscarf.data import gen_scene
from pyscarf.data import generate_dataset
from pyscarf.data import load_dataset
from pyscarf.data import shape_mask
from pyscarf.data import write_dataset
from pyscarf.exceptions import ArgumentError
from pyscarf.models.common import Config
from tests import ScarfTestCase


def side(gt):
    return gt.box[2] - gt.box[0]


class GenSceneTests(ScarfTestCase):
    def test_deterministic(self):
        first, second = gen_scene(7, Difficulty.hard), gen_scene(7, Difficulty.hard)
        self.assertArrayEqual(first.image.data, second.image.data)
        self.assertEqual(first.gts, second.gts)
        self.assertNotEqual(first.gts, gen_scene(8, Difficulty.hard).gts)

    def test_contract(self):
        for seed in range(50):
            for difficulty in Difficulty:
                sample = gen_scene(seed, difficulty)
                self.assertEqual((3, 64, 64), sample.image.dims)
                self.assertGreaterEqual(sample.image.data.min(), 0.0)
                self.assertLessEqual(sample.image.data.max(), 1.0)
                self.assertGreaterEqual(len(sample.gts), 1)
                for gt in sample.gts:
                    self.assertIn(gt.class_id, [s.value for s in Shape])
                    x1, y1, x2, y2 = gt.box
                    self.assertTrue(0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64, gt.box)

    def test_size_histogram(self):
        easy_counts, hard_counts, sides = set(), set(), {Difficulty.easy: [], Difficulty.hard: []}
        for seed in range(300):
            easy = gen_scene(seed, Difficulty.easy)
            hard = gen_scene(seed, Difficulty.hard)
            easy_counts.add(len(easy.gts))
            hard_counts.add(len(hard.gts))
            sides[Difficulty.easy] += [side(g) for g in easy.gts]
            sides[Difficulty.hard] += [side(g) for g in hard.gts]
            self.assertLessEqual(round(side(hard.gts[0])), 12)

        self.assertEqual({1, 2}, easy_counts)
        self.assertEqual({2, 3, 4}, hard_counts)
        self.assertEqual(set(range(16, 33)), set(int(round(s)) for s in sides[Difficulty.easy]))
        hard = set(int(round(s)) for s in sides[Difficulty.hard])
        self.assertEqual(set(range(6, 13)) | set(range(16, 33)), hard)

    def test_other_size(self):
        sample = gen_scene(3, Difficulty.easy, size=96)
        self.assertEqual((3, 96, 96), sample.image.dims)

    def test_to_dict(self):
        sample = gen_scene(1)
        data = sample.to_dict()
        self.assertEqual(1, data["seed"])
        self.assertEqual("easy", data["difficulty"])
        self.assertEqual([g.to_dict() for g in sample.gts], data["objects"])


class ShapeMaskTests(ScarfTestCase):
    def test_square(self):
        mask = shape_mask(Shape.square, (2.0, 2.0, 6.0, 6.0), 8, 8)
        expected = np.zeros((8, 8))
        expected[2:6, 2:6] = 1.0
        self.assertArrayEqual(expected, mask)

    def test_partial_coverage(self):
        mask = shape_mask(Shape.square, (0.5, 0.0, 2.0, 1.0), 1, 2)
        self.assertArrayEqual([[0.5, 1.0]], mask)

    def test_areas(self):
        box = (4.0, 4.0, 28.0, 28.0)
        circle = shape_mask(Shape.circle, box, 32, 32).sum()
        triangle = shape_mask(Shape.triangle, box, 32, 32).sum()
        self.assertAlmostEqual(np.pi * 144, circle, delta=10)
        self.assertAlmostEqual(288, triangle, delta=10)


class DatasetTests(ScarfTestCase):
    def test_threads_match_sequential(self):
        sequential = generate_dataset(6, seed=40, difficulty=Difficulty.hard)
        try:
            Config.instance(precision=64, workers=3)
            threaded = generate_dataset(6, seed=40, difficulty=Difficulty.hard)
        finally:
            Config.instance(precision=64, workers=1)

        self.assertEqual([s.seed for s in sequential], list(range(40, 46)))
        for a, b in zip(sequential, threaded):
            self.assertArrayEqual(a.image.data, b.image.data)
            self.assertEqual(a.gts, b.gts)

    def test_write_and_load(self):
        samples = generate_dataset(3, seed=5, difficulty=Difficulty.hard)
        with tempfile.TemporaryDirectory() as tmp:
            write_dataset(tmp, samples)
            self.assertTrue(os.path.exists(os.path.join(tmp, "scene_00002.ppm")))
            loaded = load_dataset(tmp)

        self.assertEqual(3, len(loaded))
        for original, copy in zip(samples, loaded):
            self.assertEqual(original.gts, copy.gts)
            self.assertEqual(original.seed, copy.seed)
            self.assertEqual(Difficulty.hard, copy.difficulty)
            self.assertArrayAlmostEqual(original.image.data, copy.image.data, atol=0.5 / 255 + 1e-12)

    def test_missing_folder(self):
        with self.assertRaises(ArgumentError):
            load_dataset("/nonexistent/pyscarf/scenes")
