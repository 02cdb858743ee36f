import numpy as np

from pyscarf.metrics import APReport
from pyscarf.metrics import average_precision
from pyscarf.metrics import eval_map
from pyscarf.models.detector import Detection
from pyscarf.models.detector import GroundTruth
from tests import ScarfTestCase

A = (0.0, 0.0, 10.0, 10.0)
B = (20.0, 20.0, 30.0, 30.0)
NOWHERE = (50.0, 50.0, 60.0, 60.0)


class AveragePrecisionTests(ScarfTestCase):
    def test_envelope(self):
        recall = np.array([0.5, 0.5, 1.0])
        precision = np.array([1.0, 0.5, 2 / 3])
        self.assertAlmostEqual(5 / 6, average_precision(recall, precision))

    def test_empty(self):
        self.assertEqual(0.0, average_precision(np.array([]), np.array([])))


class EvalMapTests(ScarfTestCase):
    def setUp(self):
        super().setUp()
        self.gts = [[GroundTruth(1, A), GroundTruth(1, B)]]
        self.dets = [
            [
                Detection(1, 0.9, A),
                Detection(1, 0.8, NOWHERE),
                Detection(1, 0.7, B),
            ]
        ]

    def test_single_detection(self):
        report = eval_map([[Detection(2, 0.3, A)]], [[GroundTruth(2, A)]])
        self.assertEqual({2: 1.0}, report.per_class)
        self.assertEqual(1.0, report.map)

    def test_no_detections(self):
        report = eval_map([[]], [[GroundTruth(1, A)]])
        self.assertEqual(0.0, report.map)

    def test_three_detections_two_gts(self):
        report = eval_map(self.dets, self.gts)
        self.assertAlmostEqual(5 / 6, report.per_class[1])
        self.assertEqual(1, report.images)

    def test_score_rescaling(self):
        rescaled = [[Detection(d.class_id, d.score ** 3 / 10, d.box) for d in self.dets[0]]]
        self.assertEqual(eval_map(self.dets, self.gts).map, eval_map(rescaled, self.gts).map)

    def test_duplicate_true_positive(self):
        base = eval_map(self.dets, self.gts).map
        for score in (0.95, 0.85, 0.75, 0.1):
            duplicated = [self.dets[0] + [Detection(1, score, A)]]
            self.assertLessEqual(eval_map(duplicated, self.gts).map, base)

    def test_iou_threshold(self):
        shifted = [[Detection(1, 0.9, (4.0, 0.0, 14.0, 10.0))]]
        gts = [[GroundTruth(1, A)]]
        self.assertEqual(0.0, eval_map(shifted, gts).map)
        self.assertEqual(1.0, eval_map(shifted, gts, iou_thr=0.4).map)

    def test_detection_in_other_image(self):
        dets = [[], [Detection(1, 0.9, A)]]
        gts = [[GroundTruth(1, A)], []]
        self.assertEqual(0.0, eval_map(dets, gts).map)

    def test_classes_without_ground_truth(self):
        dets = [[Detection(1, 0.9, A), Detection(3, 0.9, B)]]
        gts = [[GroundTruth(1, A), GroundTruth(2, B)]]
        report = eval_map(dets, gts, classes=[1, 2, 3])
        self.assertEqual({1: 1.0, 2: 0.0}, report.per_class)
        self.assertEqual(0.5, report.map)

    def test_range(self):
        rng = np.random.default_rng(0)
        dets, gts = [], []
        for _ in range(5):
            corners = rng.uniform(0, 40, size=(4, 2))
            boxes = np.concatenate([corners, corners + 10], axis=1)
            gts.append([GroundTruth(int(rng.integers(1, 4)), b) for b in boxes])
            dets.append(
                [Detection(int(rng.integers(1, 4)), float(rng.uniform()), b + rng.uniform(-3, 3, 4)) for b in boxes]
            )
        report = eval_map(dets, gts)
        self.assertGreaterEqual(report.map, 0.0)
        self.assertLessEqual(report.map, 1.0)

    def test_length_mismatch(self):
        with self.assertRaises(ValueError):
            eval_map([[]], [])

    def test_to_dict(self):
        report = APReport({2: 0.5, 1: 1.0}, 0.75, 0.5, 3)
        expected = {"per_class": {"1": 1.0, "2": 0.5}, "map": 0.75, "iou_thr": 0.5, "images": 3}
        self.assertEqual(expected, report.to_dict())
