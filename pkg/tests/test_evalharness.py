import json
import os
import tempfile
import unittest

import numpy as np

from src.config import NetParams
from src.errors import DatasetError, NumericsError
from src.evalharness import (
    THRESHOLDS,
    Detection,
    MatchResult,
    evaluate,
    f1_score,
    feature_moments,
    frechet_distance_numpy,
    fid_eval,
    iou,
    match_detections,
    match_detections_optimal,
    select_threshold,
    sweep_thresholds,
)
from src.losses import feature_stats, frechet_distance
from src.nets import DetectorNet, FeatureExtractor
from src.synthworld import BoundingBox, DefectClass, SceneSample
from src.tensorcore import Tensor


def _sample(annotations, index=0):
    return SceneSample(image=Tensor(np.zeros((3, 64, 64))), annotations=annotations,
                       drivable=((0.0, 0.0), (64.0, 0.0), (64.0, 64.0), (0.0, 64.0)), seed=index,
                       sample_id=f"{index:06d}", split="val")


class ScriptedDetector:
    """Returns fixed detections; the grid carries the image index only."""

    def __init__(self, per_image):
        self.per_image = per_image

    def detect(self, images):
        return Tensor(np.arange(images.shape[0], dtype=float).reshape(-1, 1, 1, 1))

    def decode(self, grid, conf_threshold):
        data = grid.data if isinstance(grid, Tensor) else grid
        return [[d for d in self.per_image[int(i)] if d.confidence >= conf_threshold] for i in data.reshape(-1)]


class TestIoU(unittest.TestCase):

    def test_values(self):
        a = BoundingBox(0, 0, 2, 2)
        self.assertEqual(iou(a, a), 1.0)
        self.assertAlmostEqual(iou(a, BoundingBox(1, 1, 3, 3)), 1 / 7)
        self.assertEqual(iou(a, BoundingBox(5, 5, 6, 6)), 0.0)

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x = np.sort(rng.uniform(0, 20, size=(2, 2)), axis=1)
            y = np.sort(rng.uniform(0, 20, size=(2, 2)), axis=1)
            a = BoundingBox(x[0, 0], x[1, 0], x[0, 1], x[1, 1])
            b = BoundingBox(y[0, 0], y[1, 0], y[0, 1], y[1, 1])
            self.assertEqual(iou(a, b), iou(b, a))


class TestMatching(unittest.TestCase):

    def test_exact_detections(self):
        gts = [(BoundingBox(0, 0, 10, 10), DefectClass(0)), (BoundingBox(20, 20, 30, 34), DefectClass(3))]
        dets = [Detection(box, int(cls), 1.0) for box, cls in gts]
        m = match_detections(dets, gts)
        self.assertEqual((m.tp, m.fp, m.fn), (2, 0, 0))

    def test_no_detections(self):
        gts = [(BoundingBox(0, 0, 10, 10), DefectClass(0))] * 3
        self.assertEqual(match_detections([], gts).fn, 3)

    def test_class_must_agree(self):
        gts = [(BoundingBox(0, 0, 10, 10), DefectClass(0))]
        m = match_detections([Detection(BoundingBox(0, 0, 10, 10), 1, 0.9)], gts)
        self.assertEqual((m.tp, m.fp, m.fn), (0, 1, 1))

    def test_greedy_never_beats_optimal(self):
        rng = np.random.default_rng(1)
        diverged = 0
        for _ in range(100):
            gts = []
            for _ in range(rng.integers(0, 5)):
                x, y = rng.uniform(0, 40, size=2)
                gts.append((BoundingBox(x, y, x + rng.uniform(4, 12), y + rng.uniform(4, 12)),
                            DefectClass(int(rng.integers(2)))))
            dets = []
            for _ in range(rng.integers(0, 6)):
                x, y = rng.uniform(0, 40, size=2)
                dets.append(Detection(BoundingBox(x, y, x + rng.uniform(4, 12), y + rng.uniform(4, 12)),
                                      int(rng.integers(2)), float(rng.uniform(0.05, 1.0))))
            greedy = match_detections(dets, gts)
            optimal = match_detections_optimal(dets, gts)
            self.assertLessEqual(greedy.tp, optimal.tp)
            for m in (greedy, optimal):
                self.assertEqual(m.tp + m.fn, len(gts))
                self.assertEqual(m.tp + m.fp, len(dets))
            diverged += greedy.tp != optimal.tp
        self.assertLess(diverged, 100)

    def test_greedy_can_be_pessimistic(self):
        gts = [(BoundingBox(0, 0, 10, 10), DefectClass(0)), (BoundingBox(4, 0, 14, 10), DefectClass(0))]
        dets = [Detection(BoundingBox(4, 0, 14, 10), 0, 0.9), Detection(BoundingBox(0, 0, 10, 10), 0, 0.8)]
        self.assertEqual(match_detections(dets, gts).tp, 2)
        blocking = [Detection(BoundingBox(1, 0, 11, 10), 0, 0.9), Detection(BoundingBox(0, 0, 8, 10), 0, 0.8)]
        self.assertEqual(match_detections(blocking, gts).tp, 1)
        self.assertEqual(match_detections_optimal(blocking, gts).tp, 2)

    def test_confidence_ties_keep_index_order(self):
        gts = [(BoundingBox(0, 0, 10, 10), DefectClass(0))]
        dets = [Detection(BoundingBox(0, 0, 10, 9), 0, 0.5), Detection(BoundingBox(0, 0, 10, 10), 0, 0.5)]
        self.assertEqual(match_detections(dets, gts).pairs, [(0, 0)])

    def test_confidence_range(self):
        with self.assertRaises(NumericsError):
            Detection(BoundingBox(0, 0, 1, 1), 0, 1.5)


class TestF1(unittest.TestCase):

    def test_values(self):
        p, r, f1 = f1_score(MatchResult(tp=3, fp=1, fn=2))
        self.assertAlmostEqual(p, 0.75)
        self.assertAlmostEqual(r, 0.6)
        self.assertAlmostEqual(f1, 2 / 3)
        self.assertEqual(f1_score(MatchResult()), (0.0, 0.0, 0.0))

    def test_random_counts(self):
        rng = np.random.default_rng(2)
        for tp, fp, fn in rng.integers(1, 50, size=(50, 3)):
            p, r, f1 = f1_score(MatchResult(int(tp), int(fp), int(fn)))
            self.assertAlmostEqual(f1, 2 * tp / (2 * tp + fp + fn), delta=1e-12)
            self.assertTrue(0.0 <= f1 <= 1.0)


class TestThresholdSelection(unittest.TestCase):

    def test_silent_detector_picks_highest(self):
        samples = [_sample([(BoundingBox(0, 0, 8, 8), DefectClass(1))])]
        self.assertEqual(select_threshold(ScriptedDetector([[]]), samples), 0.95)

    def test_constructed_peak(self):
        box = BoundingBox(10, 10, 20, 20)
        samples = [_sample([(box, DefectClass(2))], 0), _sample([], 1)]
        per_image = [
            [Detection(box, 2, 0.42)],
            [Detection(BoundingBox(30, 30, 40, 40), 0, 0.37), Detection(BoundingBox(40, 40, 50, 50), 1, 0.2)],
        ]
        detector = ScriptedDetector(per_image)
        self.assertEqual(select_threshold(detector, samples), 0.40)
        curve = dict(sweep_thresholds(detector, samples))
        self.assertEqual(len(curve), len(THRESHOLDS))
        self.assertTrue(all(curve[0.40] >= f1 for f1 in curve.values()))

    def test_monotone_true_positives(self):
        detector = DetectorNet(seed=3)
        detector.head.kernel.data = np.random.default_rng(4).standard_normal(detector.head.kernel.shape) * 0.5
        samples = [_sample([(BoundingBox(8, 8, 24, 24), DefectClass(0))], i) for i in range(2)]
        grids = detector.detect(Tensor(np.random.default_rng(5).uniform(size=(2, 3, 64, 64)))).data
        previous = None
        for t in THRESHOLDS:
            total = MatchResult()
            for dets, s in zip(detector.decode(grids, t), samples):
                total = total + match_detections(dets, s.annotations)
            if previous is not None:
                self.assertLessEqual(total.tp, previous.tp)
                self.assertGreaterEqual(total.fn, previous.fn)
            previous = total

    def test_empty_split(self):
        with self.assertRaises(DatasetError):
            select_threshold(ScriptedDetector([]), [])


class TestEvaluate(unittest.TestCase):

    def test_metrics_schema(self):
        box = BoundingBox(10, 10, 20, 20)
        samples = [_sample([(box, DefectClass(2)), (BoundingBox(30, 30, 44, 40), DefectClass(0))], 0)]
        detector = ScriptedDetector([[Detection(box, 2, 0.9), Detection(BoundingBox(50, 50, 60, 60), 1, 0.8)]])
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "metrics.json")
            metrics = evaluate(detector, samples, 0.5, "test", out_path=path)
            with open(path) as f:
                written = json.load(f)
        self.assertEqual(written, metrics)
        self.assertEqual(set(metrics), {"split", "threshold", "precision", "recall", "f1", "per_class",
                                        "n_images", "n_gt", "n_det"})
        self.assertEqual((metrics["n_images"], metrics["n_gt"], metrics["n_det"]), (1, 2, 2))
        self.assertAlmostEqual(metrics["f1"], 0.5)
        per_class = {row["class_id"]: row["f1"] for row in metrics["per_class"]}
        self.assertEqual(per_class, {0: 0.0, 1: 0.0, 2: 1.0, 3: 0.0})

    def test_empty_split(self):
        with self.assertRaises(DatasetError):
            evaluate(ScriptedDetector([]), [], 0.5)


class TestEvaluationFid(unittest.TestCase):

    def setUp(self):
        self.extractor = FeatureExtractor(NetParams(extractor_channels=(4, 4), feature_dim=4))
        rng = np.random.default_rng(6)
        self.a = rng.uniform(size=(12, 3, 16, 16))
        self.b = np.clip(rng.uniform(size=(12, 3, 16, 16)) * 0.6 + 0.3, 0, 1)

    def test_identical_sets(self):
        self.assertLess(fid_eval(self.a, self.a, self.extractor), 1e-6)

    def test_too_few_images(self):
        with self.assertRaises(DatasetError):
            fid_eval(self.a[:4], self.b, self.extractor)

    def test_matches_differentiable_path(self):
        fa = self.extractor(Tensor(self.a)).data
        fb = self.extractor(Tensor(self.b)).data
        exact = frechet_distance_numpy(*feature_moments(fa), *feature_moments(fb))
        loss = frechet_distance(feature_stats(Tensor(fa)), feature_stats(Tensor(fb))).item()
        self.assertGreater(exact, 0.0)
        self.assertAlmostEqual(loss / exact, 1.0, delta=1e-4)
        self.assertEqual(fid_eval(self.a, self.b, self.extractor), round(exact, 4))


if __name__ == '__main__':
    unittest.main()
