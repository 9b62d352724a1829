import json
import os
import tempfile
import unittest
from collections import Counter

import numpy as np

from src import tensorcore as tc
from src.config import WorldParams
from src.errors import DatasetError, GeometryError
from src.synthworld import (
    NUM_CLASSES,
    BoundingBox,
    DefectClass,
    box_in_polygon,
    box_pixel_mask,
    crop_batch_patches,
    crop_patches,
    load_dataset,
    make_dataset,
    placement_warnings,
    polygon_pixel_mask,
    render_scene,
    sample_mask,
    sample_mask_for,
    sample_seeds,
    split_for_seed,
)
from src.tensorcore import Tensor

WORLD = WorldParams()


class TestScenes(unittest.TestCase):

    def test_same_seed_same_scene(self):
        a = render_scene(1234, True, WORLD)
        b = render_scene(1234, True, WORLD)
        self.assertEqual(a.image.data.tobytes(), b.image.data.tobytes())
        self.assertEqual(a.annotations, b.annotations)
        self.assertEqual(a.drivable, b.drivable)
        c = render_scene(1235, True, WORLD)
        self.assertNotEqual(a.image.data.tobytes(), c.image.data.tobytes())

    def test_clean_scene_has_no_annotations(self):
        scene = render_scene(7, False, WORLD)
        self.assertEqual(scene.annotations, [])
        self.assertTrue(scene.is_clean)
        self.assertEqual(scene.image.shape, (3, 64, 64))
        self.assertGreaterEqual(scene.image.data.min(), 0.0)
        self.assertLessEqual(scene.image.data.max(), 1.0)

    def test_defects_stay_on_the_road(self):
        for seed in sample_seeds(3, 50):
            scene = render_scene(seed, True, WORLD)
            boxes = scene.boxes
            lo, hi = WORLD.count_range
            self.assertLessEqual(len(boxes), hi)
            self.assertGreaterEqual(len(boxes) + scene.shortfall, lo)
            for i, box in enumerate(boxes):
                self.assertTrue(box.within(64, 64))
                self.assertTrue(box_in_polygon(box, scene.drivable))
                for other in boxes[i + 1:]:
                    self.assertEqual(box.intersection_area(other), 0.0)

    def test_defected_scene_always_has_defects(self):
        with self.assertRaises(DatasetError):
            render_scene(5, True, WorldParams(count_range=(0, 0)))
        cramped = WorldParams(image_size=32, size_range=(15.0, 16.0), aspect_range=(1.0, 1.0), max_attempts=1)
        for seed in sample_seeds(4, 40):
            try:
                scene = render_scene(seed, True, cramped)
            except DatasetError:
                continue
            self.assertTrue(scene.annotations)
            self.assertFalse(scene.is_clean)

    def _darker_fraction(self, n):
        darker = total = 0
        for seed in sample_seeds(11, n):
            scene = render_scene(seed, True, WORLD)
            if not scene.annotations:
                continue
            gray = scene.image.data.mean(axis=0)
            road = polygon_pixel_mask(scene.drivable, 64, 64)
            covered = np.zeros_like(road)
            for box in scene.boxes:
                covered |= box_pixel_mask(box, 64, 64)
            background = gray[road & ~covered].mean()
            for box in scene.boxes:
                total += 1
                darker += gray[box_pixel_mask(box, 64, 64)].mean() < background
        return darker / total

    def test_defects_are_darker_than_road(self):
        self.assertGreaterEqual(self._darker_fraction(100), 0.95)

    @unittest.skipUnless(os.environ.get("DEFECTFORGE_ACCEPTANCE") == "1", "long renderer statistics")
    def test_defects_are_darker_than_road_at_scale(self):
        self.assertGreaterEqual(self._darker_fraction(1000), 0.99)


class TestMasks(unittest.TestCase):

    def setUp(self):
        self.road = ((16.0, 20.0), (48.0, 20.0), (64.0, 64.0), (0.0, 64.0))

    def test_empty_count_range(self):
        mask = sample_mask(self.road, (0, 0), (8.0, 12.0), (0.5, 2.0), seed=1)
        self.assertEqual(mask.boxes, [])
        self.assertEqual(mask.channels.shape, (NUM_CLASSES, 64, 64))
        self.assertEqual(mask.channels.data.sum(), 0.0)

    def test_channels_mark_box_pixels(self):
        mask = sample_mask(self.road, (2, 3), (8.0, 12.0), (0.5, 2.0), seed=5)
        for box, cls in mask.boxes:
            pixels = box_pixel_mask(box, 64, 64)
            self.assertTrue(np.all(mask.channels.data[int(cls)][pixels] == 1.0))
        self.assertTrue(np.all(mask.channels.data.sum(axis=0) <= 1.0))

    def test_classes_are_balanced(self):
        counts = Counter()
        for seed in range(600):
            mask = sample_mask(self.road, (1, 4), (6.0, 10.0), (0.5, 2.0), seed=seed)
            counts.update(int(cls) for _, cls in mask.boxes)
        total = sum(counts.values())
        for cls in DefectClass:
            self.assertAlmostEqual(counts[int(cls)] / total, 1.0 / NUM_CLASSES, delta=0.05)

    def test_shortfall_is_counted(self):
        tiny = ((0.0, 0.0), (12.0, 0.0), (12.0, 12.0), (0.0, 12.0))
        before = placement_warnings.count
        mask = sample_mask(tiny, (3, 3), (8.0, 10.0), (1.0, 1.0), seed=2, max_attempts=20)
        self.assertLessEqual(len(mask.boxes), 1)
        self.assertEqual(len(mask.boxes) + mask.shortfall, 3)
        self.assertEqual(placement_warnings.count - before, mask.shortfall)

    @unittest.skipUnless(os.environ.get("DEFECTFORGE_ACCEPTANCE") == "1", "long mask sampler statistics")
    def test_default_world_masks_at_scale(self):
        counts = Counter()
        for seed in sample_seeds(21, 10000):
            scene = render_scene(seed, False, WORLD)
            mask = sample_mask_for(scene, WORLD, seed + 1)
            for i, (box, cls) in enumerate(mask.boxes):
                self.assertTrue(box_in_polygon(box, scene.drivable))
                for other, _ in mask.boxes[i + 1:]:
                    self.assertEqual(box.intersection_area(other), 0.0)
                counts[int(cls)] += 1
        total = sum(counts.values())
        for cls in DefectClass:
            self.assertAlmostEqual(counts[int(cls)] / total, 0.25, delta=0.04)

    def test_degenerate_polygon(self):
        with self.assertRaises(GeometryError):
            sample_mask(((0.0, 0.0), (10.0, 10.0), (20.0, 20.0)), (1, 1), (4.0, 6.0), (1.0, 1.0), seed=0)

    def test_mask_for_scene_is_deterministic(self):
        scene = render_scene(99, False, WORLD)
        a = sample_mask_for(scene, WORLD, 17)
        b = sample_mask_for(scene, WORLD, 17)
        self.assertEqual(a.boxes, b.boxes)
        np.testing.assert_array_equal(a.channels.data, b.channels.data)


class TestPatches(unittest.TestCase):

    def test_aligned_crop_is_exact(self):
        image = Tensor(np.random.default_rng(0).uniform(size=(3, 32, 32)))
        patch = crop_patches(image, [BoundingBox(4.0, 8.0, 20.0, 24.0)], 16)
        self.assertEqual(patch.shape, (1, 3, 16, 16))
        np.testing.assert_allclose(patch.data[0], image.data[:, 8:24, 4:20], atol=1e-12)

    def test_constant_image(self):
        image = Tensor(np.full((3, 32, 32), 0.37))
        patches = crop_patches(image, [BoundingBox(1.5, 2.2, 9.9, 30.0), BoundingBox(0.0, 0.0, 32.0, 32.0)], 16)
        np.testing.assert_allclose(patches.data, 0.37, atol=1e-12)

    def test_no_boxes(self):
        patches = crop_batch_patches(Tensor(np.zeros((2, 3, 32, 32))), [[], []], 16)
        self.assertEqual(patches.shape, (0, 3, 16, 16))

    def test_box_outside_image(self):
        with self.assertRaises(GeometryError):
            crop_patches(Tensor(np.zeros((3, 32, 32))), [BoundingBox(20.0, 20.0, 40.0, 30.0)], 16)

    def test_crop_gradient(self):
        image = Tensor(np.random.default_rng(1).uniform(size=(3, 24, 24)))
        boxes = [BoundingBox(2.3, 3.1, 14.8, 11.0), BoundingBox(10.0, 12.5, 23.0, 23.5)]
        self.assertLess(tc.check_gradients(lambda x: crop_patches(x, boxes, 8), [image]), 1e-5)


class TestDatasets(unittest.TestCase):

    def test_empty_dataset(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = make_dataset(tmp, 0, 0, seed=0)
            with open(path) as f:
                manifest = json.load(f)
            self.assertEqual(manifest["samples"], [])
            self.assertEqual(load_dataset(tmp).samples, [])

    def test_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            make_dataset(tmp, 3, 4, seed=5, workers=2)
            dataset = load_dataset(tmp)
        self.assertEqual(len(dataset.samples), 7)
        self.assertEqual(len(dataset.clean()), 3)
        self.assertEqual(dataset.params, WORLD)
        seeds = sample_seeds(5, 7)
        for index, sample in enumerate(dataset.samples):
            original = render_scene(seeds[index], index >= 3, WORLD)
            self.assertEqual(sample.sample_id, f"{index:06d}")
            self.assertEqual(sample.split, split_for_seed(seeds[index]))
            self.assertEqual(sample.annotations, original.annotations)
            np.testing.assert_allclose(sample.image.data, original.image.data, atol=0.5 / 255 + 1e-12)

    def test_worker_count_does_not_change_output(self):
        with tempfile.TemporaryDirectory() as tmp:
            one, three = os.path.join(tmp, "one"), os.path.join(tmp, "three")
            make_dataset(one, 2, 3, seed=9, workers=1)
            make_dataset(three, 2, 3, seed=9, workers=3)
            for name in ["manifest.json"] + [os.path.join("images", f) for f in sorted(os.listdir(os.path.join(one, "images")))]:
                with open(os.path.join(one, name), "rb") as a, open(os.path.join(three, name), "rb") as b:
                    self.assertEqual(a.read(), b.read(), name)

    def test_split_proportions(self):
        splits = Counter(split_for_seed(s) for s in sample_seeds(0, 5000))
        self.assertAlmostEqual(splits["train"] / 5000, 0.8, delta=0.03)
        self.assertAlmostEqual(splits["val"] / 5000, 0.1, delta=0.02)
        self.assertAlmostEqual(splits["test"] / 5000, 0.1, delta=0.02)

    @unittest.skipUnless(os.environ.get("DEFECTFORGE_ACCEPTANCE") == "1", "long split statistics")
    def test_split_proportions_at_scale(self):
        splits = Counter(split_for_seed(s) for s in sample_seeds(1, 10000))
        self.assertAlmostEqual(splits["train"] / 10000, 0.8, delta=0.01)
        self.assertAlmostEqual(splits["val"] / 10000, 0.1, delta=0.01)
        self.assertAlmostEqual(splits["test"] / 10000, 0.1, delta=0.01)

    def test_unreadable_manifest(self):
        with tempfile.TemporaryDirectory() as tmp:
            for text in ('{"samples": []}', '{"world": {', '{"world": {"image_size": 8}, "samples": []}'):
                with open(os.path.join(tmp, "manifest.json"), "w") as f:
                    f.write(text)
                with self.assertRaises(DatasetError):
                    load_dataset(tmp)


if __name__ == '__main__':
    unittest.main()
