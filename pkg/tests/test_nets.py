import os
import tempfile
import unittest

import numpy as np

from src import pipeline
from src import tensorcore as tc
from src.config import NetParams, TrainConfig, WorldParams
from src.errors import CheckpointError, ConfigError, NumericsError, ShapeError
from src.evalharness import Detection
from src.losses import assign_cells, encode_targets
from src.nets import (
    GRID_CHANNELS,
    DetectorNet,
    DiscriminatorNet,
    FeatureExtractor,
    GeneratorNet,
    decode_detections,
    discriminate_image,
    discriminate_patches,
    extract_features,
    generate,
    load_networks,
    non_max_suppression,
    save_networks,
)
from src.synthworld import (
    NUM_CLASSES,
    BoundingBox,
    DefectClass,
    box_pixel_mask,
    load_dataset,
    make_dataset,
    mask_channels,
    render_scene,
    sample_mask,
    sample_mask_for,
)
from src.tensorcore import Adam, Tensor

ROAD = ((16.0, 20.0), (48.0, 20.0), (64.0, 64.0), (0.0, 64.0))


def _images(n, size=64, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(0.05, 0.95, size=(n, 3, size, size)))


class TestDiscriminator(unittest.TestCase):

    def test_untrained_scores_are_half(self):
        d = DiscriminatorNet()
        np.testing.assert_allclose(discriminate_image(d, _images(3)).data, 0.5)
        np.testing.assert_allclose(discriminate_patches(d, _images(2, size=16)).data, 0.5)

    def test_identical_images_identical_scores(self):
        d = DiscriminatorNet(seed=3)
        d.layers[-1].kernel.data = np.random.default_rng(4).standard_normal(d.layers[-1].kernel.shape)
        image = _images(1, seed=5).data
        scores = d(Tensor(np.concatenate([image, image, image]))).data
        np.testing.assert_allclose(scores, scores[0], rtol=1e-12)

    def test_no_patches(self):
        scores = discriminate_patches(DiscriminatorNet(), Tensor(np.zeros((0, 3, 16, 16))))
        self.assertEqual(scores.shape, (0,))

    def test_wrong_channels(self):
        with self.assertRaises(ShapeError):
            DiscriminatorNet()(Tensor(np.zeros((1, 4, 16, 16))))

    def test_input_gradient(self):
        d = DiscriminatorNet(NetParams(discriminator_channels=(4, 4, 4)), seed=6)
        d.layers[-1].kernel.data = np.random.default_rng(7).standard_normal(d.layers[-1].kernel.shape)
        self.assertLess(tc.check_gradients(d, [_images(1, size=16, seed=8)]), 1e-5)


class TestGenerator(unittest.TestCase):

    def test_starts_as_identity(self):
        g = GeneratorNet()
        scene = render_scene(21, False, WorldParams())
        mask = sample_mask_for(scene, WorldParams(), 22)
        out = generate(g, scene.image, mask)
        self.assertEqual(out.shape, (3, 64, 64))
        expected = np.clip(scene.image.data, 1e-3, 1 - 1e-3)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_batch_output_in_range(self):
        g = GeneratorNet(seed=1)
        g.decoder[-1].kernel.data = np.random.default_rng(2).standard_normal(g.decoder[-1].kernel.shape)
        masks = Tensor(np.stack([sample_mask(ROAD, (1, 3), (8.0, 14.0), (0.5, 2.0), seed=s).channels.data
                                 for s in range(2)]))
        out = generate(g, _images(2), masks)
        self.assertEqual(out.shape, (2, 3, 64, 64))
        self.assertGreaterEqual(out.data.min(), 0.0)
        self.assertLessEqual(out.data.max(), 1.0)

    def test_mask_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            generate(GeneratorNet(), _images(1), Tensor(np.zeros((1, NUM_CLASSES, 32, 32))))

    def test_zero_output_layer_still_learns(self):
        g = GeneratorNet(NetParams(generator_channels=(4, 4, 4)), seed=3)
        masks = Tensor(np.zeros((1, NUM_CLASSES, 16, 16)))
        with tc.record() as graph:
            loss = tc.mean(g(_images(1, size=16), masks))
        graph.backward(loss)
        self.assertIsNotNone(g.decoder[-1].kernel.grad)
        self.assertGreater(np.abs(g.decoder[-1].kernel.grad).sum(), 0.0)


class TestDetector(unittest.TestCase):

    def test_grid_shape(self):
        grid = DetectorNet().detect(_images(2))
        self.assertEqual(grid.shape, (2, 8, 8, GRID_CHANNELS))

    def test_grid_size_must_match_image(self):
        with self.assertRaises(ConfigError):
            DetectorNet(NetParams(grid_size=8), image_size=96)

    def test_threshold_one_yields_nothing(self):
        detections = DetectorNet().predict(_images(2), 1.0)
        self.assertEqual(detections, [[], []])

    def test_threshold_out_of_range(self):
        with self.assertRaises(NumericsError):
            decode_detections(np.zeros((1, 8, 8, GRID_CHANNELS)), 1.5, 64)

    def test_hand_built_grid(self):
        grid = np.zeros((1, 8, 8, GRID_CHANNELS))
        grid[..., 0] = -10.0
        grid[0, 3, 3, 0] = 10.0
        grid[0, 3, 3, 1 + 2] = 5.0
        grid[0, 3, 3, 5:9] = [0.5, 0.5, np.log(2.0), np.log(2.0)]
        detections = decode_detections(grid, 0.5, 64)
        self.assertEqual(len(detections[0]), 1)
        det = detections[0][0]
        self.assertEqual(det.class_id, 2)
        for got, want in zip(det.box.as_tuple(), (20.0, 20.0, 36.0, 36.0)):
            self.assertAlmostEqual(got, want, delta=0.5)

    def test_encode_decode_round_trip(self):
        for seed in range(100):
            boxes = sample_mask(ROAD, (1, 4), (6.0, 20.0), (0.5, 2.0), seed=seed).boxes
            objectness, classes, offsets = encode_targets([boxes], 8, 64)
            grid = np.zeros((1, 8, 8, GRID_CHANNELS))
            grid[..., 0] = np.where(objectness > 0, 10.0, -10.0)
            for gy, gx in zip(*np.nonzero(classes[0] >= 0)):
                grid[0, gy, gx, 1 + classes[0, gy, gx]] = 10.0
            grid[..., 5:9] = offsets
            detections = decode_detections(grid, 0.5, 64)[0]
            owners = assign_cells(boxes, 8, 64)
            self.assertEqual(len(detections), len(owners))
            for box, cls in owners.values():
                match = min(detections, key=lambda d: np.hypot(d.box.center[0] - box.center[0],
                                                               d.box.center[1] - box.center[1]))
                self.assertEqual(match.class_id, int(cls))
                self.assertLess(abs(match.box.center[0] - box.center[0]), 8.0)
                self.assertLess(abs(match.box.center[1] - box.center[1]), 8.0)
                self.assertAlmostEqual(match.box.width / box.width, 1.0, delta=0.05)
                self.assertAlmostEqual(match.box.height / box.height, 1.0, delta=0.05)

    def test_non_max_suppression(self):
        strong = Detection(BoundingBox(0, 0, 10, 10), 0, 0.9)
        weak = Detection(BoundingBox(1, 1, 11, 11), 1, 0.6)
        apart = Detection(BoundingBox(30, 30, 40, 40), 0, 0.3)
        self.assertEqual(non_max_suppression([weak, apart, strong]), [strong, apart])


class TestFeatureExtractor(unittest.TestCase):

    def test_identical_images_identical_rows(self):
        image = _images(1, seed=9).data
        feats = extract_features(FeatureExtractor(), Tensor(np.concatenate([image, image])))
        self.assertEqual(feats.shape, (2, 16))
        np.testing.assert_allclose(feats.data[0], feats.data[1], rtol=1e-12)

    def test_weights_are_seeded_and_frozen(self):
        a, b = FeatureExtractor(), FeatureExtractor()
        self.assertEqual(tc.parameter_digest(a.parameters()), tc.parameter_digest(b.parameters()))
        self.assertTrue(all(not p.requires_grad for p in a.parameters().values()))

    def test_input_gradient(self):
        fx = FeatureExtractor(NetParams(extractor_channels=(4, 4), feature_dim=4))
        self.assertLess(tc.check_gradients(fx, [_images(1, size=16, seed=10)]), 1e-5)


class TestNetworkCheckpoints(unittest.TestCase):

    def test_round_trip_with_optimizer(self):
        g = GeneratorNet(NetParams(generator_channels=(4, 4, 4)), seed=11)
        opt = Adam(g.parameters())
        for p in g.parameters().values():
            p.grad = np.ones_like(p.data)
        opt.step()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "generator.ckpt")
            save_networks(path, {"generator": g}, {"generator": opt})
            restored = GeneratorNet(NetParams(generator_channels=(4, 4, 4)), seed=99)
            restored_opt = Adam(restored.parameters())
            load_networks(path, {"generator": restored}, {"generator": restored_opt})
        self.assertEqual(tc.parameter_digest(g.parameters()), tc.parameter_digest(restored.parameters()))
        self.assertEqual(restored_opt.state.step, 1)

    def test_wrong_network(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "detector.ckpt")
            save_networks(path, {"detector": DetectorNet()})
            with self.assertRaises(CheckpointError):
                load_networks(path, {"generator": GeneratorNet()})

    def test_parameter_counts(self):
        self.assertGreater(GeneratorNet().n_parameters(), DiscriminatorNet().n_parameters())
        self.assertGreater(DetectorNet().n_parameters(), 0)


@unittest.skipUnless(os.environ.get("DEFECTFORGE_ACCEPTANCE") == "1", "needs a fully trained generator")
class TestTrainedGenerator(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        config = TrainConfig()
        with tempfile.TemporaryDirectory() as tmp:
            make_dataset(tmp, config.n_clean, config.n_defected, seed=0, params=config.world)
            dataset = load_dataset(tmp)
        base = pipeline.pretrain_detector(config, dataset).networks["detector"]
        cls.generator = pipeline.train_joint(config, dataset, base).networks["generator"]
        cls.world = config.world
        cls.cases = []
        for i, sample in enumerate(dataset.clean("test")[:16]):
            mask = sample_mask_for(sample, config.world, seed=500 + i)
            if mask.boxes:
                cls.cases.append((sample, mask.boxes))

    def _generate(self, sample, boxes):
        size = self.world.image_size
        masks = Tensor(mask_channels(boxes, size, size)[None])
        return generate(self.generator, Tensor(sample.image.data[None]), masks).data[0]

    def test_box_class_changes_pixels_inside_box(self):
        self.assertTrue(self.cases)
        size = self.world.image_size
        for sample, boxes in self.cases:
            (box, cls), rest = boxes[0], boxes[1:]
            relabelled = [(box, DefectClass((int(cls) + 1) % NUM_CLASSES))] + list(rest)
            inside = box_pixel_mask(box, size, size)
            diff = np.abs(self._generate(sample, boxes) - self._generate(sample, relabelled))
            with self.subTest(sample=sample.sample_id):
                self.assertGreater(diff[:, inside].sum(), 0.0)

    def test_edits_concentrate_inside_boxes(self):
        size = self.world.image_size
        inside_diffs, outside_diffs = [], []
        for sample, boxes in self.cases:
            inside = mask_channels(boxes, size, size).any(axis=0)
            diff = np.abs(self._generate(sample, boxes) - sample.image.data)
            inside_diffs.append(diff[:, inside].mean())
            outside_diffs.append(diff[:, ~inside].mean())
        self.assertLess(np.mean(outside_diffs), 3.0 * np.mean(inside_diffs))


if __name__ == '__main__':
    unittest.main()
