"""
Three-stage training protocol.

Stage 0 pretrains the detector on real scenes, stage 1 trains the generator,
both discriminators and the detector jointly, and stage 2 retrains the
detector on real scenes mixed with synthesized ones. `run_ablation` repeats
the protocol with components switched off.
"""
import dataclasses
import json
import logging
import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import polars as pl
from tqdm import tqdm

from src import report
from src import tensorcore as tc
from src.config import AblationSwitches, TrainConfig, WorldParams, config_to_dict, save_config
from src.errors import DatasetError, GraphError, TrainingDivergedError
from src.evalharness import evaluate, fid_eval, select_threshold
from src.losses import (
    Batch,
    ReferenceStats,
    detection_loss,
    feature_stats,
    frechet_distance,
    generator_adv_loss,
    generator_total_loss,
    hard_example_loss,
    image_disc_loss,
    patch_disc_loss,
    patch_skips,
)
from src.nets import (
    DetectorNet,
    DiscriminatorNet,
    FeatureExtractor,
    GeneratorNet,
    Network,
    save_networks,
)
from src.synthworld import (
    SceneDataset,
    SceneSample,
    crop_batch_patches,
    placement_warnings,
    render_scene,
    sample_mask_for,
    sample_seeds,
    stack_images,
    write_dataset,
)
from src.tensorcore import Adam, Tensor

logger = logging.getLogger(__name__)

SEED_TAGS = {
    "detector": 1,
    "generator": 2,
    "d_image": 3,
    "d_patch": 4,
    "pretrain": 10,
    "joint": 11,
    "augment": 12,
    "retrain": 13,
}

JOINT_COLUMNS = ["step", "l_id", "l_pd", "l_g", "l_h", "l_fid", "l_df", "l_dr", "l_psi"]

ABLATION_CONFIGS = {
    "E2": AblationSwitches(use_generator=False, use_fid=False, use_hard_loss=False),
    "E3": AblationSwitches(use_generator=True, use_fid=False, use_hard_loss=False),
    "E4": AblationSwitches(use_generator=True, use_fid=True, use_hard_loss=False),
    "E5": AblationSwitches(use_generator=True, use_fid=True, use_hard_loss=True),
}


def derive_seed(seed: int, tag: str) -> int:
    """Independent 63-bit seed for one consumer of the run seed."""
    state = np.random.SeedSequence([int(seed), SEED_TAGS[tag]]).generate_state(1, dtype=np.uint64)
    return int(state[0]) & ((1 << 63) - 1)


# --- records -------------------------------------------------------------

@dataclass
class RunRecord:
    run_id: str
    stage: str
    config: TrainConfig
    out_dir: Optional[str] = None
    loss_csv: Optional[str] = None
    checkpoints: Dict[str, str] = field(default_factory=dict)
    metrics: Dict[str, Any] = field(default_factory=dict)
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    wall_clock: float = 0.0
    networks: Dict[str, Network] = field(default_factory=dict, repr=False)
    losses: Optional[pd.DataFrame] = field(default=None, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "stage": self.stage,
            "config": config_to_dict(self.config),
            "loss_csv": self.loss_csv,
            "checkpoints": dict(self.checkpoints),
            "metrics": self.metrics,
            "diagnostics": self.diagnostics,
            "parameters": {name: net.n_parameters() for name, net in self.networks.items()},
            "wall_clock": self.wall_clock,
        }

    def save(self) -> Optional[str]:
        if not self.out_dir:
            return None
        path = os.path.join(self.out_dir, "record.json")
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path


class LossLog:
    """Per-step loss rows, written as CSV."""

    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        self.rows: List[List[float]] = []

    def append(self, **values) -> None:
        self.rows.append([values.get(c, np.nan) for c in self.columns])
        logger.debug("step %s: %s", values.get("step"),
                     ", ".join(f"{k}={v:.5f}" for k, v in values.items() if k != "step"))

    def frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows, columns=self.columns)
        return frame.astype({"step": int}) if len(frame) else frame

    def write(self, path: str) -> str:
        self.frame().to_csv(path, index=False)
        return path


def prepare_out_dir(out_dir: Optional[str], config: TrainConfig) -> None:
    if not out_dir:
        return
    os.makedirs(out_dir, exist_ok=True)
    save_config(config, os.path.join(out_dir, "config.yml"))


def _finish(record: RunRecord, log: LossLog, csv_name: str,
            checkpoints: Dict[str, Tuple[Dict[str, Network], Dict[str, Adam]]]) -> RunRecord:
    record.losses = log.frame()
    if record.out_dir:
        record.loss_csv = log.write(os.path.join(record.out_dir, csv_name))
        for filename, (networks, optimizers) in checkpoints.items():
            path = os.path.join(record.out_dir, filename)
            save_networks(path, networks, optimizers)
            record.checkpoints[filename.split(".")[0]] = path
        record.save()
    return record


# --- batches -------------------------------------------------------------

class BatchPrefetcher:
    """
    Build training batches ahead of the trainer on worker threads.

    Batch k is built from the k-th per-step seed, so the sequence the trainer
    sees does not depend on the number of workers. At most `depth` batches
    are in flight.
    """

    def __init__(self, build: Callable[[int], Any], n_steps: int, seed: int, workers: int = 2, depth: int = 4):
        self.build = build
        self.n_steps = n_steps
        self.seed = seed
        self.workers = workers
        self.depth = max(1, depth)

    def __len__(self) -> int:
        return self.n_steps

    def __iter__(self) -> Iterator[Any]:
        seeds = sample_seeds(self.seed, self.n_steps)
        if self.workers == 0:
            for s in seeds:
                yield self.build(s)
            return
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            upcoming = iter(seeds)
            pending = deque(executor.submit(self.build, s) for _, s in zip(range(self.depth), upcoming))
            while pending:
                batch = pending.popleft().result()
                nxt = next(upcoming, None)
                if nxt is not None:
                    pending.append(executor.submit(self.build, nxt))
                yield batch


@dataclass
class DetectorBatch:
    images: Tensor
    annotations: List[list]


def _draw(pool: Sequence[SceneSample], k: int, rng: np.random.Generator) -> List[SceneSample]:
    if k == 0:
        return []
    idx = rng.choice(len(pool), size=k, replace=len(pool) < k)
    return [pool[i] for i in idx]


def detector_batch(real: Sequence[SceneSample], synthesized: Sequence[SceneSample], batch_size: int,
                   real_fraction: float, seed: int) -> DetectorBatch:
    """Real-only batch, or a real/synthesized mix when synthesized samples exist."""
    rng = np.random.default_rng(seed)
    if synthesized:
        n_real = min(batch_size, max(1, int(round(batch_size * real_fraction))))
        chosen = _draw(real, n_real, rng) + _draw(synthesized, batch_size - n_real, rng)
    else:
        chosen = _draw(real, batch_size, rng)
    return DetectorBatch(stack_images(chosen), [s.annotations for s in chosen])


def joint_batch(clean: Sequence[SceneSample], defected: Sequence[SceneSample], batch_size: int,
                world: WorldParams, seed: int) -> Batch:
    rng = np.random.default_rng(seed)
    clean_draw = _draw(clean, batch_size, rng)
    defected_draw = _draw(defected, batch_size, rng)
    mask_seeds = rng.integers(0, 2 ** 62, size=batch_size)
    masks = [sample_mask_for(s, world, int(m)) for s, m in zip(clean_draw, mask_seeds)]
    return Batch(clean=clean_draw, defected=defected_draw, masks=masks)


# --- builders ------------------------------------------------------------

def build_detector(config: TrainConfig) -> DetectorNet:
    nets = dataclasses.replace(config.nets, grid_size=config.world.image_size // 8)
    return DetectorNet(nets, config.world.image_size, seed=derive_seed(config.seed, "detector"))


def clone_detector(config: TrainConfig, source: Optional[DetectorNet]) -> DetectorNet:
    detector = build_detector(config)
    if source is not None:
        detector.load_state_dict(source.state_dict())
    return detector


def build_generator(config: TrainConfig) -> GeneratorNet:
    return GeneratorNet(config.nets, seed=derive_seed(config.seed, "generator"))


def _adam(config: TrainConfig, params: Dict[str, Tensor]) -> Adam:
    return Adam(params, lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps,
                weight_decay=config.weight_decay)


def _check_finite(step: int, component: str, value: float) -> float:
    if not np.isfinite(value):
        raise TrainingDivergedError(step, component, value)
    return value


def _update(loss_fn: Callable[[], Tensor], optimizer: Adam, step: int, component: str) -> float:
    """Record a loss, check it, backpropagate and step the optimizer."""
    optimizer.zero_grad()
    with tc.record() as graph:
        loss = loss_fn()
    value = _check_finite(step, component, loss.item())
    if loss.node is None:
        return value
    graph.backward(loss)
    optimizer.step()
    return value


def _require(pool: Sequence[SceneSample], what: str) -> None:
    if not pool:
        raise DatasetError(f"training split has no {what} samples")


def reference_stats(extractor: FeatureExtractor, samples: Sequence[SceneSample], batch_size: int = 64) -> ReferenceStats:
    if len(samples) < 2:
        raise DatasetError("reference statistics need at least 2 defected samples")
    rows = [extractor(stack_images(samples[i:i + batch_size])).data for i in range(0, len(samples), batch_size)]
    return ReferenceStats.from_features(np.concatenate(rows, axis=0))


# --- stages --------------------------------------------------------------

def _train_detector(config: TrainConfig, detector: DetectorNet, real: Sequence[SceneSample],
                    synthesized: Sequence[SceneSample], steps: int, stage: str,
                    out_dir: Optional[str]) -> RunRecord:
    _require(real, "defected")
    prepare_out_dir(out_dir, config)
    optimizer = _adam(config, detector.parameters())
    log = LossLog(["step", "l_det"])
    build = partial(detector_batch, list(real), list(synthesized), config.batch_size, config.real_fraction)
    prefetcher = BatchPrefetcher(build, steps, derive_seed(config.seed, stage), config.workers, config.prefetch_depth)
    size = config.world.image_size
    started = time.perf_counter()
    for step, batch in enumerate(tqdm(prefetcher, desc=stage, disable=None)):
        value = _update(lambda: detection_loss(detector.detect(batch.images), batch.annotations, size),
                        optimizer, step, "l_det")
        log.append(step=step, l_det=value)
    record = RunRecord(run_id=f"{stage}-seed{config.seed}", stage=stage, config=config, out_dir=out_dir,
                       wall_clock=time.perf_counter() - started, networks={"detector": detector})
    logger.info("%s: %d steps in %.1fs", stage, steps, record.wall_clock)
    return _finish(record, log, f"{stage}_losses.csv", {"detector.ckpt": ({"detector": detector}, {"detector": optimizer})})


def pretrain_detector(config: TrainConfig, dataset: SceneDataset, out_dir: Optional[str] = None) -> RunRecord:
    """
    Train a fresh detector with the real-image detection loss only.

    Args:
        config (TrainConfig): Run configuration; uses steps.pretrain.
        dataset (SceneDataset): Real dataset; its defected train split is used.
        out_dir (str): Optional directory for losses, checkpoint and record.

    Returns:
        RunRecord: With the trained detector under networks["detector"].
    """
    detector = build_detector(config)
    return _train_detector(config, detector, dataset.defected("train"), [], config.steps.pretrain,
                           "pretrain", out_dir)


def train_joint(config: TrainConfig, dataset: SceneDataset, detector_init: Optional[DetectorNet] = None,
                out_dir: Optional[str] = None) -> RunRecord:
    """
    Jointly train the generator, both discriminators and the detector.

    Each step: generate fakes, update the image and patch discriminators on
    detached fakes, update the generator on L_g (+ w_fid L_fid, + w_h L_h)
    with every other network frozen, then update the detector on L_df + L_dr.
    With use_generator off only the detector update runs.
    """
    switches = config.ablation
    real = dataset.defected("train")
    clean = dataset.clean("train")
    _require(real, "defected")
    if switches.use_generator:
        _require(clean, "clean")
    prepare_out_dir(out_dir, config)

    size = config.world.image_size
    patch = config.world.patch_size
    detector = clone_detector(config, detector_init)
    generator = build_generator(config)
    d_image = DiscriminatorNet(config.nets, seed=derive_seed(config.seed, "d_image"))
    d_patch = DiscriminatorNet(config.nets, seed=derive_seed(config.seed, "d_patch"))
    extractor = FeatureExtractor(config.nets)
    opt_g = _adam(config, generator.parameters())
    opt_di = _adam(config, d_image.parameters())
    opt_dp = _adam(config, d_patch.parameters())
    opt_d = _adam(config, detector.parameters())

    reference = None
    if switches.use_generator and switches.use_fid:
        reference = reference_stats(extractor, real[:config.reference_size])
    extractor_digest = tc.parameter_digest(extractor.parameters())
    skips_before = patch_skips.count
    shortfall_before = placement_warnings.count

    if switches.use_generator:
        build = partial(joint_batch, clean, real, config.batch_size, config.world)
    else:
        build = partial(detector_batch, real, [], config.batch_size, config.real_fraction)
    prefetcher = BatchPrefetcher(build, config.steps.joint, derive_seed(config.seed, "joint"),
                                 config.workers, config.prefetch_depth)
    log = LossLog(JOINT_COLUMNS)
    hard_loss_deltas: List[Tuple[float, float]] = []
    started = time.perf_counter()

    for step, batch in enumerate(tqdm(prefetcher, desc="joint", disable=None)):
        if not switches.use_generator:
            value = _update(lambda: detection_loss(detector.detect(batch.images), batch.annotations, size),
                            opt_d, step, "l_dr")
            log.append(step=step, l_dr=value)
            continue

        clean_images = stack_images(batch.clean)
        masks = Tensor(np.stack([m.channels.data for m in batch.masks]), copy=False)
        real_images = stack_images(batch.defected)
        real_ann = [s.annotations for s in batch.defected]
        fake_ann = [list(m.boxes) for m in batch.masks]
        real_boxes = [s.boxes for s in batch.defected]
        fake_boxes = [[box for box, _ in m.boxes] for m in batch.masks]
        real_patches = crop_batch_patches(real_images, real_boxes, patch)

        # (a) fakes for the discriminator updates, no graph
        fakes = generator(clean_images, masks)
        fake_patches = crop_batch_patches(fakes, fake_boxes, patch)

        # (b) discriminators
        l_id = _update(lambda: image_disc_loss(d_image(real_images), d_image(fakes)), opt_di, step, "l_id")
        l_pd = _update(lambda: patch_disc_loss(d_patch(real_patches), d_patch(fake_patches)), opt_dp, step, "l_pd")

        # (c) generator, every other network frozen
        frozen_digest = tc.parameter_digest({**detector.parameters(), **_prefixed(d_image, d_patch)})
        before = {name: p.data.copy() for name, p in generator.parameters().items()}
        opt_g.zero_grad()
        terms: Dict[str, Optional[Tensor]] = {"l_h": None, "l_fid": None, "l_df": None, "l_dr": None}
        with tc.frozen(detector.parameters(), d_image.parameters(), d_patch.parameters()):
            with tc.record() as graph:
                live = generator(clean_images, masks)
                l_g = generator_adv_loss(d_image(live), d_patch(crop_batch_patches(live, fake_boxes, patch)))
                if reference is not None:
                    terms["l_fid"] = frechet_distance(reference, feature_stats(extractor(live)),
                                                      config.nets.newton_schulz_iters)
                if switches.use_hard_loss:
                    terms["l_df"] = detection_loss(detector.detect(live), fake_ann, size)
                    terms["l_dr"] = detection_loss(detector.detect(real_images), real_ann, size)
                    terms["l_h"] = hard_example_loss(terms["l_df"], terms["l_dr"])
                l_psi = generator_total_loss(l_g, terms["l_h"], terms["l_fid"], config.weights)
        values = {"l_g": l_g.item(), "l_psi": l_psi.item()}
        values.update({k: t.item() for k, t in terms.items() if t is not None})
        for name, value in values.items():
            _check_finite(step, name, value)
        graph.backward(l_psi)
        opt_g.step()
        if tc.parameter_digest({**detector.parameters(), **_prefixed(d_image, d_patch)}) != frozen_digest:
            raise GraphError(f"step {step}: generator update changed a frozen network")
        fakes_detached = live.detach()

        if switches.use_hard_loss:
            after = detection_loss(detector.detect(generator(clean_images, masks)), fake_ann, size).item()
            norm = float(np.sqrt(sum(np.sum((p.data - before[n]) ** 2) for n, p in generator.parameters().items())))
            hard_loss_deltas.append((after - values["l_df"], norm))

        # (d) detector on fakes and reals
        generator_digest = tc.parameter_digest(generator.parameters())
        detection_terms = {}

        def detector_loss():
            detection_terms["l_df"] = detection_loss(detector.detect(fakes_detached), fake_ann, size)
            detection_terms["l_dr"] = detection_loss(detector.detect(real_images), real_ann, size)
            return detection_terms["l_df"] + detection_terms["l_dr"]

        _update(detector_loss, opt_d, step, "l_det")
        if tc.parameter_digest(generator.parameters()) != generator_digest:
            raise GraphError(f"step {step}: detector update changed the generator")
        values["l_df"] = _check_finite(step, "l_df", detection_terms["l_df"].item())
        values["l_dr"] = _check_finite(step, "l_dr", detection_terms["l_dr"].item())
        log.append(step=step, l_id=l_id, l_pd=l_pd, **values)

    if tc.parameter_digest(extractor.parameters()) != extractor_digest:
        raise GraphError("feature extractor weights changed during training")
    record = RunRecord(run_id=f"joint-seed{config.seed}", stage="joint", config=config, out_dir=out_dir,
                       wall_clock=time.perf_counter() - started,
                       networks={"generator": generator, "d_image": d_image, "d_patch": d_patch, "detector": detector})
    record.diagnostics = {
        "patch_skips": patch_skips.count - skips_before,
        "placement_shortfall": placement_warnings.count - shortfall_before,
        **hard_loss_diagnostic(hard_loss_deltas),
    }
    logger.info("joint: %d steps in %.1fs", config.steps.joint, record.wall_clock)
    checkpoints = {
        "generator.ckpt": ({"generator": generator}, {"generator": opt_g}),
        "discriminators.ckpt": ({"d_image": d_image, "d_patch": d_patch}, {"d_image": opt_di, "d_patch": opt_dp}),
        "detector.ckpt": ({"detector": detector}, {"detector": opt_d}),
    }
    return _finish(record, log, "joint_losses.csv", checkpoints)


def _prefixed(d_image: DiscriminatorNet, d_patch: DiscriminatorNet) -> Dict[str, Tensor]:
    out = {f"d_image.{k}": v for k, v in d_image.parameters().items()}
    out.update({f"d_patch.{k}": v for k, v in d_patch.parameters().items()})
    return out


def hard_loss_diagnostic(hard_loss_deltas: Sequence[Tuple[float, float]]) -> Dict[str, Optional[float]]:
    """
    Summarize how L_df on a fixed batch moved after each generator update.

    Returns the mean change, the fraction of steps where it rose and the
    Pearson correlation between the change and the generator update norm.
    """
    if not hard_loss_deltas:
        return {}
    frame = pd.DataFrame(hard_loss_deltas, columns=["delta", "update_norm"])
    corr = frame["delta"].corr(frame["update_norm"]) if len(frame) > 1 else np.nan
    return {
        "hard_loss_mean_delta": float(frame["delta"].mean()),
        "hard_loss_rise_fraction": float((frame["delta"] > 0).mean()),
        "hard_loss_update_correlation": None if pd.isna(corr) else float(corr),
    }


@dataclass
class AugmentationResult:
    dataset: SceneDataset
    fid: Optional[float] = None
    manifest: Optional[str] = None


def synthesize_augmentation(config: TrainConfig, generator: GeneratorNet, n_images: int, seed: int,
                            out_dir: Optional[str] = None,
                            reference: Optional[Sequence[SceneSample]] = None) -> AugmentationResult:
    """
    Render clean scenes, sample masks and generate defected images from them.

    Annotations are the mask boxes. When `reference` real defected samples are
    given, the evaluation-mode FID against them is computed and logged.
    """
    world = config.world
    scene_seeds = sample_seeds(seed, n_images)
    mask_seeds = sample_seeds(derive_seed(seed, "augment"), n_images)
    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as executor:
        scenes = list(executor.map(lambda s: render_scene(s, False, world), scene_seeds))
    masks = [sample_mask_for(scene, world, m) for scene, m in zip(scenes, mask_seeds)]
    samples: List[SceneSample] = []
    for start in range(0, n_images, config.batch_size):
        chunk = slice(start, start + config.batch_size)
        images = stack_images(scenes[chunk])
        channels = Tensor(np.stack([m.channels.data for m in masks[chunk]]), copy=False)
        fakes = generator(images, channels).data
        for offset, (scene, mask) in enumerate(zip(scenes[chunk], masks[chunk])):
            index = start + offset
            samples.append(SceneSample(
                image=Tensor(fakes[offset], copy=False),
                annotations=list(mask.boxes),
                drivable=scene.drivable,
                seed=scene.seed,
                sample_id=f"syn{index:06d}",
                split="train",
                provenance="synthesized",
                shortfall=mask.shortfall,
            ))
    dataset = SceneDataset(root=out_dir or "", params=world, samples=samples)
    result = AugmentationResult(dataset=dataset)
    if out_dir:
        result.manifest = write_dataset(out_dir, samples, world, config.workers)
    dim = config.nets.feature_dim
    if reference is not None:
        k = min(config.fid_images, len(samples), len(reference))
        if k >= dim + 1:
            result.fid = fid_eval([s.image.data for s in samples[:k]], [s.image.data for s in reference[:k]],
                                  FeatureExtractor(config.nets))
            logger.info("Augmentation FID vs real defected (%d vs %d images): %.4f", k, k, result.fid)
        else:
            logger.info("Skipping augmentation FID: %d images, need %d", k, dim + 1)
    logger.info("Synthesized %d augmentation images", len(samples))
    return result


def retrain_detector(config: TrainConfig, dataset: SceneDataset, augmentation: SceneDataset,
                     detector_init: Optional[DetectorNet], out_dir: Optional[str] = None) -> RunRecord:
    """
    Retrain the detector on real and synthesized scenes mixed per batch.

    Raises:
        DatasetError: If the two datasets disagree on classes or image size.
    """
    if augmentation.class_ids != dataset.class_ids:
        raise DatasetError(f"class sets differ: {dataset.class_ids} vs {augmentation.class_ids}")
    if augmentation.params.image_size != dataset.params.image_size:
        raise DatasetError("real and synthesized images differ in size")
    detector = clone_detector(config, detector_init)
    return _train_detector(config, detector, dataset.defected("train"), augmentation.samples,
                           config.steps.retrain, "retrain", out_dir)


def evaluate_detector(config: TrainConfig, detector: DetectorNet, dataset: SceneDataset,
                      split: str = "test", out_dir: Optional[str] = None) -> Tuple[float, Dict]:
    """Select the threshold on the val split, then score `split`."""
    val = dataset.split("val")
    threshold = select_threshold(detector, val, config.iou_threshold)
    out_path = os.path.join(out_dir, "metrics.json") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    metrics = evaluate(detector, dataset.split(split), threshold, split, config.iou_threshold, out_path)
    return threshold, metrics


# --- ablation ------------------------------------------------------------

def summarize_ablation(rows: Sequence[Dict[str, Any]]) -> pl.DataFrame:
    frame = pl.DataFrame(list(rows))
    return (
        frame.group_by("configuration", maintain_order=True)
        .agg(
            pl.col("test_f1").mean().alias("f1_mean"),
            pl.col("test_f1").std().fill_null(0.0).alias("f1_std"),
            pl.col("fid").cast(pl.Float64).mean().alias("fid_mean"),
            pl.len().alias("n_seeds"),
        )
        .sort("configuration")
    )


def _sub(out_dir: Optional[str], *parts: str) -> Optional[str]:
    return os.path.join(out_dir, *parts) if out_dir else None


def run_ablation(config: TrainConfig, dataset: SceneDataset, seeds: Sequence[int],
                 out_dir: Optional[str] = None) -> pd.DataFrame:
    """
    Run E2 (no generator), E3 (+generator), E4 (+FID) and E5 (+hard loss) per seed.

    The pretrained detector is shared by the four configurations of a seed.

    Returns:
        pd.DataFrame: One row per (configuration, seed).
    """
    prepare_out_dir(out_dir, config)
    rows: List[Dict[str, Any]] = []
    for seed in seeds:
        seed_config = dataclasses.replace(config, seed=int(seed))
        pretrained = pretrain_detector(seed_config, dataset, _sub(out_dir, f"seed{seed}", "pretrain"))
        base = pretrained.networks["detector"]
        generators: Dict[str, GeneratorNet] = {}
        for name, switches in ABLATION_CONFIGS.items():
            run_config = dataclasses.replace(seed_config, ablation=switches)
            run_dir = _sub(out_dir, f"seed{seed}", name)
            n_params = {"detector": base.n_parameters(), "generator": 0, "discriminators": 0}
            if switches.use_generator:
                joint = train_joint(run_config, dataset, base, _sub(run_dir, "joint"))
                generator = joint.networks["generator"]
                generators[name] = generator
                augmentation = synthesize_augmentation(run_config, generator, config.augment_images,
                                                       derive_seed(seed, "augment"),
                                                       reference=dataset.defected("train"))
                init = joint.networks["detector"] if config.retrain_from_joint else base
                n_params["generator"] = generator.n_parameters()
                n_params["discriminators"] = (joint.networks["d_image"].n_parameters()
                                              + joint.networks["d_patch"].n_parameters())
            else:
                augmentation = AugmentationResult(SceneDataset(root="", params=dataset.params, samples=[]))
                init = base
            retrained = retrain_detector(run_config, dataset, augmentation.dataset, init, _sub(run_dir, "retrain"))
            threshold, metrics = evaluate_detector(run_config, retrained.networks["detector"], dataset,
                                                   out_dir=run_dir)
            rows.append({
                "configuration": name,
                "seed": int(seed),
                "use_generator": switches.use_generator,
                "use_fid": switches.use_fid,
                "use_hard_loss": switches.use_hard_loss,
                "threshold": threshold,
                "test_precision": metrics["precision"],
                "test_recall": metrics["recall"],
                "test_f1": metrics["f1"],
                "fid": augmentation.fid,
                "n_params_detector": n_params["detector"],
                "n_params_generator": n_params["generator"],
                "n_params_discriminators": n_params["discriminators"],
            })
            logger.info("%s seed %s: test F1 %.4f", name, seed, metrics["f1"])
        if out_dir and seed == seeds[0] and {"E3", "E4"} <= set(generators):
            report.synthesis_preview(config, {"L_g only": generators["E3"], "with FID": generators["E4"]},
                                     os.path.join(out_dir, "synthesis_preview.png"), seed=int(seed))

    frame = pd.DataFrame(rows)
    if out_dir:
        frame.to_csv(os.path.join(out_dir, "ablation.csv"), index=False)
        summarize_ablation(rows).write_csv(os.path.join(out_dir, "ablation_summary.csv"))
        logger.info("Ablation tables written to %s", out_dir)
    return frame
