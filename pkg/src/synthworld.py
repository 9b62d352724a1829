"""
Procedural road scenes with analytic ground truth.

Every output is a pure function of (seed, WorldParams): a perspective road
trapezoid (the drivable polygon), a dashed lane line, noise, and up to four
kinds of parametric defect patches whose boxes are the annotations.
"""
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import zoom

from src import tensorcore as tc
from src.config import WorldParams
from src.errors import ConfigError, DatasetError, GeometryError, WarningCounter
from src.tensorcore import Tensor

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")

Point = Tuple[float, float]
Polygon = Tuple[Point, ...]


class DefectClass(IntEnum):
    LONGITUDINAL_CRACK = 0
    TRANSVERSE_CRACK = 1
    ALLIGATOR_CRACK = 2
    POTHOLE = 3

    @property
    def label(self) -> str:
        return self.name.lower()


NUM_CLASSES = len(DefectClass)


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Point:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def corners(self) -> Tuple[Point, Point, Point, Point]:
        return ((self.x_min, self.y_min), (self.x_max, self.y_min),
                (self.x_max, self.y_max), (self.x_min, self.y_max))

    def intersection_area(self, other: "BoundingBox") -> float:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        return max(0.0, w) * max(0.0, h)

    def within(self, width: float, height: float) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


Annotation = Tuple[BoundingBox, DefectClass]


placement_warnings = WarningCounter()


@dataclass
class SceneSample:
    image: Tensor
    annotations: List[Annotation]
    drivable: Polygon
    seed: int
    sample_id: str = ""
    split: str = "train"
    provenance: str = "real"
    shortfall: int = 0

    @property
    def is_clean(self) -> bool:
        return not self.annotations

    @property
    def boxes(self) -> List[BoundingBox]:
        return [box for box, _ in self.annotations]


@dataclass
class DefectMask:
    channels: Tensor
    boxes: List[Annotation]
    shortfall: int = 0


# --- geometry ------------------------------------------------------------

def _cross(o: Point, a: Point, b: Point) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def validate_polygon(polygon: Sequence[Point]) -> None:
    if len(polygon) < 3:
        raise GeometryError(f"drivable polygon needs >= 3 vertices, got {len(polygon)}")
    area2 = 0.0
    for i in range(len(polygon)):
        x0, y0 = polygon[i]
        x1, y1 = polygon[(i + 1) % len(polygon)]
        area2 += x0 * y1 - x1 * y0
    if abs(area2) < 1e-9:
        raise GeometryError("drivable polygon is degenerate (zero area)")


def point_in_convex_polygon(point: Point, polygon: Sequence[Point]) -> bool:
    """Inclusive containment test; vertex winding may be either direction."""
    sign = 0
    n = len(polygon)
    for i in range(n):
        c = _cross(polygon[i], polygon[(i + 1) % n], point)
        if abs(c) < 1e-12:
            continue
        s = 1 if c > 0 else -1
        if sign == 0:
            sign = s
        elif s != sign:
            return False
    return True


def box_in_polygon(box: BoundingBox, polygon: Sequence[Point]) -> bool:
    return all(point_in_convex_polygon(c, polygon) for c in box.corners())


def polygon_pixel_mask(polygon: Sequence[Point], height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    inside_pos = np.ones((height, width), dtype=bool)
    inside_neg = np.ones((height, width), dtype=bool)
    n = len(polygon)
    for i in range(n):
        (x0, y0), (x1, y1) = polygon[i], polygon[(i + 1) % n]
        c = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
        inside_pos &= c >= 0
        inside_neg &= c <= 0
    return inside_pos | inside_neg


def box_pixel_mask(box: BoundingBox, height: int, width: int) -> np.ndarray:
    """Pixels whose centres fall in the half-open box [x_min, x_max) x [y_min, y_max)."""
    cy = np.arange(height) + 0.5
    cx = np.arange(width) + 0.5
    rows = (cy >= box.y_min) & (cy < box.y_max)
    cols = (cx >= box.x_min) & (cx < box.x_max)
    return rows[:, None] & cols[None, :]


def mask_channels(boxes: Sequence[Annotation], height: int, width: int) -> np.ndarray:
    channels = np.zeros((NUM_CLASSES, height, width))
    for box, cls in boxes:
        channels[int(cls)][box_pixel_mask(box, height, width)] = 1.0
    return channels


# --- mask sampling -------------------------------------------------------

def sample_mask(drivable: Sequence[Point], count_range: Tuple[int, int], size_range: Tuple[float, float],
                aspect_range: Tuple[float, float], seed: int, image_size: int = 64,
                max_attempts: int = 100) -> DefectMask:
    """
    Sample non-overlapping defect boxes inside the drivable polygon.

    Args:
        drivable: Convex polygon vertices in pixel coordinates.
        count_range: Inclusive (min, max) number of boxes.
        size_range: Range of sqrt(box area) in pixels.
        aspect_range: Range of width / height, sampled log-uniformly.
        seed (int): Sampling seed.
        image_size (int): Side of the square image the mask is rasterised on.
        max_attempts (int): Rejection-sampling attempts per box.

    Returns:
        DefectMask: Boxes with uniformly drawn classes; `shortfall` counts boxes
        that could not be placed.
    """
    validate_polygon(drivable)
    rng = np.random.default_rng(seed)
    lo, hi = count_range
    k = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    xs = [p[0] for p in drivable]
    ys = [p[1] for p in drivable]
    x_lo, x_hi = max(0.0, min(xs)), min(float(image_size), max(xs))
    y_lo, y_hi = max(0.0, min(ys)), min(float(image_size), max(ys))
    log_aspect = (math.log(aspect_range[0]), math.log(aspect_range[1]))

    placed: List[Annotation] = []
    shortfall = 0
    for _ in range(k):
        box = None
        for _attempt in range(max_attempts):
            size = rng.uniform(size_range[0], size_range[1])
            aspect = math.exp(rng.uniform(*log_aspect))
            w = size * math.sqrt(aspect)
            h = size / math.sqrt(aspect)
            if x_hi - w <= x_lo or y_hi - h <= y_lo:
                continue
            x0 = rng.uniform(x_lo, x_hi - w)
            y0 = rng.uniform(y_lo, y_hi - h)
            candidate = BoundingBox(x0, y0, x0 + w, y0 + h)
            if not box_in_polygon(candidate, drivable):
                continue
            if any(candidate.intersection_area(other) > 0.0 for other, _ in placed):
                continue
            box = candidate
            break
        if box is None:
            shortfall += 1
            continue
        placed.append((box, DefectClass(int(rng.integers(NUM_CLASSES)))))

    if shortfall:
        placement_warnings.add(shortfall)
        logger.debug("mask under-filled: placed %d of %d boxes (seed %d)", len(placed), k, seed)
    channels = mask_channels(placed, image_size, image_size)
    return DefectMask(channels=Tensor(channels, copy=False), boxes=placed, shortfall=shortfall)


def sample_mask_for(sample: SceneSample, params: WorldParams, seed: int) -> DefectMask:
    return sample_mask(sample.drivable, params.count_range, params.size_range, params.aspect_range,
                       seed, params.image_size, params.max_attempts)


# --- rendering -----------------------------------------------------------

def _drivable_polygon(rng: np.random.Generator, size: int) -> Polygon:
    horizon = rng.uniform(0.30, 0.40) * size
    top_center = size / 2 + rng.uniform(-0.06, 0.06) * size
    top_half = rng.uniform(0.10, 0.16) * size
    bottom_center = size / 2 + rng.uniform(-0.03, 0.03) * size
    bottom_half = rng.uniform(0.44, 0.52) * size
    return (
        (top_center - top_half, horizon),
        (top_center + top_half, horizon),
        (min(bottom_center + bottom_half, float(size)), float(size)),
        (max(bottom_center - bottom_half, 0.0), float(size)),
    )


def _blend(image: np.ndarray, alpha: np.ndarray, color: np.ndarray, window) -> None:
    region = image[:, window[0], window[1]]
    image[:, window[0], window[1]] = region * (1.0 - alpha) + color[:, None, None] * alpha


def _box_window(box: BoundingBox, size: int):
    r0 = max(0, int(math.floor(box.y_min)))
    r1 = min(size, int(math.ceil(box.y_max)))
    c0 = max(0, int(math.floor(box.x_min)))
    c1 = min(size, int(math.ceil(box.x_max)))
    ys = np.arange(r0, r1) + 0.5
    xs = np.arange(c0, c1) + 0.5
    inside = ((ys >= box.y_min) & (ys < box.y_max))[:, None] & ((xs >= box.x_min) & (xs < box.x_max))[None, :]
    # normalised coordinates in [0, 1] across the box
    u = ((xs - box.x_min) / box.width)[None, :].repeat(len(ys), axis=0)
    v = ((ys - box.y_min) / box.height)[:, None].repeat(len(xs), axis=1)
    return (slice(r0, r1), slice(c0, c1)), inside, u, v


def _paint_defect(image: np.ndarray, box: BoundingBox, cls: DefectClass, rng: np.random.Generator) -> None:
    size = image.shape[1]
    window, inside, u, v = _box_window(box, size)
    darkness = rng.uniform(0.08, 0.18)
    dark = np.array([darkness, darkness * 0.95, darkness * 0.9])
    phase = rng.uniform(0, 2 * math.pi)

    if cls in (DefectClass.LONGITUDINAL_CRACK, DefectClass.TRANSVERSE_CRACK):
        # along: coordinate following the crack; across: offset from its wandering centre line
        along, across, span = (v, u, box.width) if cls == DefectClass.LONGITUDINAL_CRACK else (u, v, box.height)
        half_width = max(0.75, 0.12 * span) / span
        centre = 0.5 + (0.5 - half_width) * np.sin(2 * math.pi * along + phase)
        alpha = np.clip(1.0 - np.abs(across - centre) / (2 * half_width), 0.0, 1.0)
    elif cls == DefectClass.ALLIGATOR_CRACK:
        cells = rng.uniform(2.5, 3.5)
        a = np.abs(((u + v) * cells + phase) % 1.0 - 0.5)
        b = np.abs(((u - v) * cells + phase) % 1.0 - 0.5)
        alpha = np.clip(1.6 - 6.0 * np.minimum(a, b), 0.0, 0.9)
    else:
        r = np.sqrt((2 * u - 1) ** 2 + (2 * v - 1) ** 2)
        alpha = np.where(r < 0.85, 0.92, 0.0)
        rim = (r >= 0.85) & (r < 1.0)
        highlight = np.array([0.72, 0.70, 0.66])
        _blend(image, np.where(rim & inside, 0.6, 0.0), highlight, window)
        dark = dark * np.array([1.1, 1.0, 0.85])
    _blend(image, np.where(inside, alpha, 0.0), dark, window)


def render_scene(seed: int, with_defects: bool, params: WorldParams) -> SceneSample:
    """
    Render one synthetic road scene.

    Args:
        seed (int): Scene seed; the output is a pure function of (seed, params).
        with_defects (bool): False yields a clean image with no annotations.
        params (WorldParams): World geometry and noise settings.

    Returns:
        SceneSample: Image in [0, 1] with annotations and drivable polygon.

    Raises:
        DatasetError: If a defected scene gets no box after max_attempts mask draws.
    """
    rng = np.random.default_rng(seed)
    size = params.image_size
    polygon = _drivable_polygon(rng, size)
    road = polygon_pixel_mask(polygon, size, size)
    ys = (np.arange(size) + 0.5)[:, None] * np.ones((1, size))
    horizon = polygon[0][1]

    sky = np.stack([np.full((size, size), c) for c in (0.62, 0.74, 0.88)])
    sky = sky * (0.9 + 0.1 * ys / size)
    verge_tone = rng.uniform(0.85, 1.1)
    verge = np.stack([np.full((size, size), c * verge_tone) for c in (0.30, 0.45, 0.24)])
    image = np.where(ys < horizon, sky, verge)

    base = rng.uniform(0.46, 0.58)
    coarse = rng.standard_normal((8, 8)) * 0.015
    texture = zoom(coarse, size / 8, order=1)[:size, :size]
    asphalt = base + texture + 0.02 * (ys - horizon) / size
    image = np.where(road[None], np.stack([asphalt, asphalt, asphalt * 1.02]), image)

    # dashed lane line between the top and bottom edge midpoints
    top_mid = 0.5 * (polygon[0][0] + polygon[1][0])
    bottom_mid = 0.5 * (polygon[2][0] + polygon[3][0])
    dash_phase = rng.uniform(0, 1)
    for row in range(int(math.ceil(horizon)), size):
        t = (row + 0.5 - horizon) / (size - horizon)
        if ((t * 6 + dash_phase) % 1.0) > 0.55:
            continue
        x = top_mid + t * (bottom_mid - top_mid)
        half = 0.3 + 0.6 * t
        cols = np.arange(size) + 0.5
        alpha = np.clip(half + 0.5 - np.abs(cols - x), 0.0, 1.0) * 0.8
        image[:, row, :] = image[:, row, :] * (1 - alpha) + 0.78 * alpha

    annotations: List[Annotation] = []
    shortfall = 0
    if with_defects:
        mask = None
        for _draw in range(params.max_attempts):
            mask = sample_mask(polygon, params.count_range, params.size_range, params.aspect_range,
                               int(rng.integers(2 ** 62)), size, params.max_attempts)
            if mask.boxes:
                break
        if mask is None or not mask.boxes:
            raise DatasetError(f"scene {seed}: no defect could be placed after {params.max_attempts} masks")
        shortfall = mask.shortfall
        for box, cls in mask.boxes:
            _paint_defect(image, box, cls, rng)
        annotations = list(mask.boxes)

    image = image + rng.standard_normal(image.shape) * params.noise_std
    image = np.clip(image, 0.0, 1.0)
    return SceneSample(image=Tensor(image, copy=False), annotations=annotations, drivable=polygon,
                       seed=int(seed), shortfall=shortfall)


# --- patches -------------------------------------------------------------

def crop_patches(image: Tensor, boxes: Sequence[BoundingBox], patch_size: int = 16) -> Tensor:
    """
    Crop boxes from a 3 x H x W image and resize each to patch_size^2.

    Gradients flow back into the image through the bilinear resize.
    """
    if image.ndim != 3:
        raise GeometryError(f"crop_patches expects a C x H x W image, got shape {image.shape}")
    c, h, w = image.shape
    batch = tc.reshape(image, (1, c, h, w))
    return crop_batch_patches(batch, [list(boxes)], patch_size)


def crop_batch_patches(images: Tensor, box_lists: Sequence[Sequence[BoundingBox]], patch_size: int = 16) -> Tensor:
    if patch_size < 8:
        raise GeometryError(f"patch size must be >= 8, got {patch_size}")
    n, c, h, w = images.shape
    rois = []
    for b, boxes in enumerate(box_lists):
        for box in boxes:
            if not box.within(w, h):
                raise GeometryError(f"box {box.as_tuple()} outside {w}x{h} image")
            rois.append((b, *box.as_tuple()))
    if not rois:
        return Tensor(np.zeros((0, c, patch_size, patch_size)), copy=False)
    return tc.roi_resize(images, np.array(rois), patch_size)


# --- datasets ------------------------------------------------------------

def split_for_seed(seed: int) -> str:
    """80/10/10 train/val/test assignment from a hash of the sample seed."""
    bucket = int.from_bytes(hashlib.sha256(int(seed).to_bytes(8, "little")).digest()[:8], "little") % 10
    if bucket < 8:
        return "train"
    return "val" if bucket == 8 else "test"


def sample_seeds(master_seed: int, n: int) -> List[int]:
    if n == 0:
        return []
    state = np.random.SeedSequence(master_seed).generate_state(n, dtype=np.uint64)
    return [int(s) & ((1 << 63) - 1) for s in state]


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0).transpose(1, 2, 0) * 255.0).astype(np.uint8)


def _sample_record(sample: SceneSample) -> Dict:
    return {
        "id": sample.sample_id,
        "split": sample.split,
        "seed": sample.seed,
        "kind": "clean" if sample.is_clean else "defected",
        "provenance": sample.provenance,
        "drivable": [[float(x), float(y)] for x, y in sample.drivable],
        "annotations": [
            {"class_id": int(cls), "x_min": box.x_min, "y_min": box.y_min, "x_max": box.x_max, "y_max": box.y_max}
            for box, cls in sample.annotations
        ],
    }


def _write_png(path: str, image: np.ndarray) -> None:
    Image.fromarray(image_to_uint8(image), "RGB").save(path)


def write_dataset(out_dir: str, samples: Sequence[SceneSample], params: WorldParams, workers: int = 2) -> str:
    """
    Write samples as images/{id}.png plus manifest.json.

    Returns:
        str: Path of the written manifest.
    """
    images_dir = os.path.join(out_dir, "images")
    try:
        os.makedirs(images_dir, exist_ok=True)
        paths = [os.path.join(images_dir, f"{s.sample_id}.png") for s in samples]
        with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
            list(executor.map(_write_png, paths, [s.image.data for s in samples]))
        manifest = {
            "version": MANIFEST_VERSION,
            "world": _world_record(params),
            "samples": [_sample_record(s) for s in samples],
        }
        manifest_path = os.path.join(out_dir, "manifest.json")
        with open(manifest_path, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
    except OSError as e:
        raise DatasetError(f"cannot write dataset to {out_dir}: {e}") from e
    return manifest_path


def _world_record(params: WorldParams) -> Dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(params).items()}


def make_dataset(out_dir: str, n_clean: int, n_defected: int, seed: int,
                 params: Optional[WorldParams] = None, workers: int = 2) -> str:
    """
    Render n_clean clean and n_defected defected scenes into a dataset directory.

    Args:
        out_dir (str): Target directory (created if missing).
        n_clean (int): Number of clean scenes.
        n_defected (int): Number of defected scenes.
        seed (int): Master seed; per-sample seeds derive from it.
        params (WorldParams): World settings.
        workers (int): Render threads; output order does not depend on it.

    Returns:
        str: Manifest path.
    """
    if n_clean < 0 or n_defected < 0:
        raise DatasetError("sample counts must be >= 0")
    params = params or WorldParams()
    seeds = sample_seeds(seed, n_clean + n_defected)
    kinds = [False] * n_clean + [True] * n_defected
    before = placement_warnings.count

    def build(index: int) -> SceneSample:
        sample = render_scene(seeds[index], kinds[index], params)
        sample.sample_id = f"{index:06d}"
        sample.split = split_for_seed(seeds[index])
        return sample

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        samples = list(executor.map(build, range(len(seeds))))
    shortfall = placement_warnings.count - before
    if shortfall:
        logger.warning("%d defect boxes could not be placed without overlap", shortfall)
    manifest_path = write_dataset(out_dir, samples, params, workers)
    logger.info("Wrote %d samples (%d clean, %d defected) to %s", len(samples), n_clean, n_defected, out_dir)
    return manifest_path


@dataclass
class SceneDataset:
    root: str
    params: WorldParams
    samples: List[SceneSample] = field(default_factory=list)

    def split(self, name: str) -> List[SceneSample]:
        return [s for s in self.samples if s.split == name]

    def clean(self, split: Optional[str] = None) -> List[SceneSample]:
        pool = self.samples if split is None else self.split(split)
        return [s for s in pool if s.is_clean]

    def defected(self, split: Optional[str] = None) -> List[SceneSample]:
        pool = self.samples if split is None else self.split(split)
        return [s for s in pool if not s.is_clean]

    @property
    def class_ids(self) -> Tuple[int, ...]:
        return tuple(range(NUM_CLASSES))


def _parse_sample(record: Dict, images_dir: str) -> SceneSample:
    with Image.open(os.path.join(images_dir, f"{record['id']}.png")) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    annotations = [
        (BoundingBox(a["x_min"], a["y_min"], a["x_max"], a["y_max"]), DefectClass(a["class_id"]))
        for a in record["annotations"]
    ]
    return SceneSample(
        image=Tensor(pixels.transpose(2, 0, 1), copy=False),
        annotations=annotations,
        drivable=tuple((float(x), float(y)) for x, y in record["drivable"]),
        seed=int(record["seed"]),
        sample_id=record["id"],
        split=record["split"],
        provenance=record.get("provenance", "real"),
    )


def load_dataset(root: str) -> SceneDataset:
    manifest_path = os.path.join(root, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DatasetError(f"no manifest.json under {root}")
    images_dir = os.path.join(root, "images")
    try:
        with open(manifest_path, "r") as f:
            manifest = json.load(f)
        world = {k: tuple(v) if isinstance(v, list) else v for k, v in manifest["world"].items()}
        params = WorldParams(**world)
        samples = [_parse_sample(r, images_dir) for r in manifest["samples"]]
    except (OSError, KeyError, ValueError, TypeError, AttributeError) as e:
        raise DatasetError(f"{root}: unreadable dataset ({type(e).__name__}: {e})") from e
    except ConfigError as e:
        raise DatasetError(f"{root}: invalid world settings ({e})") from e
    return SceneDataset(root=root, params=params, samples=samples)


def stack_images(samples: Sequence[SceneSample]) -> Tensor:
    return Tensor(np.stack([s.image.data for s in samples]), copy=False)
