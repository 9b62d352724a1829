"""
Detection evaluation: IoU matching, precision / recall / F1, validation
threshold selection and evaluation-mode Fréchet distance.
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import scipy.linalg

from src.errors import DatasetError, NumericsError, ShapeError
from src.synthworld import NUM_CLASSES, BoundingBox, SceneSample
from src.tensorcore import Tensor

logger = logging.getLogger(__name__)

THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(1, 20))
IOU_THRESHOLD = 0.5
FEATURE_EPS = 1e-6


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise NumericsError(f"detection confidence must lie in [0, 1], got {self.confidence}")


@dataclass
class MatchResult:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    pairs: List[Tuple[int, int]] = field(default_factory=list)

    def __add__(self, other: "MatchResult") -> "MatchResult":
        return MatchResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


class Detector(Protocol):
    def detect(self, images: Tensor) -> Tensor: ...

    def decode(self, grid, conf_threshold: float) -> List[List[Detection]]: ...


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = a.intersection_area(b)
    if inter <= 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def match_detections(detections: Sequence[Detection], ground_truth: Sequence[Tuple[BoundingBox, int]],
                     iou_threshold: float = IOU_THRESHOLD) -> MatchResult:
    """
    Greedy confidence-ordered matching.

    Each detection, highest confidence first (ties by index), takes the
    unmatched same-class ground truth with the largest IoU >= threshold.

    Args:
        detections: Detections already filtered by confidence.
        ground_truth: (BoundingBox, class id) pairs.
        iou_threshold (float): Minimum IoU for a match.

    Returns:
        MatchResult: Counts and (detection index, ground-truth index) pairs.
    """
    order = sorted(range(len(detections)), key=lambda k: -detections[k].confidence)
    taken = [False] * len(ground_truth)
    pairs = []
    for k in order:
        det = detections[k]
        best, best_iou = -1, iou_threshold
        for j, (box, cls) in enumerate(ground_truth):
            if taken[j] or int(cls) != det.class_id:
                continue
            overlap = iou(det.box, box)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = j, overlap
        if best >= 0:
            taken[best] = True
            pairs.append((k, best))
    tp = len(pairs)
    return MatchResult(tp, len(detections) - tp, len(ground_truth) - tp, pairs)


def match_detections_optimal(detections: Sequence[Detection], ground_truth: Sequence[Tuple[BoundingBox, int]],
                             iou_threshold: float = IOU_THRESHOLD) -> MatchResult:
    """Maximum-cardinality assignment over eligible (same class, IoU >= threshold) pairs."""
    graph = nx.Graph()
    left = [("det", k) for k in range(len(detections))]
    graph.add_nodes_from(left, bipartite=0)
    graph.add_nodes_from((("gt", j) for j in range(len(ground_truth))), bipartite=1)
    for k, det in enumerate(detections):
        for j, (box, cls) in enumerate(ground_truth):
            if int(cls) == det.class_id and iou(det.box, box) >= iou_threshold:
                graph.add_edge(("det", k), ("gt", j))
    matching = nx.bipartite.maximum_matching(graph, top_nodes=left)
    pairs = sorted((u[1], v[1]) for u, v in matching.items() if u[0] == "det")
    tp = len(pairs)
    return MatchResult(tp, len(detections) - tp, len(ground_truth) - tp, pairs)


def f1_score(m: MatchResult) -> Tuple[float, float, float]:
    precision = m.tp / (m.tp + m.fp) if m.tp + m.fp else 0.0
    recall = m.tp / (m.tp + m.fn) if m.tp + m.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _require_samples(samples: Sequence[SceneSample], what: str) -> None:
    if not samples:
        raise DatasetError(f"{what}: split is empty")


def predict_grids(detector: Detector, samples: Sequence[SceneSample], batch_size: int = 32) -> np.ndarray:
    """Raw detector grids for every sample, evaluated without recording."""
    _require_samples(samples, "predict_grids")
    grids = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = Tensor(np.stack([s.image.data for s in chunk]), copy=False)
        grids.append(np.array(detector.detect(images).data))
    return np.concatenate(grids, axis=0)


def _match_all(detector: Detector, grids: np.ndarray, samples: Sequence[SceneSample], threshold: float,
               iou_threshold: float) -> Tuple[MatchResult, List[Tuple[List[Detection], MatchResult]]]:
    per_image = []
    total = MatchResult()
    for dets, sample in zip(detector.decode(grids, threshold), samples):
        m = match_detections(dets, sample.annotations, iou_threshold)
        per_image.append((dets, m))
        total = total + m
    return total, per_image


def sweep_thresholds(detector: Detector, samples: Sequence[SceneSample], iou_threshold: float = IOU_THRESHOLD,
                     batch_size: int = 32, grids: Optional[np.ndarray] = None) -> List[Tuple[float, float]]:
    """F1 at every swept confidence threshold, as (threshold, f1) pairs."""
    _require_samples(samples, "sweep_thresholds")
    if grids is None:
        grids = predict_grids(detector, samples, batch_size)
    curve = []
    for t in THRESHOLDS:
        total, _ = _match_all(detector, grids, samples, t, iou_threshold)
        curve.append((t, f1_score(total)[2]))
    return curve


def select_threshold(detector: Detector, samples: Sequence[SceneSample], iou_threshold: float = IOU_THRESHOLD,
                     batch_size: int = 32) -> float:
    """
    Pick the confidence threshold with the best validation F1.

    Ties go to the higher threshold.
    """
    curve = sweep_thresholds(detector, samples, iou_threshold, batch_size)
    best_t, best_f1 = curve[0]
    for t, f1 in curve[1:]:
        if f1 >= best_f1:
            best_t, best_f1 = t, f1
    logger.info("Selected confidence threshold %.2f (val F1 %.4f)", best_t, best_f1)
    return best_t


def evaluate(detector: Detector, samples: Sequence[SceneSample], threshold: float, split: str = "test",
             iou_threshold: float = IOU_THRESHOLD, out_path: Optional[str] = None,
             batch_size: int = 32) -> Dict:
    """
    Micro-averaged precision / recall / F1 plus per-class F1 over a split.

    Args:
        detector: Object with `detect` and `decode`.
        samples: Evaluation samples with ground-truth annotations.
        threshold (float): Confidence threshold.
        split (str): Split name recorded in the metrics.
        iou_threshold (float): Matching IoU.
        out_path (str): Optional path for the metrics JSON.

    Returns:
        dict: {split, threshold, precision, recall, f1, per_class, n_images, n_gt, n_det}.
    """
    _require_samples(samples, "evaluate")
    grids = predict_grids(detector, samples, batch_size)
    total, per_image = _match_all(detector, grids, samples, threshold, iou_threshold)
    per_class = {c: MatchResult() for c in range(NUM_CLASSES)}
    optimal_tp = 0
    for (dets, m), sample in zip(per_image, samples):
        matched_dets = {k for k, _ in m.pairs}
        matched_gts = {j for _, j in m.pairs}
        for k, j in m.pairs:
            per_class[int(sample.annotations[j][1])].tp += 1
        for k, det in enumerate(dets):
            if k not in matched_dets:
                per_class[det.class_id].fp += 1
        for j, (_, cls) in enumerate(sample.annotations):
            if j not in matched_gts:
                per_class[int(cls)].fn += 1
        optimal_tp += match_detections_optimal(dets, sample.annotations, iou_threshold).tp
    precision, recall, f1 = f1_score(total)
    metrics = {
        "split": split,
        "threshold": float(threshold),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "per_class": [{"class_id": c, "f1": f1_score(per_class[c])[2]} for c in range(NUM_CLASSES)],
        "n_images": len(samples),
        "n_gt": total.tp + total.fn,
        "n_det": total.tp + total.fp,
    }
    logger.info("%s: P=%.4f R=%.4f F1=%.4f at threshold %.2f (greedy tp %d, optimal tp %d)",
                split, precision, recall, f1, threshold, total.tp, optimal_tp)
    if out_path:
        with open(out_path, "w") as f:
            json.dump(metrics, f, indent=2)
    return metrics


# --- evaluation-mode FID -------------------------------------------------

def feature_moments(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and unbiased covariance (+ 1e-6 I) of an n x F matrix."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ShapeError("feature_moments", "rows", ">= 2", features.shape)
    mu = features.mean(axis=0)
    sigma = np.cov(features, rowvar=False, ddof=1).reshape(features.shape[1], features.shape[1])
    return mu, sigma + FEATURE_EPS * np.eye(features.shape[1])


def spd_sqrt(a: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix via eigendecomposition."""
    values, vectors = scipy.linalg.eigh(0.5 * (a + a.T))
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_distance_numpy(mu_a: np.ndarray, sigma_a: np.ndarray, mu_b: np.ndarray, sigma_b: np.ndarray) -> float:
    if mu_a.shape != mu_b.shape:
        raise ShapeError("frechet_distance", "feature dimension", mu_a.shape, mu_b.shape)
    root_a = spd_sqrt(sigma_a)
    cross = spd_sqrt(root_a @ sigma_b @ root_a)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def _features(images: Union[np.ndarray, Sequence[np.ndarray]], extractor: Callable[[Tensor], Tensor],
              batch_size: int) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    rows = []
    for start in range(0, len(images), batch_size):
        rows.append(np.array(extractor(Tensor(images[start:start + batch_size], copy=False)).data))
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, 0))


def fid_eval(images_a, images_b, extractor: Callable[[Tensor], Tensor], batch_size: int = 64) -> float:
    """
    Non-differentiable Fréchet distance between two image sets, to 4 decimals.

    Each set needs at least feature_dim + 1 images.
    """
    feats_a = _features(images_a, extractor, batch_size)
    feats_b = _features(images_b, extractor, batch_size)
    dim = max(feats_a.shape[1] if feats_a.size else 0, feats_b.shape[1] if feats_b.size else 0)
    for name, feats in (("set A", feats_a), ("set B", feats_b)):
        if len(feats) < dim + 1 or len(feats) < 2:
            raise DatasetError(f"fid_eval: {name} has {len(feats)} images; need at least {dim + 1}")
    value = frechet_distance_numpy(*feature_moments(feats_a), *feature_moments(feats_b))
    return round(value, 4)
