"""
Training objectives: adversarial losses for both discriminators and the
generator, grid detection loss, hard-example loss and the differentiable
Fréchet distance between feature statistics.
"""
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src import tensorcore as tc
from src.errors import ConfigError, GeometryError, NumericsError, ShapeError, WarningCounter
from src.tensorcore import Tensor

if TYPE_CHECKING:
    from src.synthworld import DefectMask, SceneSample

logger = logging.getLogger(__name__)

COVARIANCE_EPS = 1e-6
SYMMETRY_TOLERANCE = 1e-8
NEWTON_SCHULZ_ITERS = 30


@dataclass(frozen=True)
class LossWeights:
    w_h: float = 1.0
    w_fid: float = 0.1

    def __post_init__(self):
        if self.w_h < 0 or self.w_fid < 0:
            raise ConfigError(f"loss weights must be >= 0, got w_h={self.w_h}, w_fid={self.w_fid}")


@dataclass
class FeatureStats:
    mu: Tensor
    sigma: Tensor
    n: int

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass
class ReferenceStats:
    """Frozen real-side statistics with their matrix square root precomputed."""

    stats: FeatureStats
    sqrt_sigma: np.ndarray

    @classmethod
    def from_features(cls, features: Union[Tensor, np.ndarray], iters: int = NEWTON_SCHULZ_ITERS) -> "ReferenceStats":
        data = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
        stats = feature_stats(Tensor(data))
        root = newton_schulz_sqrt(stats.sigma.detach(), iters)
        return cls(FeatureStats(stats.mu.detach(), stats.sigma.detach(), stats.n), root.data.copy())


@dataclass
class Batch:
    clean: List["SceneSample"]
    defected: List["SceneSample"]
    masks: List["DefectMask"]
    fakes: Optional[Tensor] = None

    def __post_init__(self):
        if len(self.clean) != len(self.masks):
            raise ShapeError("batch", "clean/mask count", len(self.clean), len(self.masks))


patch_skips = WarningCounter()


def _zero() -> Tensor:
    return Tensor(0.0)


# --- adversarial ---------------------------------------------------------

def image_disc_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    """
    Image discriminator loss: mean(-log D(real)) + mean(-log(1 - D(fake))).

    Raises:
        NumericsError: If either score set is empty.
    """
    if real_scores.size == 0 or fake_scores.size == 0:
        raise NumericsError("image discriminator update needs both real and fake scores")
    return tc.binary_cross_entropy(real_scores, 1.0) + tc.binary_cross_entropy(fake_scores, 0.0)


def patch_disc_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    """
    Patch discriminator loss with the same form as `image_disc_loss`.

    A side with zero patches contributes 0 and increments `patch_skips`.
    """
    total = None
    for scores, target in ((real_scores, 1.0), (fake_scores, 0.0)):
        if scores.size == 0:
            patch_skips.add()
            logger.debug("patch loss: no %s patches in batch", "real" if target else "fake")
            continue
        term = tc.binary_cross_entropy(scores, target)
        total = term if total is None else total + term
    return total if total is not None else _zero()


def generator_adv_loss(fake_image_scores: Tensor, fake_patch_scores: Tensor) -> Tensor:
    """Saturating generator loss: mean(log(1 - D_i(f))) + mean(log(1 - D_p(f)))."""
    loss = tc.neg(tc.binary_cross_entropy(fake_image_scores, 0.0))
    if fake_patch_scores.size:
        loss = loss - tc.binary_cross_entropy(fake_patch_scores, 0.0)
    return loss


# --- detection -----------------------------------------------------------

def assign_cells(annotations: Sequence[Tuple], grid_size: int, image_size: int) -> Dict[Tuple[int, int], Tuple]:
    """
    Map each (box, class) to the grid cell holding the box centre.

    When centres share a cell the larger box is kept; equal areas keep the
    earlier annotation.
    """
    cell = image_size / grid_size
    owners: Dict[Tuple[int, int], Tuple] = {}
    order = sorted(range(len(annotations)), key=lambda i: -annotations[i][0].area)
    for i in order:
        box, cls = annotations[i]
        cx, cy = box.center
        if not (0.0 <= cx < image_size and 0.0 <= cy < image_size):
            raise GeometryError(f"box centre ({cx:.2f}, {cy:.2f}) outside {image_size}px image")
        key = (min(int(cy // cell), grid_size - 1), min(int(cx // cell), grid_size - 1))
        if key not in owners:
            owners[key] = (box, cls)
    return owners


def encode_targets(annotation_lists: Sequence[Sequence[Tuple]], grid_size: int, image_size: int):
    """
    Build dense detector targets.

    Args:
        annotation_lists: One list of (BoundingBox, class id) per image.
        grid_size (int): Cells per side.
        image_size (int): Image side in pixels.

    Returns:
        tuple: objectness (B x G x G), class ids (B x G x G, -1 where empty),
        box offsets (B x G x G x 4) as (tx, ty, tw, th).
    """
    b = len(annotation_lists)
    cell = image_size / grid_size
    objectness = np.zeros((b, grid_size, grid_size))
    classes = np.full((b, grid_size, grid_size), -1, dtype=int)
    offsets = np.zeros((b, grid_size, grid_size, 4))
    for i, annotations in enumerate(annotation_lists):
        for (gy, gx), (box, cls) in assign_cells(annotations, grid_size, image_size).items():
            cx, cy = box.center
            objectness[i, gy, gx] = 1.0
            classes[i, gy, gx] = int(cls)
            offsets[i, gy, gx] = (cx / cell - gx, cy / cell - gy,
                                  np.log(box.width / cell), np.log(box.height / cell))
    return objectness, classes, offsets


def detection_loss(grid: Tensor, annotation_lists: Sequence[Sequence[Tuple]], image_size: int) -> Tensor:
    """
    Grid detection loss: objectness BCE over every cell, plus class
    cross-entropy and smooth-L1 box regression averaged over positive cells.

    Args:
        grid (Tensor): Raw detector output, B x G x G x 9.
        annotation_lists: Ground-truth (box, class) lists, one per image.
        image_size (int): Image side in pixels.

    Returns:
        Tensor: Scalar loss.
    """
    if grid.ndim != 4 or grid.shape[0] != len(annotation_lists):
        raise ShapeError("detection_loss", "batch size", len(annotation_lists), grid.shape)
    objectness, classes, offsets = encode_targets(annotation_lists, grid.shape[1], image_size)
    loss = tc.bce_with_logits(grid[:, :, :, 0], objectness)
    positive = np.nonzero(classes >= 0)
    npos = len(positive[0])
    if npos == 0:
        return loss
    logits = tc.getitem(grid, positive + (slice(1, grid.shape[3] - 4),))
    picked = tc.getitem(tc.log_softmax(logits), (np.arange(npos), classes[positive]))
    box = tc.getitem(grid, positive + (slice(grid.shape[3] - 4, grid.shape[3]),))
    residual = box - Tensor(offsets[positive], copy=False)
    return loss - tc.scale(tc.sum(picked), 1.0 / npos) + tc.scale(tc.sum(tc.smooth_l1(residual)), 1.0 / npos)


def hard_example_loss(l_df: Union[Tensor, float], l_dr: Union[Tensor, float]) -> Tensor:
    """L_h = -L_df - L_dr. Only L_df carries a generator gradient."""
    return tc.neg(tc.as_tensor(l_df)) - tc.as_tensor(l_dr)


# --- Fréchet distance ----------------------------------------------------

def feature_stats(features: Tensor) -> FeatureStats:
    """
    Column means and unbiased covariance (+ 1e-6 I) of an n x F feature matrix.
    """
    if features.ndim != 2:
        raise ShapeError("feature_stats", "rank", 2, features.ndim)
    n, f = features.shape
    if n < 2:
        raise NumericsError(f"feature statistics need at least 2 rows, got {n}")
    mu = tc.mean(features, axis=0)
    # rows minus the mean, expressed as a rank-1 product
    centered = features - tc.matmul(Tensor(np.ones((n, 1)), copy=False), tc.reshape(mu, (1, f)))
    sigma = tc.scale(tc.matmul(tc.transpose(centered), centered), 1.0 / (n - 1))
    sigma = sigma + Tensor(COVARIANCE_EPS * np.eye(f), copy=False)
    return FeatureStats(mu, sigma, n)


def _check_symmetric(a: Tensor, op: str) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(op, "square matrix", "n x n", a.shape)
    if not np.all(np.isfinite(a.data)):
        raise NumericsError(f"{op}: non-finite matrix entries")
    asym = float(np.max(np.abs(a.data - a.data.T))) if a.size else 0.0
    if asym > SYMMETRY_TOLERANCE:
        raise NumericsError(f"{op}: matrix is not symmetric (max asymmetry {asym:.3e})")


def newton_schulz_sqrt(a: Tensor, iters: int = NEWTON_SCHULZ_ITERS) -> Tensor:
    """
    Matrix square root of an SPD matrix by the coupled Newton–Schulz iteration.

    The input is normalized by its trace so the iteration converges; every
    step is a recorded tensor op, so gradients flow through all iterations.

    Args:
        a (Tensor): Symmetric positive definite F x F matrix.
        iters (int): Number of iterations.

    Returns:
        Tensor: Approximate principal square root of `a`.
    """
    if iters < 1:
        raise NumericsError(f"newton_schulz_sqrt needs iters >= 1, got {iters}")
    _check_symmetric(a, "newton_schulz_sqrt")
    n = a.shape[0]
    norm = tc.trace(a)
    if norm.item() <= 0:
        raise NumericsError("newton_schulz_sqrt: matrix trace must be positive")
    three = Tensor(3.0 * np.eye(n), copy=False)
    y = a / norm
    z = tc.eye(n)
    for _ in range(iters):
        t = three - tc.matmul(z, y)
        y = tc.scale(tc.matmul(y, t), 0.5)
        z = tc.scale(tc.matmul(t, z), 0.5)
    return y * tc.sqrt(norm)


def _symmetrize(m: Tensor) -> Tensor:
    return tc.scale(m + tc.transpose(m), 0.5)


def frechet_distance(a: Union[FeatureStats, ReferenceStats], b: FeatureStats,
                     iters: int = NEWTON_SCHULZ_ITERS) -> Tensor:
    """
    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 sqrt(sqrt(S_a) S_b sqrt(S_a))).

    `a` may be a ReferenceStats, in which case its stored square root is used.
    The result is clamped at 0.
    """
    if isinstance(a, ReferenceStats):
        root_a = Tensor(a.sqrt_sigma, copy=False)
        a = a.stats
    else:
        root_a = newton_schulz_sqrt(a.sigma, iters)
    if a.dim != b.dim:
        raise ShapeError("frechet_distance", "feature dimension", a.dim, b.dim)
    diff = a.mu - b.mu
    mean_term = tc.sum(diff * diff)
    product = _symmetrize(tc.matmul(tc.matmul(root_a, b.sigma), root_a))
    cross = tc.trace(newton_schulz_sqrt(product, iters))
    value = mean_term + tc.trace(a.sigma) + tc.trace(b.sigma) - tc.scale(cross, 2.0)
    if value.item() < 0.0:
        if value.item() < -1e-6:
            logger.debug("frechet_distance clamped a negative value %.3e", value.item())
        value = tc.scale(value, 0.0)
    return value


def generator_total_loss(l_g: Tensor, l_h: Optional[Tensor], l_fid: Optional[Tensor],
                         weights: LossWeights) -> Tensor:
    """L_psi = L_g + w_h L_h + w_fid L_fid; disabled terms are passed as None."""
    total = l_g
    if l_h is not None:
        total = total + tc.scale(tc.as_tensor(l_h), weights.w_h)
    if l_fid is not None:
        total = total + tc.scale(tc.as_tensor(l_fid), weights.w_fid)
    return total
