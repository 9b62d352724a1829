"""
Networks: mask-conditioned generator, image/patch discriminators, grid
detector and the frozen random feature extractor used for Fréchet distances.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from src import tensorcore as tc
from src.config import NetParams
from src.errors import CheckpointError, ConfigError, NumericsError, ShapeError
from src.evalharness import Detection, iou
from src.synthworld import NUM_CLASSES, BoundingBox, DefectMask
from src.tensorcore import Adam, Tensor

logger = logging.getLogger(__name__)

GRID_CHANNELS = 1 + NUM_CLASSES + 4
LEAK = 0.2
NMS_IOU = 0.5


@dataclass
class ConvLayer:
    kernel: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 1

    def __call__(self, x: Tensor) -> Tensor:
        return tc.conv2d(x, self.kernel, self.bias, self.stride, self.padding)


class Network:
    """Named-parameter container shared by every model."""

    def __init__(self, seed: int):
        self._rng = np.random.default_rng(seed)
        self._params: Dict[str, Tensor] = {}

    def _conv(self, name: str, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding: int = 1,
              zero: bool = False, trainable: bool = True, bias_std: float = 0.0) -> ConvLayer:
        fan_in = c_in * k * k
        if zero:
            w = np.zeros((c_out, c_in, k, k))
        else:
            w = self._rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in)
        b = self._rng.standard_normal(c_out) * bias_std if bias_std else np.zeros(c_out)
        kernel = Tensor(w, requires_grad=trainable, name=f"{name}.weight", copy=False)
        bias = Tensor(b, requires_grad=trainable, name=f"{name}.bias", copy=False)
        self._params[kernel.name] = kernel
        self._params[bias.name] = bias
        return ConvLayer(kernel, bias, stride, padding)

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self._params)

    def n_parameters(self) -> int:
        return int(np.sum([p.size for p in self._params.values()]))

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {f"{prefix}{name}": p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, records: Dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self._params.items():
            key = f"{prefix}{name}"
            if key not in records:
                raise CheckpointError(f"checkpoint has no record '{key}'")
            if records[key].shape != p.shape:
                raise CheckpointError(f"'{key}': expected shape {p.shape}, got {records[key].shape}")
            p.data = np.array(records[key], dtype=np.float64)


def _require_divisible(image_size: int, factor: int, what: str) -> None:
    if image_size % factor:
        raise ShapeError(what, "image size", f"a multiple of {factor}", image_size)


class GeneratorNet(Network):
    """
    Encoder / residual bottleneck / nearest-upsample decoder on image + mask.

    The decoder predicts an edit in tanh space, so a zero final layer returns
    the input image unchanged.
    """

    def __init__(self, params: Optional[NetParams] = None, seed: int = 0):
        super().__init__(seed)
        params = params or NetParams()
        c1, c2, c3 = params.generator_channels
        self.encoder = [
            self._conv("enc1", 3 + NUM_CLASSES, c1, stride=2),
            self._conv("enc2", c1, c2, stride=2),
            self._conv("enc3", c2, c3, stride=2),
        ]
        self.blocks = [
            (self._conv(f"res{i}.a", c3, c3), self._conv(f"res{i}.b", c3, c3)) for i in range(2)
        ]
        self.decoder = [
            self._conv("dec1", c3, c2),
            self._conv("dec2", c2, c1),
            self._conv("dec3", c1, 3, zero=True),
        ]

    def __call__(self, images: Tensor, masks: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError("generate", "image channels", 3, images.shape)
        if masks.shape != (images.shape[0], NUM_CLASSES) + images.shape[2:]:
            raise ShapeError("generate", "mask shape", (images.shape[0], NUM_CLASSES) + images.shape[2:], masks.shape)
        _require_divisible(images.shape[2], 8, "generate")
        h = tc.concat([images, masks], axis=1)
        for layer in self.encoder:
            h = tc.leaky_relu(layer(h), LEAK)
        for a, b in self.blocks:
            h = h + b(tc.leaky_relu(a(h), LEAK))
        for i, layer in enumerate(self.decoder):
            h = layer(tc.upsample_nearest(h, 2))
            if i < len(self.decoder) - 1:
                h = tc.leaky_relu(h, LEAK)
        base = np.arctanh(2.0 * np.clip(images.data, 1e-3, 1.0 - 1e-3) - 1.0)
        return tc.scale(tc.tanh(h + Tensor(base, copy=False)) + 1.0, 0.5)


class DiscriminatorNet(Network):
    """Four stride-2 convolutions, global mean, sigmoid score per sample."""

    def __init__(self, params: Optional[NetParams] = None, seed: int = 0):
        super().__init__(seed)
        params = params or NetParams()
        d1, d2, d3 = params.discriminator_channels
        self.layers = [
            self._conv("conv1", 3, d1, stride=2),
            self._conv("conv2", d1, d2, stride=2),
            self._conv("conv3", d2, d3, stride=2),
            self._conv("conv4", d3, 1, stride=2, zero=True),
        ]

    def logits(self, images: Tensor) -> Tensor:
        h = images
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = tc.leaky_relu(h, LEAK)
        return tc.mean(h, axis=(1, 2, 3))

    def __call__(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError("discriminate", "input channels", 3, images.shape)
        if images.shape[0] == 0:
            return Tensor(np.zeros(0), copy=False)
        return tc.sigmoid(self.logits(images))


class DetectorNet(Network):
    """
    Single-stage grid detector.

    Per cell the 9 output channels are: objectness logit, 4 class logits,
    centre offset (tx, ty) in cell units relative to the cell corner, and
    log-size (tw, th) relative to the cell side.
    """

    def __init__(self, params: Optional[NetParams] = None, image_size: int = 64, seed: int = 0):
        super().__init__(seed)
        params = params or NetParams()
        if image_size != params.grid_size * 8:
            raise ConfigError(f"grid_size {params.grid_size} needs image_size {params.grid_size * 8}, got {image_size}")
        self.grid_size = params.grid_size
        self.image_size = image_size
        c1, c2, c3 = params.detector_channels
        self.backbone = [
            self._conv("conv1", 3, c1, stride=2),
            self._conv("conv2", c1, c2, stride=2),
            self._conv("conv3", c2, c3, stride=2),
        ]
        self.head = self._conv("head", c3, GRID_CHANNELS, k=1, padding=0, zero=True)

    def detect(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError("detect", "input channels", 3, images.shape)
        if images.shape[2] != self.image_size or images.shape[3] != self.image_size:
            raise ShapeError("detect", "image size", self.image_size, images.shape[2:])
        h = images
        for layer in self.backbone:
            h = tc.leaky_relu(layer(h), LEAK)
        return tc.permute(self.head(h), (0, 2, 3, 1))

    def decode(self, grid: Union[Tensor, np.ndarray], conf_threshold: float) -> List[List[Detection]]:
        return decode_detections(grid, conf_threshold, self.image_size)

    def predict(self, images: Tensor, conf_threshold: float) -> List[List[Detection]]:
        return self.decode(self.detect(images), conf_threshold)


class FeatureExtractor(Network):
    """Seeded random convolutional features; weights never train."""

    def __init__(self, params: Optional[NetParams] = None):
        params = params or NetParams()
        super().__init__(params.extractor_seed)
        e1, e2 = params.extractor_channels
        self.feature_dim = params.feature_dim
        self.layers = [
            self._conv("conv1", 3, e1, stride=2, trainable=False, bias_std=0.1),
            self._conv("conv2", e1, e2, stride=2, trainable=False, bias_std=0.1),
            self._conv("conv3", e2, params.feature_dim, stride=2, trainable=False, bias_std=0.1),
        ]

    def __call__(self, images: Tensor) -> Tensor:
        h = images
        for layer in self.layers:
            h = tc.leaky_relu(layer(h), LEAK)
        return tc.mean(h, axis=(2, 3))


# --- operations ----------------------------------------------------------

def generate(psi: GeneratorNet, clean_image: Tensor, mask: Union[DefectMask, Tensor]) -> Tensor:
    """
    Synthesize I^f from a clean image and a defect mask.

    Accepts a single 3 x H x W image with its DefectMask, or a batch with a
    B x 4 x H x W channel tensor; returns the same layout it was given.
    """
    channels = mask.channels if isinstance(mask, DefectMask) else mask
    if clean_image.ndim == 3:
        if channels.shape[1:] != clean_image.shape[1:]:
            raise ShapeError("generate", "mask spatial size", clean_image.shape[1:], channels.shape[1:])
        c, h, w = clean_image.shape
        out = psi(tc.reshape(clean_image, (1, c, h, w)), tc.reshape(channels, (1,) + channels.shape))
        return tc.reshape(out, (c, h, w))
    if channels.shape[2:] != clean_image.shape[2:]:
        raise ShapeError("generate", "mask spatial size", clean_image.shape[2:], channels.shape[2:])
    return psi(clean_image, channels)


def discriminate_image(d_i: DiscriminatorNet, images: Tensor) -> Tensor:
    return d_i(images)


def discriminate_patches(d_p: DiscriminatorNet, patches: Tensor) -> Tensor:
    return d_p(patches)


def detect(d: DetectorNet, images: Tensor) -> Tensor:
    return d.detect(images)


def extract_features(fx: FeatureExtractor, images: Tensor) -> Tensor:
    return fx(images)


def decode_detections(grid: Union[Tensor, np.ndarray], conf_threshold: float, image_size: int,
                      nms_iou: float = NMS_IOU) -> List[List[Detection]]:
    """
    Turn a raw B x G x G x 9 grid into per-image detections.

    Args:
        grid: Raw detector output.
        conf_threshold (float): Minimum objectness probability, in [0, 1].
        image_size (int): Image side in pixels.
        nms_iou (float): IoU above which the lower-confidence box is suppressed.

    Returns:
        list: One list of Detection per image, sorted by confidence.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise NumericsError(f"conf_threshold must lie in [0, 1], got {conf_threshold}")
    data = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    b, g = data.shape[0], data.shape[1]
    cell = image_size / g
    conf = expit(data[..., 0])
    results = []
    for i in range(b):
        candidates = []
        for gy, gx in zip(*np.nonzero(conf[i] >= conf_threshold)):
            v = data[i, gy, gx]
            cx = (gx + v[5]) * cell
            cy = (gy + v[6]) * cell
            w = np.exp(np.clip(v[7], -10, 10)) * cell
            h = np.exp(np.clip(v[8], -10, 10)) * cell
            x0, x1 = max(0.0, cx - w / 2), min(float(image_size), cx + w / 2)
            y0, y1 = max(0.0, cy - h / 2), min(float(image_size), cy + h / 2)
            if x1 <= x0 or y1 <= y0:
                continue
            candidates.append(Detection(BoundingBox(x0, y0, x1, y1), int(np.argmax(v[1:1 + NUM_CLASSES])),
                                        float(conf[i, gy, gx])))
        results.append(non_max_suppression(candidates, nms_iou))
    return results


def non_max_suppression(detections: Sequence[Detection], threshold: float = NMS_IOU) -> List[Detection]:
    order = sorted(range(len(detections)), key=lambda k: -detections[k].confidence)
    kept: List[Detection] = []
    for k in order:
        det = detections[k]
        if all(iou(det.box, other.box) <= threshold for other in kept):
            kept.append(det)
    return kept


# --- checkpoints ---------------------------------------------------------

def save_networks(path: str, networks: Dict[str, Network], optimizers: Optional[Dict[str, Adam]] = None) -> None:
    records: Dict[str, np.ndarray] = {}
    for prefix, net in networks.items():
        records.update(net.state_dict(prefix=f"{prefix}."))
    for prefix, opt in (optimizers or {}).items():
        records.update(opt.state_dict(prefix=f"{prefix}."))
    tc.save_checkpoint(path, records)
    logger.info("Saved checkpoint %s (%d records)", path, len(records))


def load_networks(path: str, networks: Dict[str, Network], optimizers: Optional[Dict[str, Adam]] = None) -> None:
    records = tc.load_checkpoint(path)
    for prefix, net in networks.items():
        net.load_state_dict(records, prefix=f"{prefix}.")
    for prefix, opt in (optimizers or {}).items():
        opt.load_state_dict(records, prefix=f"{prefix}.")
