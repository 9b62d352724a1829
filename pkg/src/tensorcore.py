"""
Reverse-mode automatic differentiation over dense float64 tensors.

Operations record a node into the active graph (see `record`) whenever one of
their operands requires a gradient. `Graph.backward` walks the nodes in exact
reverse recording order; a graph may be walked once.
"""
import hashlib
import logging
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from src.errors import (
    CheckpointError,
    GraphError,
    MissingGradientError,
    NumericsError,
    ShapeError,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DFORGE01"
SCORE_CLAMP = 1e-7
SCORE_TOLERANCE = 1e-9

_local = threading.local()


def _graph_stack() -> list:
    stack = getattr(_local, "graphs", None)
    if stack is None:
        stack = []
        _local.graphs = stack
    return stack


def active_graph() -> Optional["Graph"]:
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """
    n-dimensional float64 array that may take part in a computation graph.

    Args:
        data: Array-like contents; converted to float64.
        requires_grad (bool): Marks a trainable leaf.
        name (str): Optional label used in error messages and checkpoints.
    """

    __slots__ = ("data", "grad", "node", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, copy: bool = True):
        self.data = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional["Node"] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, copy=False)

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeError("backward", "gradient shape", self.data.shape, grad.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    def backward(self, gradient: Optional[np.ndarray] = None) -> None:
        if self.node is None:
            raise GraphError("backward() called on a tensor that was not recorded in a graph")
        self.node.graph.backward(self, gradient)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


TensorLike = Union[Tensor, float, int, np.ndarray]


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn", "graph")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable, graph: "Graph"):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn
        self.graph = graph


class Graph:
    """Append-only record of operations; single use."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.consumed = False

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable) -> None:
        if self.consumed:
            raise GraphError(f"cannot record '{op}' into a graph that already ran backward()")
        node = Node(op, inputs, output, backward_fn, self)
        self.nodes.append(node)
        output.node = node
        output.requires_grad = True

    def backward(self, root: Tensor, gradient: Optional[np.ndarray] = None) -> None:
        if self.consumed:
            raise GraphError("backward() may be called at most once per recorded graph")
        if root.node is None or root.node.graph is not self:
            raise GraphError("root tensor does not belong to this graph")
        seed = np.ones_like(root.data) if gradient is None else np.asarray(gradient, dtype=np.float64)
        if seed.shape != root.shape:
            raise ShapeError("backward", "seed gradient", root.shape, seed.shape)
        root.grad = seed.copy()
        for node in reversed(self.nodes):
            upstream = node.output.grad
            if upstream is None:
                continue
            grads = node.backward_fn(upstream)
            for tensor, grad in zip(node.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                tensor.accumulate_grad(grad)
        self.consumed = True
        logger.debug("backward over %d recorded nodes", len(self.nodes))


@contextmanager
def record():
    """Activate a fresh graph for the current thread."""
    graph = Graph()
    stack = _graph_stack()
    stack.append(graph)
    try:
        yield graph
    finally:
        stack.pop()


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, copy=False)
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        graph.record(op, inputs, out, backward_fn)
    return out


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.full(shape, grad.sum())


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    # only equal shapes or a size-1 operand
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(op, "operand shape", a.shape, b.shape)


# --- elementwise ---------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _result("mul", a.data * b.data, (a, b),
                   lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)

    def backward(g):
        return (_reduce_to(g / b.data, a.shape),
                _reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return _result("div", a.data / b.data, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result("scale", x.data * factor, (x,), lambda g: (g * factor,))


def neg(x: Tensor) -> Tensor:
    return _result("neg", -x.data, (x,), lambda g: (-g,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    positive = x.data > 0
    out = np.where(positive, x.data, slope * x.data)
    return _result("leaky_relu", out, (x,), lambda g: (np.where(positive, g, slope * g),))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def log(x: Tensor) -> Tensor:
    return _result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _result("exp", e, (x,), lambda g: (g * e,))


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)
    return _result("sqrt", r, (x,), lambda g: (g / (2.0 * r),))


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise Huber loss with unit transition point."""
    ax = np.abs(x.data)
    out = np.where(ax < 1.0, 0.5 * x.data * x.data, ax - 0.5)
    return _result("smooth_l1", out, (x,), lambda g: (g * np.clip(x.data, -1.0, 1.0),))


# --- reductions ----------------------------------------------------------

def _normalize_axes(axis, ndim) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return _result("sum", np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean", "reduced extent", "> 0", 0)
    return scale(sum(x, axis=axes), 1.0 / count)


def binary_cross_entropy(score: Tensor, target) -> Tensor:
    """
    Mean binary cross-entropy of probabilities against 0/1 targets.

    Scores are clamped to [1e-7, 1 - 1e-7] before the logarithms.

    Args:
        score (Tensor): Probabilities in [0, 1].
        target (float or array): 0/1 labels, scalar or same shape as score.

    Returns:
        Tensor: Scalar mean loss.
    """
    if score.size == 0:
        raise NumericsError("binary_cross_entropy of an empty score set")
    if not np.all(np.isfinite(score.data)):
        raise NumericsError("binary_cross_entropy received non-finite scores")
    if score.data.min() < -SCORE_TOLERANCE or score.data.max() > 1.0 + SCORE_TOLERANCE:
        raise NumericsError(
            f"scores must lie in [0, 1]; got range [{score.data.min()}, {score.data.max()}]")
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), score.shape)
    s = np.clip(score.data, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    n = score.size
    value = -(t * np.log(s) + (1.0 - t) * np.log(1.0 - s)).sum() / n

    def backward(g):
        return (g * (-(t / s) + (1.0 - t) / (1.0 - s)) / n,)

    return _result("binary_cross_entropy", np.asarray(value), (score,), backward)


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean BCE evaluated directly on logits (stable for large magnitudes)."""
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), logits.shape)
    x = logits.data
    n = logits.size
    value = (np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))).sum() / n
    return _result("bce_with_logits", np.asarray(value), (logits,),
                   lambda g: (g * (expit(x) - t) / n,))


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _result("log_softmax", out, (x,),
                   lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


# --- shape ---------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", "element count", x.size, shape) from None
    return _result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("permute", "axes", f"a permutation of {x.ndim} axes", axes)
    inverse = tuple(np.argsort(axes))
    return _result("permute", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose", "rank", 2, a.ndim)
    return _result("transpose", a.data.T, (a,), lambda g: (g.T,))


def getitem(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, key, g)
        return (grad,)

    return _result("getitem", np.array(out), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        for d in range(t.ndim):
            if d != axis and t.shape[d] != tensors[0].shape[d]:
                raise ShapeError("concat", f"axis {d}", tensors[0].shape[d], t.shape[d])
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _result("stack", out, tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# --- linear algebra ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul", "rank", 2, (a.ndim, b.ndim))
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", "inner dimension", a.shape[1], b.shape[0])
    return _result("matmul", a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def trace(a: Tensor) -> Tensor:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("trace", "square matrix", "n x n", a.shape)
    n = a.shape[0]
    return _result("trace", np.asarray(np.trace(a.data)), (a,), lambda g: (g * np.eye(n),))


def eye(n: int) -> Tensor:
    return Tensor(np.eye(n), copy=False)


# --- convolution and resampling -----------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Cross-correlation of an NCHW batch with an OIKK kernel.

    Args:
        x (Tensor): Input batch, N x C x H x W.
        kernel (Tensor): Filters, O x C x K x K.
        bias (Tensor): Optional per-output-channel offsets of length O.
        stride (int): Positive step between windows.
        padding (int): Zero padding on every spatial border.

    Returns:
        Tensor: N x O x Ho x Wo.
    """
    if x.ndim != 4:
        raise ShapeError("conv2d", "input rank", 4, x.ndim)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError("conv2d", "kernel shape", "O x I x K x K", kernel.shape)
    n, c, h, w = x.shape
    o, ci, k, _ = kernel.shape
    if c != ci:
        raise ShapeError("conv2d", "input channels", ci, c)
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d", "stride/padding", ">= 1 / >= 0", (stride, padding))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d", "output spatial extent", "> 0", (ho, wo))
    if bias is not None and bias.shape != (o,):
        raise ShapeError("conv2d", "bias length", o, bias.shape)

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    kmat = kernel.data.reshape(o, c * k * k)
    out = cols @ kmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g_flat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        grad_kernel = (g_flat.T @ cols).reshape(kernel.shape)
        dcols = (g_flat @ kmat).reshape(n, ho, wo, c, k, k)
        grad_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, padding:padding + h, padding:padding + w]
        grad_bias = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return grad_x, grad_kernel, grad_bias

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _result("conv2d", out, inputs, backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return _result("upsample_nearest", out, (x,),
                   lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),))


def roi_resize(x: Tensor, rois: np.ndarray, size: int) -> Tensor:
    """
    Bilinear crop-and-resize of boxes out of an NCHW batch.

    Each row of `rois` is (batch index, x_min, y_min, x_max, y_max) in pixel
    coordinates, where pixel (i, j) covers [j, j+1) x [i, i+1). Output samples
    sit at the centres of a size x size grid laid over the box.
    """
    n, c, h, w = x.shape
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 5)
    k = rois.shape[0]
    out = np.zeros((k, c, size, size))
    taps = []
    steps = np.arange(size) + 0.5
    for r, (b, x0, y0, x1, y1) in enumerate(rois):
        b = int(b)
        xs = np.clip(x0 + steps * (x1 - x0) / size - 0.5, 0.0, w - 1)
        ys = np.clip(y0 + steps * (y1 - y0) / size - 0.5, 0.0, h - 1)
        ix0 = np.floor(xs).astype(int)
        iy0 = np.floor(ys).astype(int)
        ix1 = np.minimum(ix0 + 1, w - 1)
        iy1 = np.minimum(iy0 + 1, h - 1)
        wx = (xs - ix0)[None, :]
        wy = (ys - iy0)[:, None]
        corners = (
            (iy0[:, None], ix0[None, :], (1 - wy) * (1 - wx)),
            (iy0[:, None], ix1[None, :], (1 - wy) * wx),
            (iy1[:, None], ix0[None, :], wy * (1 - wx)),
            (iy1[:, None], ix1[None, :], wy * wx),
        )
        img = x.data[b]
        for iy, ix, weight in corners:
            out[r] += img[:, iy, ix] * weight
        taps.append((b, corners))

    def backward(g):
        grad = np.zeros_like(x.data)
        for r, (b, corners) in enumerate(taps):
            for iy, ix, weight in corners:
                iy_b, ix_b = np.broadcast_arrays(iy, ix)
                np.add.at(grad[b], (slice(None), iy_b, ix_b), g[r] * weight)
        return (grad,)

    return _result("roi_resize", out, (x,), backward)


# --- training utilities ---------------------------------------------------

def zero_grad(params: Dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


@contextmanager
def frozen(*param_sets: Dict[str, Tensor]):
    """Temporarily stop gradients from reaching the given parameters."""
    saved = []
    for params in param_sets:
        for p in params.values():
            saved.append((p, p.requires_grad))
            p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag


def parameter_digest(params: Dict[str, Tensor]) -> str:
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(params[name].data).tobytes())
    return digest.hexdigest()


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                    seed: int = 0, floor: float = 1e-2) -> float:
    """
    Compare analytic gradients against central finite differences.

    Non-scalar outputs are projected onto fixed random weights first.

    Args:
        fn: Function of the input tensors returning a Tensor.
        inputs: Tensors to differentiate with respect to.
        h (float): Finite-difference step.
        seed (int): Seed for the projection weights.
        floor (float): Lower bound on the relative-error denominator.

    Returns:
        float: Maximum elementwise relative error over all inputs.
    """
    output = fn(*inputs)
    weights = np.random.default_rng(seed).standard_normal(output.shape)

    def objective():
        out = fn(*inputs)
        return sum(mul(out, Tensor(weights, copy=False)))

    saved = [t.requires_grad for t in inputs]
    for t in inputs:
        t.data = np.array(t.data, dtype=np.float64, order="C")
        t.grad = None
        t.requires_grad = True
    with record() as graph:
        loss = objective()
    graph.backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    for t, flag in zip(inputs, saved):
        t.requires_grad = flag
        t.grad = None

    worst = 0.0
    for t, grad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = objective().item()
            flat[i] = original - h
            minus = objective().item()
            flat[i] = original
            numeric[i] = (plus - minus) / (2.0 * h)
        a = grad.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        if flat.size:
            worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst


# --- optimizer -----------------------------------------------------------

@dataclass
class AdamState:
    m1: Dict[str, np.ndarray] = field(default_factory=dict)
    m2: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Dict[str, Tensor], lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 1e-4, state: Optional[AdamState] = None) -> AdamState:
    """
    Apply one Adam update in place.

    Weight decay is folded into the gradient (grad += wd * param) before the
    moment update. Moment buffers persist in the returned state.
    """
    state = state if state is not None else AdamState()
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradientError(name)
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad + weight_decay * p.data
        m1 = state.m1.get(name)
        m2 = state.m2.get(name)
        if m1 is None:
            m1 = np.zeros_like(p.data)
            m2 = np.zeros_like(p.data)
        m1 = beta1 * m1 + (1.0 - beta1) * g
        m2 = beta2 * m2 + (1.0 - beta2) * g * g
        m1_hat = m1 / (1.0 - beta1 ** t)
        m2_hat = m2 / (1.0 - beta2 ** t)
        p.data -= lr * m1_hat / (np.sqrt(m2_hat) + eps)
        state.m1[name] = m1
        state.m2[name] = m2
    return state


class Adam:
    """Adam optimizer bound to a named parameter set."""

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-4, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState()

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        adam_step(self.params, self.lr, self.betas[0], self.betas[1], self.eps, self.weight_decay, self.state)

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            if name in self.state.m1:
                out[f"{prefix}{name}.m1"] = self.state.m1[name]
                out[f"{prefix}{name}.m2"] = self.state.m2[name]
        out[f"{prefix}__adam_step__"] = np.array([float(self.state.step)])
        return out

    def load_state_dict(self, records: Dict[str, np.ndarray], prefix: str = "") -> None:
        for name in self.params:
            if f"{prefix}{name}.m1" in records:
                self.state.m1[name] = np.array(records[f"{prefix}{name}.m1"])
                self.state.m2[name] = np.array(records[f"{prefix}{name}.m2"])
        step = records.get(f"{prefix}__adam_step__")
        self.state.step = int(step[0]) if step is not None else 0


# --- checkpoints ---------------------------------------------------------

def save_checkpoint(path: str, records: Dict[str, Union[Tensor, np.ndarray]]) -> None:
    """
    Write named arrays in the DFORGE01 binary format.

    Layout: magic, then per record a u64 name length, UTF-8 name, u64 rank,
    u64 extents and little-endian float64 data.
    """
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, value in records.items():
            arr = np.array(value.data if isinstance(value, Tensor) else value, dtype="<f8", order="C")
            encoded = name.encode("utf-8")
            fh.write(np.array([len(encoded)], dtype="<u8").tobytes())
            fh.write(encoded)
            fh.write(np.array([arr.ndim, *arr.shape], dtype="<u8").tobytes())
            fh.write(arr.tobytes())
    os.replace(tmp_path, path)


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: missing DFORGE01 magic")
    records = {}
    offset = len(CHECKPOINT_MAGIC)

    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {offset}")
        chunk = blob[offset:offset + count]
        offset += count
        return chunk

    while offset < len(blob):
        name_len = int(np.frombuffer(take(8), dtype="<u8")[0])
        name = take(name_len).decode("utf-8")
        rank = int(np.frombuffer(take(8), dtype="<u8")[0])
        shape = tuple(int(v) for v in np.frombuffer(take(8 * rank), dtype="<u8")) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        records[name] = data
    return records

