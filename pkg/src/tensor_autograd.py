"""
Dense tensors with reverse-mode automatic differentiation.

Every primitive records itself on the graph when grad mode is on and at
least one operand requires a gradient. ``backward`` walks the recorded
graph once in reverse topological order and accumulates gradients
additively, so a tensor consumed twice receives the sum of both paths.

All data is held as float64 numpy arrays.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import Config
from src.errors import DimensionError, DomainError, UsageError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same storage, no graph history, no gradient."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(
    data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str
) -> Tensor:
    requires = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out.op = op
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the axes numpy broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


@dataclass
class ComputationTape:
    """Recorded primitives reachable from one output, parents first."""

    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "ComputationTape":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(nodes=order)

    def run_backward(self, root: Tensor, seed: np.ndarray) -> None:
        pending = {id(root): seed}
        for node in reversed(self.nodes):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            if node._backward is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward() on a tensor that is not connected to the tape")
    tape = ComputationTape.record(loss)
    tape.run_backward(loss, np.ones_like(loss.data))


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")

    def grad_fn(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")

    def grad_fn(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def grad_fn(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    out = a.data / b.data

    def grad_fn(g: np.ndarray):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _make(out, (a, b), grad_fn, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def grad_fn(g: np.ndarray):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), grad_fn, "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def grad_fn(g: np.ndarray):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), grad_fn, "tanh")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def grad_fn(g: np.ndarray):
        return (g * 0.5 / out,)

    return _make(out, (x,), grad_fn, "sqrt")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); clamped entries pass no gradient."""
    mask = x.data > floor

    def grad_fn(g: np.ndarray):
        return (g * mask,)

    return _make(np.where(mask, x.data, floor), (x,), grad_fn, "clamp_min")


def reduce_sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), grad_fn, "reduce_sum")


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def grad_fn(g: np.ndarray):
        return (g.reshape(x.shape),)

    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: {x.shape} -> {shape}") from e
    return _make(data, (x,), grad_fn, "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse everything but the batch axis."""
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, grad_fn, "concat")


# ---------------------------------------------------------------------------
# dense and convolutional primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")

    def grad_fn(g: np.ndarray):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), grad_fn, "matmul")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation, NCHW input and OCKK kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d operands, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: stride={stride} padding={padding}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {kc}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    out = np.tensordot(cols, kernel.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)

    def grad_fn(g: np.ndarray):
        d_kernel = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        d_cols = np.tensordot(g, kernel.data, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        d_xp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                d_xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d_cols[:, :, i, j]
        return d_xp[:, :, padding:padding + h, padding:padding + w], d_kernel

    return _make(np.ascontiguousarray(out), (x, kernel), grad_fn, "conv2d")


def maxpool2d(x: Tensor, size: int) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"maxpool2d: {h}x{w} not divisible by {size}")
    oh, ow = h // size, w // size
    windows = x.data.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, oh, ow, size * size)
    winner = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, winner[..., None], axis=-1)[..., 0]

    def grad_fn(g: np.ndarray):
        routed = np.zeros_like(windows)
        np.put_along_axis(routed, winner[..., None], g[..., None], axis=-1)
        routed = routed.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(n, c, h, w),)

    return _make(out, (x,), grad_fn, "maxpool2d")


# ---------------------------------------------------------------------------
# probabilities and losses


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax on plain arrays, max-subtracted."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_targets(targets: np.ndarray, logits_shape: Tuple[int, ...]) -> None:
    if targets.shape != logits_shape:
        raise DimensionError(f"cross entropy: targets {targets.shape} vs logits {logits_shape}")
    if (targets < 0).any():
        raise DomainError("cross entropy: negative target probability")
    if not np.allclose(targets.sum(axis=1), 1.0, atol=1e-6, rtol=0.0):
        raise DomainError("cross entropy: target rows must sum to 1")


def cross_entropy_rows(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-row soft-target cross entropy on plain arrays."""
    return -(targets * log_softmax(logits)).sum(axis=1)


def softmax_cross_entropy(
    logits: Tensor, target_probs: ArrayLike, reduction: str = "mean"
) -> Tensor:
    """Soft-target cross entropy; targets are constants."""
    if logits.ndim != 2:
        raise DimensionError(f"cross entropy expects [n, K] logits, got {logits.shape}")
    targets = np.asarray(
        target_probs.data if isinstance(target_probs, Tensor) else target_probs,
        dtype=np.float64,
    )
    if reduction not in ("mean", "sum"):
        raise UsageError(f"unknown reduction {reduction!r}")
    _check_targets(targets, logits.shape)
    rows = cross_entropy_rows(logits.data, targets)
    scale = 1.0 / logits.shape[0] if reduction == "mean" else 1.0
    probs = softmax(logits.data)
    mass = targets.sum(axis=1, keepdims=True)

    def grad_fn(g: np.ndarray):
        return (g * scale * (probs * mass - targets),)

    return _make(np.asarray(rows.sum() * scale), (logits,), grad_fn, "softmax_cross_entropy")


def one_hot(labels: Sequence[int], class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], class_count))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = Config.ADAM_BETA1
    beta2: float = Config.ADAM_BETA2
    epsilon: float = Config.ADAM_EPSILON
    step_count: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 1e-3) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(state: AdamState, params: Sequence[Tensor]) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise UsageError(f"Adam state tracks {len(state.m)} tensors, got {len(params)}")
    for index, p in enumerate(params):
        if p.grad is None:
            raise UsageError(f"Adam step: parameter {index} has no gradient")

    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        p.zero_grad()


@dataclass
class SgdState:
    lr: float = 0.1
    momentum: float = 0.0
    velocity: List[np.ndarray] = field(default_factory=list)


def sgd_step(state: SgdState, params: Sequence[Tensor]) -> None:
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    for index, p in enumerate(params):
        if p.grad is None:
            raise UsageError(f"SGD step: parameter {index} has no gradient")
    for p, vel in zip(params, state.velocity):
        vel *= state.momentum
        vel += p.grad
        p.data -= state.lr * vel
        p.zero_grad()
