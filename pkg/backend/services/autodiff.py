"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed inside an active ``ComputationRecord`` are appended to it in
execution order; ``backward`` walks that list once in reverse. Outside a record
the same functions just compute values, which is what evaluation uses.
"""

import logging
import struct
import threading
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from shared.config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from shared.exceptions import DataError, NumericalError

logger = logging.getLogger(__name__)

_local = threading.local()


def _record_stack() -> List["ComputationRecord"]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class Tensor:
    """A float64 array with an optional accumulated gradient"""
    __slots__ = ("values", "grad", "requires_grad", "name", "record", "node_id", "softmax_of")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.record: Optional[ComputationRecord] = None
        self.node_id: Optional[int] = None
        self.softmax_of: Optional[Tensor] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def zero_grad(self):
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class ComputationRecord:
    """Ordered list of executed primitive ops, consumed by one backward pass"""

    def __init__(self):
        self.nodes: List[_Node] = []
        self.consumed = False

    def __enter__(self):
        _record_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _record_stack().remove(self)
        return False

    @property
    def op_names(self) -> List[str]:
        return [node.op for node in self.nodes]

    def clear(self):
        self.nodes = []


def current_record() -> Optional[ComputationRecord]:
    stack = _record_stack()
    return stack[-1] if stack else None


def apply_op(
    op: str,
    values: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap a forward result, recording it when an input needs gradients."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        bad = int(np.size(values) - np.count_nonzero(np.isfinite(values)))
        raise NumericalError(f"{op} produced {bad} non-finite values")

    out = Tensor(values)
    record = current_record()
    if record is not None and any(t.requires_grad for t in inputs):
        if record.consumed:
            raise RuntimeError("computation record already consumed by backward")
        out.requires_grad = True
        out.record = record
        out.node_id = len(record.nodes)
        record.nodes.append(_Node(op, out, tuple(inputs), backward))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad of every tensor reachable from a scalar loss"""
    if loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    record = loss.record
    if record is None:
        raise RuntimeError("loss is not attached to a computation record")
    if record.consumed:
        raise RuntimeError("backward already called on this computation record")
    record.consumed = True

    loss.grad = np.ones_like(loss.values)
    for node in reversed(record.nodes[: loss.node_id + 1]):
        grad_out = node.out.grad
        if grad_out is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward(grad_out)):
            if grad is None or not tensor.requires_grad:
                continue
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def parameter(values, name: Optional[str] = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


# Elementwise and reductions
def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ValueError(f"add shape mismatch {x.shape} vs {y.shape}")
    return apply_op("add", x.values + y.values, (x, y), lambda g: (g, g))


def mul(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ValueError(f"mul shape mismatch {x.shape} vs {y.shape}")
    xv, yv = x.values, y.values
    return apply_op("mul", xv * yv, (x, y), lambda g: (g * yv, g * xv))


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return apply_op("mul_scalar", x.values * c, (x,), lambda g: (g * c,))


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return apply_op("sum", np.sum(x.values), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.values.size
    return apply_op("mean", np.mean(x.values), (x,), lambda g: (np.full(shape, float(g) / n),))


def relu(x: Tensor) -> Tensor:
    active = x.values > 0
    return apply_op("relu", np.where(active, x.values, 0.0), (x,), lambda g: (g * active,))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    old = x.shape
    return apply_op("reshape", x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


# Convolutional building blocks
def conv2d(x: Tensor, w: Tensor, b: Tensor, pad: int = 0, stride: int = 1) -> Tensor:
    """Cross-correlation of x[B,C,H,W] with w[K,C,kh,kw] plus bias b[K]."""
    if x.values.ndim != 4 or w.values.ndim != 4 or b.values.ndim != 1:
        raise ValueError("conv2d expects x[B,C,H,W], w[K,C,kh,kw], b[K]")
    batch, channels, height, width = x.shape
    kernels, w_channels, kh, kw = w.shape
    if w_channels != channels or b.shape[0] != kernels:
        raise ValueError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernels must have odd size")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d needs stride >= 1 and pad >= 0")
    span_h = height + 2 * pad - kh
    span_w = width + 2 * pad - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ValueError(f"conv2d output size is not integral for input {x.shape}")
    out_h = span_h // stride + 1
    out_w = span_w // stride + 1

    xp = np.pad(x.values, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    wv = w.values
    out = np.tensordot(windows, wv, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + b.values[None, :, None, None]

    def _backward(g):
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = g.sum(axis=(0, 2, 3))
        grad_xp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, wv[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                grad_xp[:, :, i:i + stride * (out_h - 1) + 1:stride,
                        j:j + stride * (out_w - 1) + 1:stride] += contrib
        grad_x = grad_xp[:, :, pad:pad + height, pad:pad + width]
        return grad_x, grad_w, grad_b

    return apply_op("conv2d", out, (x, w, b), _backward)


def maxpool2x2(x: Tensor) -> Tensor:
    batch, channels, height, width = x.shape
    if height % 2 or width % 2:
        raise ValueError(f"maxpool2x2 needs even spatial size, got {x.shape}")
    blocks = (
        x.values.reshape(batch, channels, height // 2, 2, width // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(batch, channels, height // 2, width // 2, 4)
    )
    # argmax returns the first maximum in raster order within each block
    arg = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, arg, axis=-1)[..., 0]

    def _backward(g):
        grad_blocks = np.zeros_like(blocks)
        np.put_along_axis(grad_blocks, arg, g[..., None], axis=-1)
        grad_x = (
            grad_blocks.reshape(batch, channels, height // 2, width // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(batch, channels, height, width)
        )
        return (grad_x,)

    return apply_op("maxpool2x2", out, (x,), _backward)


def upsample2x_nearest(x: Tensor) -> Tensor:
    batch, channels, height, width = x.shape
    out = np.repeat(np.repeat(x.values, 2, axis=2), 2, axis=3)

    def _backward(g):
        return (g.reshape(batch, channels, height, 2, width, 2).sum(axis=(3, 5)),)

    return apply_op("upsample2x_nearest", out, (x,), _backward)


def concat_channels(x: Tensor, y: Tensor) -> Tensor:
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ValueError(f"concat_channels shape mismatch {x.shape} vs {y.shape}")
    split = x.shape[1]
    out = np.concatenate([x.values, y.values], axis=1)
    return apply_op("concat_channels", out, (x, y), lambda g: (g[:, :split], g[:, split:]))


def pad2d(x: Tensor, bottom: int, right: int) -> Tensor:
    """Zero-pad the two trailing spatial axes at the bottom/right."""
    height, width = x.shape[-2:]
    widths = [(0, 0)] * (x.values.ndim - 2) + [(0, bottom), (0, right)]
    out = np.pad(x.values, widths)
    return apply_op("pad2d", out, (x,), lambda g: (g[..., :height, :width],))


def crop2d(x: Tensor, height: int, width: int) -> Tensor:
    shape = x.shape

    def _backward(g):
        grad = np.zeros(shape)
        grad[..., :height, :width] = g
        return (grad,)

    return apply_op("crop2d", x.values[..., :height, :width], (x,), _backward)


# Losses
def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    out = apply_op("softmax_rows", p, (x,), _backward)
    out.softmax_of = x
    return out


def _one_hot_targets(target: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    target = np.asarray(target)
    if target.shape != shape[:-1]:
        raise ValueError(f"target shape {target.shape} does not match rows {shape[:-1]}")
    num_classes = shape[-1]
    if target.size and (target.min() < 1 or target.max() > num_classes):
        raise ValueError(f"targets must lie in 1..{num_classes}")
    return np.eye(num_classes)[target.astype(np.int64) - 1]


def cross_entropy_rows(p: Tensor, target: np.ndarray) -> Tensor:
    """Mean over rows of -log p[target]; targets are 1-based.

    When p comes from softmax_rows the loss is evaluated from the logits and its
    gradient goes straight to them as (p - onehot) / rows.
    """
    onehot = _one_hot_targets(target, p.shape)
    rows = max(1, int(np.prod(p.shape[:-1])))

    logits = p.softmax_of
    if logits is not None:
        shifted = logits.values - logits.values.max(axis=-1, keepdims=True)
        log_p = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        loss = -(onehot * log_p).sum() / rows
        probs = p.values
        return apply_op(
            "softmax_cross_entropy", loss, (logits,),
            lambda g: (float(g) * (probs - onehot) / rows,),
        )

    picked = (p.values * onehot).sum(axis=-1)
    with np.errstate(divide="ignore"):
        loss = -np.log(picked).sum() / rows
    pv = p.values

    def _backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            grad = np.where(onehot > 0, -1.0 / (pv * rows), 0.0)
        return (float(g) * grad,)

    return apply_op("cross_entropy_rows", loss, (p,), _backward)


def sigmoid_bce(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against a {0,1} target."""
    y = np.asarray(target, dtype=np.float64)
    if y.shape != logits.shape:
        raise ValueError(f"target shape {y.shape} does not match logits {logits.shape}")
    x = logits.values
    # softplus(x) - y*x, written to stay finite for large |x|
    loss = np.mean(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))) - y * x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    n = x.size
    return apply_op("sigmoid_bce", loss, (logits,), lambda g: (float(g) * (sig - y) / n,))


# Optimization
def adam_update(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, Optional[np.ndarray]],
    state: Mapping[str, Tuple[np.ndarray, np.ndarray]],
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    t: int,
) -> Tuple[Dict[str, np.ndarray], Dict[str, Tuple[np.ndarray, np.ndarray]]]:
    """One bias-corrected Adam step; returns new params and (m, v) state."""
    if t < 1:
        raise ValueError(f"Adam step counter must be >= 1, got {t}")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_params = {}
    new_state = {}
    for key, value in params.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(value)
        if g.shape != value.shape:
            raise ValueError(f"gradient for {key} has shape {g.shape}, expected {value.shape}")
        m, v = state.get(key, (np.zeros_like(value), np.zeros_like(value)))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[key] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_state[key] = (m, v)
    return new_params, new_state


class Adam:
    """Adam over a dict of parameter tensors, reading their .grad"""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
        self.t = 0

    def step(self, params: Dict[str, Tensor]) -> None:
        self.t += 1
        values = {k: p.values for k, p in params.items()}
        grads = {k: p.grad for k, p in params.items()}
        new_values, self.state = adam_update(
            values, grads, self.state, self.lr, self.beta1, self.beta2, self.eps, self.t
        )
        for key, p in params.items():
            p.values = new_values[key]

    def state_arrays(self, prefix: str = "") -> Dict[str, np.ndarray]:
        arrays = {}
        for key, (m, v) in self.state.items():
            arrays[f"{prefix}{key}.adam_m"] = m
            arrays[f"{prefix}{key}.adam_v"] = v
        arrays[f"{prefix}adam_t"] = np.array(float(self.t))
        return arrays

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
        self.t = int(arrays.get(f"{prefix}adam_t", np.array(0.0)))
        self.state = {}
        for name, m in arrays.items():
            if name.startswith(prefix) and name.endswith(".adam_m"):
                key = name[len(prefix):-len(".adam_m")]
                self.state[key] = (m, arrays[f"{prefix}{key}.adam_v"])


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


# Testing harness
def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences over every coordinate of x."""
    point = Tensor(x.values.copy(), requires_grad=True)
    with ComputationRecord():
        loss = f(point)
    backward(loss)
    analytic = point.grad if point.grad is not None else np.zeros_like(point.values)

    worst = 0.0
    for idx in np.ndindex(point.shape):
        original = point.values[idx]
        point.values[idx] = original + h
        plus = float(f(point).values)
        point.values[idx] = original - h
        minus = float(f(point).values)
        point.values[idx] = original
        numeric = (plus - minus) / (2.0 * h)
        a = float(analytic[idx])
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst


# Checkpoints
def save_checkpoint(path: Path, arrays: Mapping[str, np.ndarray]) -> None:
    """magic, version, count, then per array: name length, name, rank, dims, float64 LE values"""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for name, value in arrays.items():
        value = np.asarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(value.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: Path) -> Dict[str, np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read checkpoint {path}: {e}") from e
    if not data.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path} is not a checkpoint file")

    offset = len(CHECKPOINT_MAGIC)
    try:
        version, count = struct.unpack_from("<II", data, offset)
        offset += 8
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        arrays: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", data, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}Q", data, offset)
            offset += 8 * rank
            size = int(np.prod(shape)) if rank else 1
            arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=offset).reshape(shape).astype(np.float64)
            offset += 8 * size
    except (struct.error, ValueError) as e:
        raise DataError(f"truncated checkpoint {path}: {e}") from e
    return arrays
