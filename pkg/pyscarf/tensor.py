"""
Dense [C, H, W] tensors with tape based reverse-mode differentiation.

Every operation records a node on the active :class:`Tape` when one of its
inputs requires a gradient. Tensors are never mutated after construction.
"""
import threading
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
from attr import attrib
from attr import dataclass

from pyscarf.exceptions import ArgumentError
from pyscarf.exceptions import GradientError
from pyscarf.exceptions import ShapeError
from pyscarf.models.common import Config

_local = threading.local()

Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def default_dtype():
    return Config.instance().dtype


class Tensor:
    """
    Immutable dense array.

    :param data: Array like values, cast to the configured precision
    :param requires_grad: Leaf tensors that should receive gradients
    """

    __slots__ = ("data", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        array = np.array(data, dtype=dtype or default_dtype())
        array.flags.writeable = False
        self.data = array
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.tape: Optional["Tape"] = None

    @property
    def dims(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(dims={self.dims}, requires_grad={self.requires_grad})"

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> "Tensor":
        return cls(np.zeros(tuple(dims), dtype=default_dtype()))

    @classmethod
    def ones(cls, dims: Sequence[int]) -> "Tensor":
        return cls(np.ones(tuple(dims), dtype=default_dtype()))


@dataclass
class Node:
    id: int
    op: str
    inputs: Tuple[Optional[int], ...]
    backward: Optional[Backward] = attrib(repr=False)


class Gradients:
    """Gradients of one backward pass, indexed by tensor."""

    def __init__(self, tape: "Tape", values: Dict[int, np.ndarray]):
        self.tape = tape
        self.values = values

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        node_id = self.tape.lookup(tensor)
        if node_id is not None and node_id in self.values:
            return self.values[node_id]
        return np.zeros(tensor.dims, dtype=tensor.data.dtype)

    def __contains__(self, tensor: Tensor) -> bool:
        return self.tape.lookup(tensor) in self.values


class Tape:
    """
    Single threaded operation record. Use as a context manager to make it the
    active tape of the current thread.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.gradients: Dict[int, np.ndarray] = {}
        self._leaves: Dict[int, int] = {}
        self._keep: List[Tensor] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        stack = _tapes()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tapes().pop()

    def reset(self):
        """Clear the recorded graph and any computed gradients."""
        self.nodes.clear()
        self.gradients = {}
        self._leaves.clear()
        self._keep.clear()
        self._consumed = False

    def lookup(self, tensor: Tensor) -> Optional[int]:
        if tensor.tape is self:
            return tensor.node_id
        return self._leaves.get(id(tensor))

    def watch(self, tensor: Tensor) -> int:
        node_id = self.lookup(tensor)
        if node_id is None:
            node_id = self._append("leaf", (), None)
            self._leaves[id(tensor)] = node_id
            self._keep.append(tensor)
        return node_id

    def record(
        self, op: str, inputs: Sequence[Tensor], out: Tensor, backward: Backward
    ) -> Tensor:
        ids = tuple(
            self.watch(t) if (t.requires_grad or t.tape is self) else None
            for t in inputs
        )
        out.node_id = self._append(op, ids, backward)
        out.tape = self
        out.requires_grad = True
        return out

    def backward(self, loss: Tensor) -> Gradients:
        if self._consumed:
            raise GradientError("Backward already ran on this tape, reset it first.")

        grads: Dict[int, np.ndarray] = {
            loss.node_id: np.ones(loss.dims, dtype=loss.data.dtype)
        }
        for node in reversed(self.nodes[: loss.node_id + 1]):
            grad = grads.get(node.id)
            if grad is None or node.backward is None:
                continue

            for input_id, input_grad in zip(node.inputs, node.backward(grad)):
                if input_id is None or input_grad is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + input_grad
                else:
                    grads[input_id] = input_grad

        self._consumed = True
        self.gradients = {i: g for i, g in grads.items() if self.nodes[i].op == "leaf"}
        return Gradients(self, self.gradients)

    def _append(self, op, inputs, backward) -> int:
        node_id = len(self.nodes)
        self.nodes.append(Node(node_id, op, inputs, backward))
        return node_id


def _tapes() -> List[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional[Tape]:
    stack = _tapes()
    return stack[-1] if stack else None


def _result(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward: Backward):
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward)
    return out


def backward(loss: Tensor) -> Gradients:
    """
    Run the reverse sweep from a scalar loss.

    :param loss: Scalar tensor produced on an active tape
    :rtype: :class:`~pyscarf.tensor.Gradients`
    :raise: :class:`~pyscarf.exceptions.GradientError`
    """
    if loss.size != 1:
        raise GradientError(f"Backward needs a scalar loss, got dims {loss.dims}.")
    if loss.tape is None or loss.node_id is None:
        raise GradientError("The loss is detached from any tape.")
    return loss.tape.backward(loss)


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.dims == b.dims:
        return "same"
    if a.data.ndim == 3 and b.data.ndim == 1 and b.dims[0] == a.dims[0]:
        return "b"
    if b.data.ndim == 3 and a.data.ndim == 1 and a.dims[0] == b.dims[0]:
        return "a"
    raise ShapeError(f"Cannot {op} dims {a.dims} and {b.dims}.", a.dims, b.dims)


def _expand(x: np.ndarray, kind: str, which: str) -> np.ndarray:
    return x[:, None, None] if kind == which else x


def _reduce(g: np.ndarray, kind: str, which: str) -> np.ndarray:
    return g.sum(axis=(1, 2)) if kind == which else g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise sum, a length C vector broadcasts over [C, H, W]."""
    kind = _broadcast_kind(a, b, "add")
    data = _expand(a.data, kind, "a") + _expand(b.data, kind, "b")

    def grad(g):
        return _reduce(g, kind, "a"), _reduce(g, kind, "b")

    return _result("add", (a, b), data, grad)


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "subtract")
    data = _expand(a.data, kind, "a") - _expand(b.data, kind, "b")

    def grad(g):
        return _reduce(g, kind, "a"), -_reduce(g, kind, "b")

    return _result("sub", (a, b), data, grad)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product, a length C vector broadcasts over [C, H, W]."""
    kind = _broadcast_kind(a, b, "multiply")
    x, y = _expand(a.data, kind, "a"), _expand(b.data, kind, "b")

    def grad(g):
        return _reduce(g * y, kind, "a"), _reduce(g * x, kind, "b")

    return _result("hadamard", (a, b), x * y, grad)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = x.data.dtype.type(factor)

    def grad(g):
        return (g * factor,)

    return _result("scale", (x,), x.data * factor, grad)


def reduce_sum(x: Tensor) -> Tensor:
    dims = x.dims

    def grad(g):
        return (np.broadcast_to(g, dims).copy(),)

    return _result("sum", (x,), np.asarray(x.data.sum(), dtype=x.data.dtype), grad)


def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    src = x.dims
    data = x.data.reshape(tuple(dims))

    def grad(g):
        return (g.reshape(src),)

    return _result("reshape", (x,), data, grad)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad(g):
        return (np.transpose(g, inverse),)

    return _result("permute", (x,), np.ascontiguousarray(np.transpose(x.data, axes)), grad)


def _concat(xs: Sequence[Tensor], axis: int, op: str) -> Tensor:
    if not xs:
        raise ArgumentError(f"{op} needs at least one tensor.")

    sizes = [x.dims[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def grad(g):
        return tuple(
            np.take(g, range(start, stop), axis=axis)
            for start, stop in zip(offsets[:-1], offsets[1:])
        )

    data = np.concatenate([x.data for x in xs], axis=axis)
    return _result(op, xs, data, grad)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """
    Channel-wise concatenation of [C_i, H, W] tensors.

    :raise: :class:`~pyscarf.exceptions.ShapeError` on spatial mismatch
    """
    if xs and any(x.data.ndim != 3 or x.dims[1:] != xs[0].dims[1:] for x in xs):
        raise ShapeError(
            "Concatenated maps must share their spatial dims.", *[x.dims for x in xs]
        )
    return _concat(xs, 0, "concat_channels")


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    if xs and any(x.data.ndim != 2 or x.dims[1] != xs[0].dims[1] for x in xs):
        raise ShapeError("Concatenated rows must share their width.", *[x.dims for x in xs])
    return _concat(xs, 0, "concat_rows")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    dims = x.dims
    if not 0 <= start < stop <= dims[0]:
        raise ArgumentError(f"Invalid channel slice [{start}, {stop}) of {dims}.")

    def grad(g):
        full = np.zeros(dims, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _result("slice_channels", (x,), x.data[start:stop].copy(), grad)


def gather_rows(x: Tensor, index: Sequence[int]) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    dims = x.dims

    def grad(g):
        full = np.zeros(dims, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result("gather_rows", (x,), x.data[index], grad)


def conv2d(
    x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """
    2d cross-correlation of a [C, H, W] map with [O, C, kh, kw] weights.

    :param x: Input map
    :param w: Kernel, odd spatial extents
    :param b: Optional per output channel bias
    :param stride: Step between output taps
    :param pad: Zero padding on every border
    :raise: :class:`~pyscarf.exceptions.ShapeError`
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError("conv2d needs a [C,H,W] input and [O,C,kh,kw] kernel.", x.dims, w.dims)

    channels, height, width = x.dims
    out_c, in_c, kh, kw = w.dims
    if channels != in_c:
        raise ShapeError(f"Input has {channels} channels, kernel expects {in_c}.", x.dims, w.dims)
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("Kernel extents must be odd.", w.dims)
    if b is not None and b.dims != (out_c,):
        raise ShapeError("Bias must hold one value per output channel.", b.dims)

    out_h = (height + 2 * pad - kh) // stride + 1
    out_w = (width + 2 * pad - kw) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"Non positive conv output {out_h}x{out_w}.", x.dims, w.dims)

    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    windows = windows[:, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    data = np.einsum("chwij,ocij->ohw", windows, w.data)
    if b is not None:
        data = data + b.data[:, None, None]

    def grad(g):
        gw = np.einsum("ohw,chwij->ocij", g, windows)
        gp = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                gp[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += np.einsum(
                    "ohw,oc->chw", g, w.data[:, :, i, j]
                )
        gx = gp[:, pad : pad + height, pad : pad + width]
        gb = g.sum(axis=(1, 2)) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _result("conv2d", inputs, data, grad)


def resize_matrix(size_in: int, size_out: int, dtype=None) -> np.ndarray:
    """
    Bilinear interpolation weights along one axis, half pixel centres with
    border clamping.
    """
    dtype = dtype or default_dtype()
    matrix = np.zeros((size_out, size_in), dtype=dtype)
    ratio = size_in / size_out
    for dst in range(size_out):
        src = min(max((dst + 0.5) * ratio - 0.5, 0.0), size_in - 1.0)
        low = int(np.floor(src))
        high = min(low + 1, size_in - 1)
        frac = src - low
        matrix[dst, low] += 1.0 - frac
        matrix[dst, high] += frac
    return matrix


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """
    Resize a [C, H, W] map with bilinear interpolation, up or down.

    :raise: :class:`~pyscarf.exceptions.ArgumentError` on non positive sizes
    """
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"Invalid resize target {out_h}x{out_w}.")

    _, height, width = x.dims
    rows = resize_matrix(height, out_h, x.data.dtype)
    cols = resize_matrix(width, out_w, x.data.dtype)
    data = np.einsum("yh,chw,xw->cyx", rows, x.data, cols)

    def grad(g):
        return (np.einsum("yh,cyx,xw->chw", rows, g, cols),)

    return _result("bilinear_resize", (x,), data, grad)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of a [C, H, W] map, giving a length C vector."""
    channels, height, width = x.dims
    data = x.data.mean(axis=(1, 2))

    def grad(g):
        share = g / (height * width)
        return (np.broadcast_to(share[:, None, None], (channels, height, width)).copy(),)

    return _result("global_avg_pool", (x,), data, grad)


def sigmoid(x: Tensor) -> Tensor:
    data = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def grad(g):
        return (g * data * (1.0 - data),)

    return _result("sigmoid", (x,), data, grad)


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def grad(g):
        return (g * (1.0 - data * data),)

    return _result("tanh", (x,), data, grad)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def grad(g):
        return (g * mask,)

    return _result("relu", (x,), x.data * mask, grad)


_ELEMENTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def elementwise(kind: str, x: Tensor) -> Tensor:
    try:
        return _ELEMENTWISE[kind](x)
    except KeyError:
        raise ArgumentError(f"Unknown activation {kind}.")


def fc(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map of a vector, w holds [out, in] weights."""
    if x.data.ndim != 1 or w.data.ndim != 2 or w.dims[1] != x.dims[0]:
        raise ShapeError("fc needs x[in] and w[out,in].", x.dims, w.dims)
    if b is not None and b.dims != (w.dims[0],):
        raise ShapeError("fc bias must hold one value per output.", b.dims)

    data = w.data @ x.data
    if b is not None:
        data = data + b.data

    def grad(g):
        return w.data.T @ g, np.outer(g, x.data), g if b is not None else None

    inputs = (x, w) if b is None else (x, w, b)
    return _result("fc", inputs, data, grad)


def _reduction(total: np.ndarray, count: int, reduction: str):
    if reduction == "mean":
        return total / max(count, 1), 1.0 / max(count, 1)
    if reduction == "sum":
        return total, 1.0
    raise ArgumentError(f"Unknown reduction {reduction}.")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(
    logits: Tensor, labels: Sequence[int], reduction: str = "mean"
) -> Tensor:
    """
    Cross entropy of [N, C] logits against integer labels.

    :raise: :class:`~pyscarf.exceptions.ArgumentError` on out of range labels
    """
    labels = np.asarray(labels, dtype=np.int64)
    rows, classes = logits.dims
    if labels.shape != (rows,):
        raise ShapeError("One label per logits row is required.", logits.dims, labels.shape)
    if rows and (labels.min() < 0 or labels.max() >= classes):
        raise ArgumentError(f"Labels must lie in [0, {classes}).")

    log_probs = log_softmax(logits.data)
    total = -log_probs[np.arange(rows), labels].sum()
    value, factor = _reduction(total, rows, reduction)

    def grad(g):
        probs = np.exp(log_probs)
        probs[np.arange(rows), labels] -= 1.0
        return (probs * (g * factor),)

    data = np.asarray(value, dtype=logits.data.dtype)
    return _result("softmax_cross_entropy", (logits,), data, grad)


def smooth_l1(pred: Tensor, target: Union[Tensor, np.ndarray], reduction: str = "mean") -> Tensor:
    """Huber loss with unit threshold: 0.5 d^2 below 1, |d| - 0.5 above."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.dims != target.shape:
        raise ShapeError("Prediction and target dims differ.", pred.dims, target.shape)

    diff = pred.data - target
    absolute = np.abs(diff)
    quadratic = absolute < 1.0
    values = np.where(quadratic, 0.5 * diff * diff, absolute - 0.5)
    value, factor = _reduction(values.sum(), diff.size, reduction)

    def grad(g):
        return (np.where(quadratic, diff, np.sign(diff)) * (g * factor),)

    data = np.asarray(value, dtype=pred.data.dtype)
    return _result("smooth_l1", (pred,), data, grad)
