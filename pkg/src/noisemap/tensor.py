"""
Dense n-dimensional arrays with reverse-mode automatic differentiation.

Only the primitives needed by the segmentation network and the losses are
implemented, and none of them broadcast: binary operations take two tensors
of identical shape, or a tensor and a constant. Values keep the dtype they
were created with, so a float64 graph can be used as a reference path for
gradient checks while training runs in float32.

Parameter checkpoints use the NNW1 format (little-endian):
    magic "NNW1", then per record:
    name length u32 | utf-8 name | rank u32 | dims u64 x rank | f32 payload
"""

import contextlib
import logging
import struct
import threading
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, ShapeError


Number = Union[int, float, np.floating]
Operand = Union["Tensor", Number, np.ndarray]

BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.1

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


@contextlib.contextmanager
def no_grad():
    """Build no computation tape inside this block (per thread)."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """A value on (or off) the computation tape."""

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
        dtype=None,
    ):
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float32)
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return slice_(self, index)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn)


def _as_tensor(value: Operand, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if b.data.ndim == 0:
        return
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def _reduce_to(grad: np.ndarray, target: Tensor) -> np.ndarray:
    if target.data.ndim == 0 and grad.ndim != 0:
        return np.asarray(grad.sum(), dtype=target.dtype)
    return grad


def add(a: Tensor, b: Operand) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape('add', a, b)

    def backward_fn(g):
        return g, _reduce_to(g, b)

    return _node(a.data + b.data, (a, b), backward_fn)


def sub(a: Tensor, b: Operand) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape('sub', a, b)

    def backward_fn(g):
        return g, _reduce_to(-g, b)

    return _node(a.data - b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Operand) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape('mul', a, b)

    def backward_fn(g):
        return g * b.data, _reduce_to(g * a.data, b)

    return _node(a.data * b.data, (a, b), backward_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = a.dtype.type(factor)

    def backward_fn(g):
        return (g * factor,)

    return _node(a.data * factor, (a,), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), backward_fn)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} do not match rank {a.data.ndim}")
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (g.transpose(inverse),)

    return _node(a.data.transpose(axes), (a,), backward_fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from e

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), backward_fn)


def sum_(a: Tensor) -> Tensor:
    def backward_fn(g):
        return (np.full(a.shape, g, dtype=a.dtype),)

    return _node(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward_fn)


def mean(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean of an empty tensor")
    n = a.size

    def backward_fn(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return _node(np.asarray(a.data.mean(), dtype=a.dtype), (a,), backward_fn)


def slice_(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return _node(np.array(out, copy=True), (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    first = tensors[0]
    for t in tensors[1:]:
        if t.data.ndim != first.data.ndim or any(
            s1 != s2 for i, (s1, s2) in enumerate(zip(t.shape, first.shape)) if i != axis
        ):
            raise ShapeError(f"concat: shapes {first.shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    edges = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, edges, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward_fn(g):
        return (g * mask,)

    return _node(np.where(mask, a.data, 0).astype(a.dtype), (a,), backward_fn)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ArgumentError("log of a non-positive value")

    def backward_fn(g):
        return (g / a.data,)

    return _node(np.log(a.data), (a,), backward_fn)


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def backward_fn(g):
        return (g * sign,)

    return _node(np.abs(a.data), (a,), backward_fn)


def clip(a: Tensor, low: Optional[float] = None, high: Optional[float] = None) -> Tensor:
    """Clamp values; the gradient is zero where the clamp is active."""
    out = np.clip(a.data, low, high)
    passthrough = out == a.data

    def backward_fn(g):
        return (g * passthrough,)

    return _node(out.astype(a.dtype), (a,), backward_fn)


def det2x2(m: Tensor) -> Tensor:
    if m.shape != (2, 2):
        raise ShapeError(f"det2x2 needs a 2x2 matrix, got {m.shape}")
    (a, b), (c, d) = m.data

    def backward_fn(g):
        return (g * np.array([[d, -c], [-b, a]], dtype=m.dtype),)

    return _node(np.asarray(a * d - b * c, dtype=m.dtype), (m,), backward_fn)


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (a,), backward_fn)


def _check_nchw(op: str, x: Tensor) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects (batch, channels, height, width), got {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 convolution with 'same' zero padding (odd square kernels)."""
    _check_nchw('conv2d', x)
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d weight must be (out, in, k, k) with odd k, got {weight.shape}")
    batch, channels, height, width = x.shape
    out_channels, in_channels, k, _ = weight.shape
    if in_channels != channels:
        raise ShapeError(f"conv2d: input has {channels} channels, weight expects {in_channels}")
    if bias is not None and bias.shape != (out_channels,):
        raise ShapeError(f"conv2d bias must be ({out_channels},), got {bias.shape}")

    pad = k // 2
    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * height * width, channels * k * k)
    w_flat = weight.data.reshape(out_channels, -1)
    out = cols @ w_flat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(batch, height, width, out_channels).transpose(0, 3, 1, 2)

    def backward_fn(g):
        g_flat = g.transpose(0, 2, 3, 1).reshape(-1, out_channels)
        grad_w = (g_flat.T @ cols).reshape(weight.shape)
        grad_cols = (g_flat @ w_flat).reshape(batch, height, width, channels, k, k)
        grad_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i:i + height, j:j + width] += grad_cols[..., i, j].transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, pad:pad + height, pad:pad + width]
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g_flat.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(np.ascontiguousarray(out), parents, backward_fn)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    _check_nchw('maxpool2d', x)
    batch, channels, height, width = x.shape
    if height % 2 or width % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {height}x{width}")
    blocks = (x.data.reshape(batch, channels, height // 2, 2, width // 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(batch, channels, height // 2, width // 2, 4))
    idx = blocks.argmax(axis=-1)[..., np.newaxis]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward_fn(g):
        grad_blocks = np.zeros_like(blocks)
        np.put_along_axis(grad_blocks, idx, g[..., np.newaxis], axis=-1)
        grad = (grad_blocks.reshape(batch, channels, height // 2, width // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(batch, channels, height, width))
        return (grad,)

    return _node(out, (x,), backward_fn)


def upsample_nearest(x: Tensor) -> Tensor:
    """2x nearest-neighbour upsampling."""
    _check_nchw('upsample_nearest', x)
    batch, channels, height, width = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward_fn(g):
        return (g.reshape(batch, channels, height, 2, width, 2).sum(axis=(3, 5)),)

    return _node(out, (x,), backward_fn)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BATCHNORM_MOMENTUM,
    eps: float = BATCHNORM_EPS,
) -> Tensor:
    """Per-channel batch normalisation.

    Training mode normalises with batch statistics and updates the running
    buffers in place; eval mode is the affine map given by the buffers.
    """
    _check_nchw('batchnorm2d', x)
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batchnorm2d affine params must be ({channels},)")
    axes = (0, 2, 3)
    shape = (1, channels, 1, 1)

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= (1 - momentum)
        running_mean += momentum * mu
        running_var *= (1 - momentum)
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    n = x.size // channels

    def backward_fn(g):
        grad_gamma = (g * xhat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shape)
        if training:
            grad_x = (inv_std.reshape(shape) / n) * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            grad_x = dxhat * inv_std.reshape(shape)
        return grad_x, grad_gamma, grad_beta

    return _node(out.astype(x.dtype), (x, gamma, beta), backward_fn)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
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
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ArgumentError("loss is not on the computation tape")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward_fn(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = np.asarray(parent_grad, dtype=parent.dtype)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = parent_grad


class Parameter:
    """A trainable tensor with its momentum buffer."""

    def __init__(self, name: str, values: np.ndarray):
        self.name = name
        self.tensor = Tensor(values, requires_grad=True)
        self.velocity = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.tensor.shape

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float) -> None:
    """Classic momentum: v <- momentum * v + grad; p <- p - lr * v."""
    for p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.velocity *= p.data.dtype.type(momentum)
        p.velocity += grad
        p.tensor.data -= p.data.dtype.type(lr) * p.velocity


NNW_MAGIC = b"NNW1"


def save_parameters(named: Mapping[str, np.ndarray], path: Union[str, Path]) -> None:
    """Write named arrays as NNW1 records, in mapping order."""
    path = Path(path)
    chunks = [NNW_MAGIC]
    for name, values in named.items():
        values = np.asarray(values)
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<I', values.ndim))
        chunks.append(struct.pack(f'<{values.ndim}Q', *values.shape))
        chunks.append(values.astype('<f4').tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b''.join(chunks))
    logging.debug("Wrote %s parameter records to %s", len(named), path)


def load_parameters(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != NNW_MAGIC:
        raise ArgumentError(f"{path} is not an NNW1 checkpoint")

    records: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = 4
    try:
        while offset < len(blob):
            (name_len,) = struct.unpack_from('<I', blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode('utf-8')
            offset += name_len
            (rank,) = struct.unpack_from('<I', blob, offset)
            offset += 4
            dims = struct.unpack_from(f'<{rank}Q', blob, offset)
            offset += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if offset + 4 * count > len(blob):
                raise ArgumentError(f"{path}: record {name!r} is truncated")
            values = np.frombuffer(blob, dtype='<f4', count=count, offset=offset).reshape(dims)
            offset += 4 * count
            records[name] = values.astype(np.float32)
    except (struct.error, UnicodeDecodeError) as e:
        logging.error("Error reading checkpoint %s: %s", path, e)
        raise ArgumentError(f"{path} is not a valid NNW1 checkpoint: {e}") from e
    return records
