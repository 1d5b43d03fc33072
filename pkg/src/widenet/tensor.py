"""Dense float64 tensors with a dynamic reverse-mode tape.

Every operation returns a new :class:`Tensor`. When any input is tracked
(a leaf with ``requires_grad`` or the output of a tracked op) and recording is
enabled, the result keeps a reference to its parents plus a closure mapping the
upstream gradient to per-parent gradients. :func:`backward` walks that graph in
reverse topological order and accumulates into leaf ``grad`` buffers.

Broadcasting follows numpy rules for the elementwise family; gradients are
summed back to each operand's shape.
"""

from __future__ import annotations

import contextlib
import io
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "RngStream",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "backward",
    "zero_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "relu",
    "gelu",
    "exp",
    "log",
    "power",
    "transpose",
    "reshape",
    "reduce_sum",
    "reduce_mean",
    "gather",
    "scatter_add",
    "concat",
    "stable_softmax",
    "log_softmax",
    "sample_gaussian",
    "sample_uniform",
    "finite_difference_gradient",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "write_tensor",
    "read_tensor",
]

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf from its inputs."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape."""


_recording = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _recording
    previous = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = previous


class Tensor:
    """A float64 array, optionally a differentiable leaf.

    ``grad`` exists exactly when ``requires_grad`` is set. Results of recorded
    operations carry ``requires_grad=False`` but are *tracked*: they hold the
    parents and backward closure needed to route gradients to the leaves.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._backward is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return gather(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE), requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values from finite inputs")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._op = op
    out._consumed = False
    if _recording and any(p.tracked for p in parents):
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _result(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _result(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise NonFiniteError(f"div: zero in denominator of shape {b.shape}")
    return _result(
        a.data / b.data,
        "div",
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data**exponent
    return _result(out, "power", (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log: non-positive input")
    return _result(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, "gelu", (a,), grad_fn)


# --- linear algebra and shape ------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy ``@`` semantics (batched over leading dims).

    1-D operands are promoted to a row (left) or column (right) and the
    promoted axis is dropped from the result.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    with np.errstate(invalid="ignore", over="ignore"):
        out = a.data @ b.data
    return _result(out, "matmul", (a, b), grad_fn)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(ax) % max(a.ndim, 1) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    try:
        return tuple(sorted(int(ax) % ndim for ax in axis)) if ndim else ()
    except ZeroDivisionError:
        return ()


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=DTYPE), "reduce_sum", (a,), grad_fn)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"reduce_mean: empty reduction over axes {axes} of shape {a.shape}")
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def gather(a: Tensor, index) -> Tensor:
    """``a[index]`` for any numpy basic or advanced index.

    The backward pass scatters with ``np.add.at`` so repeated indices
    accumulate.
    """
    a = _as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"gather: index invalid for shape {a.shape}: {exc}") from None

    def grad_fn(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, dtype=DTYPE), "gather", (a,), grad_fn)


def scatter_add(shape: Sequence[int], index: np.ndarray, values: Tensor) -> Tensor:
    """Zeros of ``shape`` with ``values`` added at rows ``index`` (repeats accumulate)."""
    values = _as_tensor(values)
    index = np.asarray(index, dtype=np.int64)
    shape = tuple(shape)
    if values.shape[:1] != index.shape or values.shape[1:] != shape[1:]:
        raise ShapeError(
            f"scatter_add: values of shape {values.shape} do not fit index {index.shape} into {shape}"
        )
    if index.size and (index.min() < 0 or index.max() >= shape[0]):
        raise ShapeError(f"scatter_add: index out of range for leading dimension {shape[0]}")
    out = np.zeros(shape, dtype=DTYPE)
    np.add.at(out, index, values.data)
    return _result(out, "scatter_add", (values,), lambda g: (g[index],))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: shapes {shapes} do not match off axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, "concat", tuple(tensors), grad_fn)


def stable_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with the max subtracted first (no overflow)."""
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"stable_softmax: empty axis {axis} for shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("stable_softmax: non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, "softmax", (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"log_softmax: empty axis {axis} for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _result(out, "log_softmax", (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


# --- tape -------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.tracked:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf.

    The tape is released afterwards; a second call on the same loss raises
    :class:`TapeError`. A loss that does not depend on any leaf is a no-op.
    """
    if loss.size != 1:
        raise TapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("backward: tape already consumed; rebuild the forward pass")
    loss._consumed = True
    if not loss.tracked:
        return
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.tracked:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.asarray(pg, dtype=DTYPE)
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad.fill(0.0)


# --- random stream ------------------------------------------------------------

_U53 = 2.0**-53


@dataclass
class RngStream:
    """Counter-addressed random stream over Philox-4x64.

    Draw number ``n`` of stream ``seed`` is word ``n % 4`` of Philox block
    ``n // 4`` keyed by ``seed``, so a ``(seed, counter)`` pair fully determines
    every subsequent draw. ``counter`` counts 64-bit words consumed.

    Gaussians use Box-Muller on word pairs, cosine branch only: each normal
    consumes two words. Uniforms map a word to ``((w >> 11) + 0.5) * 2**-53``,
    which lies strictly inside (0, 1).
    """

    seed: int
    counter: int = 0

    def raw(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("raw: negative draw count")
        block, offset = divmod(self.counter, 4)
        gen = np.random.Philox(key=self.seed % 2**64, counter=block)
        words = gen.random_raw(offset + n)[offset:] if n else np.zeros(0, dtype=np.uint64)
        self.counter += n
        return np.asarray(words, dtype=np.uint64)

    def uniform(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        words = self.raw(n)
        return (((words >> np.uint64(11)).astype(DTYPE) + 0.5) * _U53).reshape(shape)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ValueError(f"normal: negative standard deviation {std}")
        n = int(np.prod(shape, dtype=np.int64))
        u = self.uniform((2, n))
        z = np.sqrt(-2.0 * np.log(u[0])) * np.cos(2.0 * np.pi * u[1])
        if std == 0:
            return np.full(shape, float(mean), dtype=DTYPE)
        return (mean + std * z).reshape(shape)

    def truncated_normal(self, shape, std: float, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) redrawn until every value lies within ``bound`` std."""
        out = self.normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self.normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def integers(self, high: int, shape) -> np.ndarray:
        return np.minimum((self.uniform(shape) * high).astype(np.int64), high - 1)


def sample_gaussian(rng: RngStream, shape, mean: float = 0.0, std: float = 1.0) -> Tensor:
    if std < 0:
        raise ValueError(f"sample_gaussian: negative standard deviation {std}")
    return Tensor(rng.normal(shape, mean, std))


def sample_uniform(rng: RngStream, shape) -> Tensor:
    return Tensor(rng.uniform(shape))


# --- verification oracle ------------------------------------------------------


def finite_difference_gradient(f: Callable[[Tensor], object], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every entry of ``x``.

    ``x.data`` is perturbed in place and restored before returning.
    """
    grad = np.zeros(x.shape, dtype=DTYPE)
    flat = x.data.reshape(-1)
    out = grad.reshape(-1)

    def evaluate() -> float:
        with no_grad():
            value = f(x)
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=DTYPE)
        if arr.size != 1:
            raise ShapeError(f"finite_difference_gradient: f returned shape {arr.shape}, expected a scalar")
        return float(arr.reshape(-1)[0])

    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = evaluate()
        flat[i] = original - step
        minus = evaluate()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * step)
    return grad


# --- serialization --------------------------------------------------------------


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    """Rank, dims (little-endian u64), then row-major little-endian f64 data."""
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")
    header = struct.pack(f"<Q{arr.ndim}Q", arr.ndim, *arr.shape)
    return header + arr.tobytes(order="C")


def read_tensor(stream: io.BufferedIOBase) -> np.ndarray:
    head = stream.read(8)
    if len(head) != 8:
        raise ValueError("read_tensor: truncated rank header")
    (rank,) = struct.unpack("<Q", head)
    dims_raw = stream.read(8 * rank)
    if len(dims_raw) != 8 * rank:
        raise ValueError("read_tensor: truncated dimension header")
    shape = struct.unpack(f"<{rank}Q", dims_raw)
    count = int(np.prod(shape, dtype=np.int64))
    body = stream.read(8 * count)
    if len(body) != 8 * count:
        raise ValueError(f"read_tensor: expected {count} values for shape {shape}")
    return np.frombuffer(body, dtype="<f8").astype(DTYPE).reshape(shape)


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(buf))


def write_tensor(stream: io.BufferedIOBase, t: Tensor | np.ndarray) -> int:
    payload = tensor_to_bytes(t)
    stream.write(payload)
    return len(payload)
