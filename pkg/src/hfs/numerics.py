"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations needed by the hypernetwork/CNN composition are provided.
Ops are recorded while a :class:`Tape` is active on the current thread and
at least one input requires a gradient; outside a tape they run as plain
numpy computations, which is what evaluation uses.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> backward(tape, loss)[x]
    array([2., 4.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, DomainError, NumericError

_local = threading.local()


class Tensor:
    """Immutable n-dimensional array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype, copy=True)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in tensor {name or ''}".rstrip())
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; tapes are per-thread so concurrent clients can
    each hold their own.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def produced(self, t: Tensor) -> bool:
        return any(node.output is t for node in self.nodes)


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite values")
    requires_grad = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad)
    tape = _active_tape()
    if tape is not None and requires_grad:
        tape.nodes.append(Node(op, inputs, result, vjp))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", out, (x,), vjp)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / float(count))


# -- shape manipulation ---------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inverse),))


def getitem(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx])

    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("getitem", out, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with gradients dA = dC·Bᵀ, dB = Aᵀ·dC."""
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum with an explicit output, e.g. ``"idn,tn->tid"``.

    Every index of an operand must appear in the other operand or the output
    so that both gradients are again plain einsums.
    """
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for mine, other in ((ia, ib), (ib, ia)):
        if len(set(mine)) != len(mine) or not set(mine) <= set(other) | set(out_idx):
            raise ContractError(f"einsum spec {spec!r} not supported")
    try:
        out = np.einsum(spec, a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"einsum {spec!r}: {exc}") from None
    return _emit("einsum", out, (a, b), lambda g: (
        np.einsum(f"{out_idx},{ib}->{ia}", g, b.data),
        np.einsum(f"{out_idx},{ia}->{ib}", g, a.data),
    ))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped (out_features, in_features)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data
    return _emit("linear", out, (x, weight, bias),
                 lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)))


# -- network layers --------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Bias-free 2-D cross-correlation over an N×C×H×W batch."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    o, c_k, fh, fw = kernel.shape
    if c != c_k:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {c_k}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: bad stride {stride} / padding {padding}")
    if fh > h + 2 * padding or fw > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {fh}x{fw} larger than padded input {h}x{w} (+{padding})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - fh) // stride + 1
    wo = (w + 2 * padding - fw) // stride + 1
    cols = sliding_window_view(xp, (fh, fw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(cols, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def vjp(g):
        dk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        dcols = np.tensordot(g, kernel.data, axes=([1], [0]))  # n, ho, wo, c, fh, fw
        dxp = np.zeros_like(xp)
        for a in range(fh):
            for b in range(fw):
                dxp[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += \
                    dcols[..., a, b].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + h, padding:padding + w]
        return dx, dk

    return _emit("conv2d", np.ascontiguousarray(out), (x, kernel), vjp)


def avg_pool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping average pooling; trailing rows/cols that do not fill a window are dropped."""
    n, c, h, w = x.shape
    if window < 1 or window > h or window > w:
        raise DimensionError(f"avg_pool2d: window {window} does not fit {h}x{w}")
    ho, wo = h // window, w // window
    cropped = x.data[:, :, :ho * window, :wo * window]
    out = cropped.reshape(n, c, ho, window, wo, window).mean(axis=(3, 5))

    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        spread = np.repeat(np.repeat(g, window, axis=2), window, axis=3) / (window * window)
        full[:, :, :ho * window, :wo * window] = spread
        return (full,)

    return _emit("avg_pool2d", out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: N×C×H×W -> N×C."""
    return mean(x, axis=(2, 3))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DomainError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray(np.mean(lse - z[rows, labels]), dtype=logits.dtype)

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _emit("softmax_cross_entropy", loss, (logits,), vjp)


# -- differentiation -------------------------------------------------------------

class Gradients:
    """Mapping from tensors to their gradient arrays.

    Looking up a tensor the loss does not depend on yields zeros.
    """

    def __init__(self, entries: dict[int, tuple[Tensor, np.ndarray]]):
        self._entries = entries

    def __getitem__(self, t: Tensor) -> np.ndarray:
        hit = self._entries.get(id(t))
        if hit is not None and hit[0] is t:
            return hit[1]
        return np.zeros(t.shape, dtype=t.dtype)

    def __contains__(self, t: Tensor) -> bool:
        hit = self._entries.get(id(t))
        return hit is not None and hit[0] is t

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return list(self._entries.values())


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse sweep over ``tape`` returning d(loss)/d(t) for every tracked tensor."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss) and not loss.requires_grad:
        raise ContractError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = gi if key not in grads else grads[key] + gi
            owners[key] = t
    return Gradients({k: (owners[k], grads[k]) for k in grads})


def gradient_check(f: Callable[..., Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                   samples: int | None = None, seed: int = 0) -> float:
    """Max relative error between backward() and central differences.

    ``f(*params)`` must return a scalar tensor. With ``samples`` set, that many
    coordinates are drawn at random, spread evenly over the parameters;
    otherwise every coordinate is checked. The relative error uses the
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    params = list(params)
    with Tape() as tape:
        loss = f(*params)
    grads = backward(tape, loss)

    coords = list(_coordinates(params, samples, seed))
    worst = 0.0
    for i, j in coords:
        base = np.array(params[i].data)
        shifted = []
        for sign in (1.0, -1.0):
            arr = base.copy()
            arr.flat[j] += sign * eps
            probe = list(params)
            probe[i] = Tensor._wrap(arr, False)
            shifted.append(f(*probe).item())
        numeric = (shifted[0] - shifted[1]) / (2.0 * eps)
        analytic = float(grads[params[i]].flat[j])
        if not (np.isfinite(numeric) and np.isfinite(analytic)):
            raise NumericError(f"non-finite gradient at parameter {i}, coordinate {j}")
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst


def _coordinates(params: Sequence[Tensor], samples: int | None, seed: int) -> Iterable[tuple[int, int]]:
    if samples is None:
        for i, p in enumerate(params):
            for j in range(p.size):
                yield i, j
        return
    rng = np.random.default_rng(seed)
    per = -(-samples // len(params))
    for i, p in enumerate(params):
        take = min(per, p.size)
        for j in rng.choice(p.size, size=take, replace=False):
            yield i, int(j)
