"""Dense float32 tensors with a tape-based reverse-mode autodiff.

A thread-local :func:`precision` switch runs everything in float64 instead,
which the finite-difference checker uses.

Only the handful of operations the graph head needs are provided. Every op
records a node on the active :class:`Tape` when at least one input requires
gradients; :func:`backward` replays the tape in reverse.

Gradients accumulate into ``Tensor.grad`` of leaf tensors. Calling
:func:`backward` twice without :func:`zero_grad` adds the second gradient to
the first.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------


@dataclass
class Node:
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Append-only record of differentiable operations.

    A node's parents are always recorded before it, so reverse iteration is a
    valid reverse topological order.
    """

    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()


class _State(threading.local):
    def __init__(self) -> None:
        self.stack: list[Tape] = []
        self.default = Tape()
        self.grad_enabled = True
        self.float_type = DTYPE


_state = _State()


def active_tape() -> Tape:
    return _state.stack[-1] if _state.stack else _state.default


def reset_default_tape() -> None:
    _state.default = Tape()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _ft():
    return _state.float_type


@contextlib.contextmanager
def precision(float_type) -> Iterator[None]:
    """Run new tensors and ops in ``float_type`` (float64 for gradient checks)."""
    prev = _state.float_type
    _state.float_type = np.dtype(float_type).type
    try:
        yield
    finally:
        _state.float_type = prev


# --------------------------------------------------------------------------
# Tensor
# --------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "_node", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        # np.ascontiguousarray would promote 0-d arrays to 1-d
        self.data = np.asarray(data, dtype=_ft(), order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self._node: int | None = None
        self.name = name

    # -- basics ------------------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _raise_item(t: Tensor) -> float:
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _needs_grad(*ts: Tensor) -> bool:
    return _state.grad_enabled and any(t.requires_grad for t in ts)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _needs_grad(*parents):
        tape = active_tape()
        out.requires_grad = True
        out._tape = tape
        out._node = tape.record(Node(parents, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# Elementwise arithmetic
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw)


def scale(a: Tensor, factor: float) -> Tensor:
    f = _ft()(factor)
    return _make(a.data * f, (a,), lambda g: (g * f,))


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; leading (batch) axes broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), bw)


def conv1x1(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise convolution of ``x`` (B, D, H, W) with weights ``w`` (D', D).

    Computed as ``w @ x.reshape(B, D, H*W)`` so it agrees bit-for-bit with
    :func:`matmul` on the flattened spatial view.
    """
    if x.ndim != 4 or w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise DimensionError(f"conv1x1: input {x.shape} does not match weights {w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise DimensionError(f"conv1x1: bias {bias.shape} does not match weights {w.shape}")
    b, _, h, wd = x.shape
    flat = reshape(x, (b, x.shape[1], h * wd))
    out = matmul(w, flat)
    if bias is not None:
        out = add(out, reshape(bias, (w.shape[0], 1)))
    return reshape(out, (b, w.shape[0], h, wd))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast, e.g. a vector over a batch axis."""
    shape = tuple(shape)
    try:
        out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), bw)


# --------------------------------------------------------------------------
# Reductions
# --------------------------------------------------------------------------


def _axes(a: Tensor, axis) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(a.ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % a.ndim for ax in axis)


def sum_(a: Tensor, axis=None) -> Tensor:
    axes = _axes(a, axis)
    out = a.data.sum(axis=axes, dtype=np.float64)  # accumulate wide, round once

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).astype(_ft()),)

    return _make(np.asarray(out, dtype=_ft()), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _axes(a, axis)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, dtype=np.float64)
    inv = _ft()(1.0 / n)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g * inv, axes), a.shape).astype(_ft()),)

    return _make(np.asarray(out, dtype=_ft()), (a,), bw)


def max_axis(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal index."""
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros(a.shape, dtype=_ft())
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (a,), bw)


def global_pool(x: Tensor, mode: str) -> Tensor:
    """Spatial average or max pooling of (B, C, H, W) to (B, C)."""
    if x.ndim != 4:
        raise DimensionError(f"global_pool expects (B, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    flat = reshape(x, (b, c, h * w))
    if mode == "avg":
        return mean(flat, axis=2)
    if mode == "max":
        return max_axis(flat, axis=2)
    raise ValueError(f"unknown pooling mode {mode!r}")


# --------------------------------------------------------------------------
# Nonlinearities
# --------------------------------------------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    # float32 rounds expit(x) to exactly 1.0 for x > ~17; keep the open interval
    ft = _ft()
    out = np.clip(expit(a.data), np.nextafter(ft(0), ft(1)), np.nextafter(ft(1), ft(0))).astype(ft)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    s = _ft()(slope)
    pos = a.data >= 0
    out = np.where(pos, a.data, a.data * s)
    return _make(out, (a,), lambda g: (np.where(pos, g, g * s),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) without overflow."""
    x = a.data
    out = np.logaddexp(_ft()(0), x).astype(_ft())
    return _make(out, (a,), lambda g: (g * expit(x).astype(_ft()),))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


# --------------------------------------------------------------------------
# Backward
# --------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones(loss.shape, dtype=_ft()))
            return
        raise ContractError("loss is not attached to any tape (no input requires grad)")

    tape = loss._tape
    grads: dict[int, np.ndarray] = {loss._node: np.ones(loss.shape, dtype=_ft())}
    for i in range(loss._node, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = tape.nodes[i]
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=_ft())
            if parent._node is None:
                _accumulate(parent, pg)
            elif parent._tape is tape:
                prev = grads.get(parent._node)
                grads[parent._node] = pg if prev is None else prev + pg
            else:
                raise ContractError("operand was recorded on a different tape")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = g.reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# Finite-difference checking
# --------------------------------------------------------------------------


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``t.data``."""
    grad = np.zeros(t.shape, dtype=np.float64)
    flat = t.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + _ft()(h)
            up = float(fn().data)
            flat[i] = orig - _ft()(h)
            down = float(fn().data)
            flat[i] = orig
            grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(
    fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3,
    float_type=np.float64,
) -> dict[str, float]:
    """Relative error between analytic and numerical gradients per parameter.

    Runs under ``precision(float_type)`` with the parameters temporarily cast;
    in float32 the forward rounding error divided by ``h`` is itself close to
    1e-3 for deeper compositions. Pass ``np.float32`` to check the training
    precision directly.
    """
    saved = [p.data for p in params]
    try:
        with precision(float_type):
            for p in params:
                p.data = p.data.astype(float_type)
                p.grad = None
            with Tape():
                loss = fn()
                backward(loss)
            errors = {}
            for i, p in enumerate(params):
                analytic = p.grad if p.grad is not None else np.zeros(p.shape, _ft())
                errors[p.name or f"param{i}"] = relative_error(analytic, numerical_grad(fn, p, h))
    finally:
        for p, data in zip(params, saved):
            p.data = data
            p.grad = None
    return errors
