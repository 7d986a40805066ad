"""Minimal reverse-mode autodiff over float64 numpy arrays.

Graphs are built per call (define-by-run). Every op checks its output for
NaN/Inf and raises :class:`NonFiniteError` at the op that produced it.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

GradientTransform = Callable[[np.ndarray], np.ndarray]


class NonFiniteError(FloatingPointError):
    pass


def _as_array(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters; their gradient
    accumulates in ``.grad`` across backward calls until :meth:`zero_grad`.
    A ``grad_transform`` on a leaf rewrites each incoming gradient before it
    is accumulated.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self.grad_transform: GradientTransform | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operators
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    data = _as_array(data)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), _bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), _bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NonFiniteError("division by zero in div")

    def _bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), _bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def _bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data**p, (a,), _bw, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NonFiniteError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = sigmoid_array(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    slope = sigmoid_array(a.data)
    return _make(out, (a,), lambda g: (g * slope,), "softplus")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _make(a.data * on, (a,), lambda g: (g * on,), "relu")


def clip(a, low: float, high: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside [low, high]."""
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)
    return _make(np.clip(a.data, low, high), (a,), lambda g: (g * inside,), "clip")


# ----------------------------------------------------------------------------
# reductions and shape ops


def _normalize_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), _bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inverse = None if axes is None else np.argsort(axes)
    return _make(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def expand_dims(a, axis) -> Tensor:
    a = as_tensor(a)
    return _make(np.expand_dims(a.data, axis), (a,), lambda g: (g.reshape(a.shape),), "expand_dims")


def take(a, index) -> Tensor:
    """Numpy-style indexing; repeated indices accumulate in the backward pass."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)

    def _bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), _bw, "take")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul needs tensors of rank >= 1")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    a2 = a.data if a.ndim > 1 else a.data[None, :]
    b2 = b.data if b.ndim > 1 else b.data[:, None]
    out2 = a2 @ b2

    def _bw(g):
        g2 = g.reshape(out2.shape)
        ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(a.shape)
        gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), _bw, "matmul")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def _bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), _bw, "log_softmax")


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    return a / sqrt(sum_(a * a, axis=axis, keepdims=True) + eps)


# ----------------------------------------------------------------------------
# gradient gating


class _StopTape:
    """Records stop_gradient outputs, or replays them in the same order."""

    def __init__(self, replay: list[np.ndarray] | None = None):
        self.values: list[np.ndarray] = [] if replay is None else replay
        self.replaying = replay is not None
        self.pos = 0

    def visit(self, data: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.values.append(data.copy())
            return data
        if self.pos >= len(self.values) or self.values[self.pos].shape != data.shape:
            raise RuntimeError("graph structure changed between recorded and replayed passes")
        self.pos += 1
        return self.values[self.pos - 1]


_tape: _StopTape | None = None


@contextmanager
def _stop_tape(replay: list[np.ndarray] | None = None):
    global _tape
    previous, _tape = _tape, _StopTape(replay)
    try:
        yield _tape
    finally:
        _tape = previous


def stop_gradient(a) -> Tensor:
    """Identity forward; nothing flows back through the result."""
    a = as_tensor(a)
    out = Tensor(a.data if _tape is None else _tape.visit(a.data))
    out.op = "stop_gradient"
    return out


detach = stop_gradient


def dropout(a, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout. Identity when not training or when ``rate == 0``."""
    if not train or rate == 0.0:
        return as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("training-mode dropout needs a generator")
    a = as_tensor(a)
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return a * Tensor(keep)


# ----------------------------------------------------------------------------
# backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` through grad-carrying edges, parents first."""
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any parameter that requires grad")
    order = topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg
            continue
        if node.grad_transform is not None:
            transformed = node.grad_transform(g)
            if transformed.shape != g.shape:
                raise ValueError(f"gradient transform changed shape for {node!r}")
            g = transformed
        node.grad = g.copy() if node.grad is None else node.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_or_zeros(p: Tensor) -> np.ndarray:
    return np.zeros_like(p.data) if p.grad is None else p.grad


# ----------------------------------------------------------------------------
# finite-difference check


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    n_coords: int = 0
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    apply_transforms: bool = False,
    freeze_stopped: bool = False,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, coordinate by coordinate.

    ``loss_fn`` must rebuild the graph on every call and be deterministic.
    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.

    With ``freeze_stopped`` every ``stop_gradient`` output is held at its value
    from the unperturbed pass, so the numeric side differentiates the same
    function the backward pass does. Without it, gated paths show up as
    mismatches.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    saved = [p.grad_transform for p in params]
    if not apply_transforms:
        for p in params:
            p.grad_transform = None
    try:
        zero_grad(params)
        with _stop_tape() as tape:
            loss = loss_fn()
        frozen = tape.values if freeze_stopped else None
        if loss.requires_grad:
            loss.backward()
        analytic = [grad_or_zeros(p).copy() for p in params]
    finally:
        for p, t in zip(params, saved):
            p.grad_transform = t

    def evaluate() -> float:
        if frozen is None:
            return loss_fn().item()
        with _stop_tape(frozen):
            return loss_fn().item()

    report = GradCheckReport(0.0, 0.0, tolerance=tolerance)
    for i, (p, a_grad) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        a_flat = a_grad.reshape(-1)
        worst = 0.0
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            plus = evaluate()
            flat[k] = orig - epsilon
            minus = evaluate()
            flat[k] = orig
            numeric = (plus - minus) / (2.0 * epsilon)
            abs_err = abs(a_flat[k] - numeric)
            rel_err = abs_err / max(abs(a_flat[k]), abs(numeric), 1e-8)
            worst = max(worst, rel_err)
            report.max_abs_error = max(report.max_abs_error, abs_err)
        report.per_param[p.name or f"param{i}"] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
        report.n_coords += flat.size
    zero_grad(params)
    return report
