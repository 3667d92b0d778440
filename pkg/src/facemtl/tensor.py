"""Dense tensors with reverse-mode automatic differentiation.

Values are contiguous row-major numpy arrays. Training runs in float32;
gradient checking runs in float64 because central differences are too noisy
in single precision. The computation graph is built implicitly: every
differentiable op links its output to its operands together with a backward
closure, and ``Tensor.backward`` replays those closures in reverse
topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GradCheckReport",
    "no_grad",
    "is_recording",
    "from_op",
    "gradients",
    "add",
    "sub",
    "mul",
    "matmul",
    "relu",
    "sigmoid",
    "softmax",
    "grad_check",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


# Graph recording is process-global; a training step owns the graph and runs
# on a single thread (tensors themselves are safe to share read-only).
_RECORDING = True


class no_grad:
    """Context manager that suspends graph recording inside its block."""

    def __enter__(self) -> "no_grad":
        global _RECORDING
        self._saved = _RECORDING
        _RECORDING = False
        return self

    def __exit__(self, *exc) -> bool:
        global _RECORDING
        _RECORDING = self._saved
        return False


def is_recording() -> bool:
    return _RECORDING


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    """N-dimensional value that can participate in reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- introspection -------------------------------------------------

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        name = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{grad}{name})"

    # -- leaf-level utilities -------------------------------------------

    def astype(self, dtype) -> "Tensor":
        """Leaf copy in another precision; does not join the graph."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar --------------------------------------------------

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    # -- backward --------------------------------------------------------

    def backward(self) -> None:
        """Seed d(self)/d(self) = 1 and propagate to every reachable node.

        Only scalar losses are accepted; gradient of each visited node ends
        up in its ``.grad`` (dtype matches ``.data``).
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; guarantees operands precede every node that uses them
    # and that each node appears exactly once.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def from_op(data: np.ndarray, parents: Iterable[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    """Create an op output node.

    ``backward`` receives the upstream gradient and is responsible for
    accumulating into each differentiable parent (via :func:`accumulate`).
    This is the extension point used by fused primitives such as conv2d.
    """
    parents = tuple(parents)
    out = Tensor(data)
    if _RECORDING and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents

        def _run():
            backward(out.grad)

        out._backward = _run
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad`` if ``t`` participates in the graph."""
    if t.requires_grad:
        _accumulate(t, g)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    # Broadcasting is deliberately narrow: equal shapes, scalar-vs-tensor,
    # or a bias-style operand that is all ones except at most one axis.
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    aligned = (1,) * (len(big) - len(small)) + small
    compatible = all(s == g or s == 1 for s, g in zip(aligned, big))
    near_vector = sum(1 for s in aligned if s != 1) <= 1
    if not (compatible and near_vector):
        raise ShapeError(f"{op}: shapes {sa} and {sb} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise("add", a, b)
    out_data = a.data + b.data

    def _bw(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))

    return from_op(out_data, (a, b), _bw)


def neg(a) -> Tensor:
    a = _wrap(a)
    return from_op(-a.data, (a,), lambda g: accumulate(a, -g))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise("sub", a, b)
    out_data = a.data - b.data

    def _bw(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(-g, b.shape))

    return from_op(out_data, (a, b), _bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise("mul", a, b)
    out_data = a.data * b.data

    def _bw(g):
        accumulate(a, _unbroadcast(g * b.data, a.shape))
        accumulate(b, _unbroadcast(g * a.data, b.shape))

    return from_op(out_data, (a, b), _bw)


def matmul(a, b) -> Tensor:
    """Matrix product; supports stacked (batched) operands with broadcasting
    over leading axes, e.g. (E,C) @ (N,C,P) -> (N,E,P)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def _bw(g):
        accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return from_op(out_data, (a, b), _bw)


def reshape(a, *shape) -> Tensor:
    a = _wrap(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_data = a.data.reshape(shape)
    return from_op(out_data, (a,), lambda g: accumulate(a, g.reshape(a.shape)))


def transpose(a, *axes) -> Tensor:
    a = _wrap(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(a.data.transpose(axes))
    return from_op(out_data, (a,), lambda g: accumulate(a, g.transpose(inverse)))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g, a.shape).copy())
        else:
            expanded = g if keepdims else np.expand_dims(g, axis)
            accumulate(a, np.broadcast_to(expanded, a.shape).copy())

    return from_op(out_data, (a,), _bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def relu(a) -> Tensor:
    a = _wrap(a)
    out_data = np.maximum(a.data, 0)
    return from_op(out_data, (a,), lambda g: accumulate(a, g * (a.data > 0)))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out_data = 1.0 / (1.0 + np.exp(-a.data))
    return from_op(out_data, (a,), lambda g: accumulate(a, g * out_data * (1.0 - out_data)))


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)
    return from_op(out_data, (a,), lambda g: accumulate(a, g * out_data))


def log(a) -> Tensor:
    a = _wrap(a)
    out_data = np.log(a.data)
    return from_op(out_data, (a,), lambda g: accumulate(a, g / a.data))


def absolute(a) -> Tensor:
    # Subgradient 0 at the kink.
    a = _wrap(a)
    return from_op(np.abs(a.data), (a,), lambda g: accumulate(a, g * np.sign(a.data)))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only through unclamped entries."""
    a = _wrap(a)
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return from_op(out_data, (a,), lambda g: accumulate(a, g * inside))


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction) along ``axis``."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        accumulate(a, (g - inner) * out_data)

    return from_op(out_data, (a,), _bw)


def gradients(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Run the backward pass and collect gradients for named parameters.

    Returns exactly the parameters reachable from ``loss``; parameters the
    loss does not depend on are absent from the map.
    """
    for p in params.values():
        p.grad = None
    loss.backward()
    return {name: Tensor(p.grad) for name, p in params.items() if p.grad is not None}


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-parameter relative error between analytic and central-difference
    gradients. ``failed`` lists parameters with non-finite gradients; those
    contribute ``inf`` to the errors."""

    max_rel_error: float
    per_param: dict[str, float]
    failed: list[str] = field(default_factory=list)

    def ok(self, tol: float = 1e-4) -> bool:
        return not self.failed and self.max_rel_error < tol


def grad_check(
    model_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_elements_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``model_fn(params)`` with central
    differences.

    All parameters must be float64 (single precision makes the difference
    quotient unreliable). Relative error per element is
    ``|g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)``; the per-parameter value
    is the max over checked elements. For large tensors,
    ``max_elements_per_param`` limits the check to a seeded random sample.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters; {name!r} is {p.dtype}")

    loss = model_fn(params)
    analytic = gradients(loss, params)

    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    failed: list[str] = []
    for name, p in params.items():
        g_ad = analytic[name].data.reshape(-1) if name in analytic else np.zeros(p.size)
        flat = p.data.reshape(-1)
        indices = np.arange(p.size)
        if max_elements_per_param is not None and p.size > max_elements_per_param:
            indices = rng.choice(p.size, size=max_elements_per_param, replace=False)
        worst = 0.0
        finite = True
        for i in indices:
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = model_fn(params).item()
            flat[i] = saved - eps
            f_minus = model_fn(params).item()
            flat[i] = saved
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            if not (np.isfinite(g_fd) and np.isfinite(g_ad[i])):
                finite = False
                break
            rel = abs(g_ad[i] - g_fd) / max(1e-12, abs(g_ad[i]) + abs(g_fd))
            worst = max(worst, rel)
        if not finite:
            failed.append(name)
            per_param[name] = float("inf")
        else:
            per_param[name] = worst

    max_rel = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(max_rel_error=max_rel, per_param=per_param, failed=failed)
