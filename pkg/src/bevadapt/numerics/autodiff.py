"""Tape-based reverse-mode gradients over a fixed primitive vocabulary.

Every primitive builds a :class:`Node` holding the forward value (float64
ndarray) plus vector-Jacobian closures for its parents. ``backward`` walks
the recorded tape once and accumulates gradients. Values are immutable
after construction; evaluating one graph is single-threaded, but separate
evaluations may run concurrently against shared read-only parameters.

The vocabulary covers exactly what the detection and adaptation losses
need: linear (matmul+bias), relu, sigmoid, softmax, log, elementwise
add/mul (scalar broadcast allowed), sum/mean reductions, MSE, binary
cross-entropy, pixelwise channel outer product, strided 3D average
pooling, dropout masking, and the structural ops reshape/moveaxis/concat.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .rng import make_rng
from .tensor import TensorRecord


class ShapeError(ValueError):
    """An operation was handed operands of incompatible shapes."""


class NumericsError(ArithmeticError):
    """A node produced non-finite values during evaluation."""


class UsageError(RuntimeError):
    """The gradient API was called out of protocol."""


_serial = itertools.count()


class Node:
    """One value in a differentiable computation."""

    __slots__ = ("data", "op", "name", "_parents", "_vjps")

    def __init__(
        self,
        data: np.ndarray,
        op: str,
        parents: tuple["Node", ...] = (),
        vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = (),
        name: str | None = None,
    ):
        self.data = data
        self.op = op
        self.name = name if name is not None else f"{op}#{next(_serial)}"
        self._parents = parents
        self._vjps = vjps
        if not np.isfinite(data).all():
            raise NumericsError(f"non-finite values produced by node {self.name!r}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def array(self) -> np.ndarray:
        return self.data

    def record(self) -> TensorRecord:
        return TensorRecord(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar node, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Node({self.name}, shape={self.shape})"

    # Operator sugar used by the loss code.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Node) else -float(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)


def _coerce(value) -> Node:
    if isinstance(value, Node):
        return value
    return constant(value)


def constant(value, name: str | None = None) -> Node:
    """A leaf that receives no gradient (inputs, masks, detached values)."""
    if isinstance(value, TensorRecord):
        data = value.array
    else:
        data = np.asarray(value, dtype=np.float64)
    return Node(data, "const", name=name)


def parameter(record: TensorRecord, name: str) -> Node:
    """A named trainable leaf; ``differentiate`` collects its gradient."""
    return Node(record.array, "param", name=name)


def linear(x: Node, w: Node, b: Node | None = None, name: str | None = None) -> Node:
    """Matrix product ``x @ w`` plus optional bias row.

    ``x`` is (n, k), ``w`` is (k, m), ``b`` is (m,). Either operand may be
    a parameter or any computed node (attention uses computed ``w``).
    """
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear needs 2-D operands, got {x.shape} @ {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear inner dims disagree: {x.shape} @ {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear bias shape {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data
    parents: tuple[Node, ...]
    if b is not None:
        out = out + b.data
        parents = (x, w, b)
        vjps = (
            lambda g: g @ w.data.T,
            lambda g: x.data.T @ g,
            lambda g: g.sum(axis=0),
        )
    else:
        parents = (x, w)
        vjps = (lambda g: g @ w.data.T, lambda g: x.data.T @ g)
    return Node(out, "linear", parents, vjps, name)


def relu(x: Node, name: str | None = None) -> Node:
    gate = x.data > 0
    return Node(np.where(gate, x.data, 0.0), "relu", (x,), (lambda g: g * gate,), name)


def sigmoid(x: Node, name: str | None = None) -> Node:
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.data))
    return Node(s, "sigmoid", (x,), (lambda g: g * s * (1.0 - s),), name)


def softmax(x: Node, axis: int, name: str | None = None) -> Node:
    """Exp-normalise along ``axis``; rows sum to one."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: np.ndarray) -> np.ndarray:
        inner = (g * s).sum(axis=axis, keepdims=True)
        return s * (g - inner)

    return Node(s, "softmax", (x,), (vjp,), name)


def log(x: Node, eps: float = 1e-12, name: str | None = None) -> Node:
    """Natural log of ``x`` clamped below at ``eps``; zero slope in the clamp."""
    clipped = np.maximum(x.data, eps)
    live = x.data >= eps
    return Node(
        np.log(clipped), "log", (x,), (lambda g: np.where(live, g / clipped, 0.0),), name
    )


def _broadcast_pair(a: Node, b: Node, op: str) -> None:
    if a.shape == b.shape or a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"{op} needs matching shapes or a scalar, got {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum().reshape(shape) if int(np.prod(shape, dtype=int)) == 1 else g.reshape(shape)


def add(a: Node, b, name: str | None = None) -> Node:
    a, b = _coerce(a), _coerce(b)
    _broadcast_pair(a, b, "add")
    return Node(
        a.data + b.data,
        "add",
        (a, b),
        (lambda g: _reduce_to(g, a.shape), lambda g: _reduce_to(g, b.shape)),
        name,
    )


def mul(a: Node, b, name: str | None = None) -> Node:
    a, b = _coerce(a), _coerce(b)
    _broadcast_pair(a, b, "mul")
    return Node(
        a.data * b.data,
        "mul",
        (a, b),
        (
            lambda g: _reduce_to(g * b.data, a.shape),
            lambda g: _reduce_to(g * a.data, b.shape),
        ),
        name,
    )


def _axes_tuple(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...]) -> np.ndarray:
    full = g
    for ax in sorted(axes):
        full = np.expand_dims(full, ax)
    return np.broadcast_to(full, shape)


def tsum(x: Node, axis=None, name: str | None = None) -> Node:
    axes = _axes_tuple(axis, x.data.ndim)
    out = x.data.sum(axis=axes)
    return Node(out, "sum", (x,), (lambda g: _expand(g, x.shape, axes).copy(),), name)


def mean(x: Node, axis=None, name: str | None = None) -> Node:
    axes = _axes_tuple(axis, x.data.ndim)
    count = int(np.prod([x.shape[ax] for ax in axes], dtype=int)) if axes else 1
    out = x.data.mean(axis=axes) if axes else x.data.copy()
    return Node(
        out, "mean", (x,), (lambda g: _expand(g, x.shape, axes) / count,), name
    )


def mse(a: Node, b, name: str | None = None) -> Node:
    """Mean squared error over all entries; scalar output."""
    a, b = _coerce(a), _coerce(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse needs matching shapes, got {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = max(diff.size, 1)
    out = np.asarray((diff * diff).sum() / n)
    return Node(
        out,
        "mse",
        (a, b),
        (lambda g: (2.0 / n) * diff * g, lambda g: (-2.0 / n) * diff * g),
        name,
    )


def bce(
    p: Node,
    target,
    eps: float = 1e-7,
    reduction: str = "sum",
    name: str | None = None,
) -> Node:
    """Binary cross-entropy of probabilities ``p`` against constant targets.

    Probabilities are clamped to [eps, 1-eps]; the clamp has zero slope.
    ``reduction`` is ``"sum"`` or ``"mean"`` over all entries.
    """
    if isinstance(target, Node):
        raise UsageError("bce targets are constants; pass an array, not a Node")
    t = np.asarray(target, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeError(f"bce target shape {t.shape} != {p.shape}")
    if reduction not in ("sum", "mean"):
        raise UsageError(f"unknown bce reduction {reduction!r}")
    ph = np.clip(p.data, eps, 1.0 - eps)
    live = (p.data >= eps) & (p.data <= 1.0 - eps)
    total = -(t * np.log(ph) + (1.0 - t) * np.log(1.0 - ph)).sum()
    scale = 1.0 / max(p.data.size, 1) if reduction == "mean" else 1.0
    out = np.asarray(total * scale)

    def vjp(g: np.ndarray) -> np.ndarray:
        grad = (ph - t) / (ph * (1.0 - ph)) * scale
        return np.where(live, grad, 0.0) * g

    return Node(out, "bce", (p,), (vjp,), name)


def bce_logits(
    z: Node,
    target,
    reduction: str = "sum",
    name: str | None = None,
) -> Node:
    """Binary cross-entropy straight from logits; stable at any magnitude.

    Identical in value to ``bce(sigmoid(z), t)`` away from saturation, but
    the gradient sigmoid(z) - t never dies when the probability rounds to
    0 or 1 in floating point.
    """
    if isinstance(target, Node):
        raise UsageError("bce_logits targets are constants; pass an array, not a Node")
    t = np.asarray(target, dtype=np.float64)
    if t.shape != z.shape:
        raise ShapeError(f"bce_logits target shape {t.shape} != {z.shape}")
    if reduction not in ("sum", "mean"):
        raise UsageError(f"unknown bce_logits reduction {reduction!r}")
    x = z.data
    per_entry = np.maximum(x, 0.0) - t * x + np.log1p(np.exp(-np.abs(x)))
    scale = 1.0 / max(x.size, 1) if reduction == "mean" else 1.0
    out = np.asarray(per_entry.sum() * scale)
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-x))
    return Node(out, "bce_logits", (z,), (lambda g: (sig - t) * scale * g,), name)


def log_softmax(x: Node, axis: int, name: str | None = None) -> Node:
    """Log of the softmax along ``axis``, computed without underflow."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - logsum
    s = np.exp(out)

    def vjp(g: np.ndarray) -> np.ndarray:
        return g - s * g.sum(axis=axis, keepdims=True)

    return Node(out, "log_softmax", (x,), (vjp,), name)


def pixel_outer(a: Node, b: Node, name: str | None = None) -> Node:
    """Per-pixel channel outer product: (Ca,H,W) x (Cb,H,W) -> (Ca,Cb,H,W)."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"pixel_outer needs (C,H,W) operands on one grid, got {a.shape} vs {b.shape}")
    out = a.data[:, None, :, :] * b.data[None, :, :, :]
    return Node(
        out,
        "pixel_outer",
        (a, b),
        (
            lambda g: np.einsum("cdhw,dhw->chw", g, b.data),
            lambda g: np.einsum("cdhw,chw->dhw", g, a.data),
        ),
        name,
    )


def pooled_extent(extent: int, kernel: int, stride: int) -> int:
    """Output extent of pooling: floor((extent - kernel) / stride) + 1."""
    return (extent - kernel) // stride + 1


def avg_pool3d(
    x: Node,
    kernel: Sequence[int],
    stride: Sequence[int],
    name: str | None = None,
) -> Node:
    """Strided average pooling over the trailing three axes of (C,D,H,W)."""
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool3d needs a (C,D,H,W) input, got {x.shape}")
    kernel = tuple(int(k) for k in kernel)
    stride = tuple(int(s) for s in stride)
    if len(kernel) != 3 or len(stride) != 3:
        raise ShapeError("kernel and stride must each have three entries")
    if any(k < 1 for k in kernel) or any(s < 1 for s in stride):
        raise ShapeError(f"kernel {kernel} and stride {stride} must be >= 1")
    spatial = x.shape[1:]
    if any(k > e for k, e in zip(kernel, spatial)):
        raise ShapeError(f"kernel {kernel} exceeds input extents {spatial}")
    out_shape = tuple(pooled_extent(e, k, s) for e, k, s in zip(spatial, kernel, stride))
    windows = np.lib.stride_tricks.sliding_window_view(x.data, kernel, axis=(1, 2, 3))
    windows = windows[:, :: stride[0], :: stride[1], :: stride[2]]
    out = windows.mean(axis=(-3, -2, -1))
    vol = kernel[0] * kernel[1] * kernel[2]

    def vjp(g: np.ndarray) -> np.ndarray:
        dx = np.zeros_like(x.data)
        gs = g / vol
        for i in range(kernel[0]):
            for j in range(kernel[1]):
                for k in range(kernel[2]):
                    dx[
                        :,
                        i : i + stride[0] * (out_shape[0] - 1) + 1 : stride[0],
                        j : j + stride[1] * (out_shape[1] - 1) + 1 : stride[1],
                        k : k + stride[2] * (out_shape[2] - 1) + 1 : stride[2],
                    ] += gs
        return dx

    return Node(np.ascontiguousarray(out), "avg_pool3d", (x,), (vjp,), name)


def reshape(x: Node, shape, name: str | None = None) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=int)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    return Node(
        x.data.reshape(shape), "reshape", (x,), (lambda g: g.reshape(x.shape),), name
    )


def moveaxis(x: Node, src, dst, name: str | None = None) -> Node:
    out = np.ascontiguousarray(np.moveaxis(x.data, src, dst))
    return Node(
        out, "moveaxis", (x,), (lambda g: np.moveaxis(g, dst, src).copy(),), name
    )


def concat(parts: Sequence[Node], axis: int, name: str | None = None) -> Node:
    if not parts:
        raise ShapeError("concat needs at least one operand")
    ndim = parts[0].data.ndim
    axis = axis % ndim
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != ndim or other[:axis] + other[axis + 1 :] != base[:axis] + base[axis + 1 :]:
            raise ShapeError(f"concat shapes disagree off axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=axis)

    def make_vjp(i: int):
        sl = [slice(None)] * ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: np.ascontiguousarray(g[sl])

    return Node(out, "concat", tuple(parts), tuple(make_vjp(i) for i in range(len(parts))), name)


def dropout_mask(shape, rate: float, seed: int) -> TensorRecord:
    """Inverted-scale dropout mask of {0, 1/(1-rate)} values; mean 1 in expectation."""
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must be in [0, 1), got {rate}")
    shape = tuple(int(s) for s in shape)
    rng = make_rng(seed, "dropout")
    keep = rng.random(shape) >= rate
    return TensorRecord(keep.astype(np.float64) / (1.0 - rate))


def dropout(x: Node, rate: float, seed: int, name: str | None = None) -> Node:
    """Multiply by a seeded dropout mask; identity when rate == 0."""
    if rate == 0.0:
        return x
    mask = dropout_mask(x.shape, rate, seed)
    return mul(x, constant(mask, name="dropout_mask"), name=name)


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Reverse-mode sweep from a scalar ``root``; returns grads per node."""
    if root.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {root.shape}")
    topo: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    grads: dict[Node, np.ndarray] = {root: np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.get(node)
        if g is None:
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            contribution = vjp(g)
            existing = grads.get(parent)
            grads[parent] = contribution if existing is None else existing + contribution
    return grads


def collect_parameters(root: Node) -> dict[str, Node]:
    """All parameter leaves reachable from ``root``, keyed by name."""
    found: dict[str, Node] = {}
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op == "param":
            prior = found.get(node.name)
            if prior is not None and prior is not node:
                raise UsageError(f"parameter {node.name!r} bound to two different leaves")
            found[node.name] = node
        stack.extend(node._parents)
    return found
