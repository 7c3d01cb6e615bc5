"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

Only the operators needed by the encoders and losses are provided. A graph
is built implicitly while the forward pass runs: each non-leaf ``Tensor``
keeps references to its parents and a closure that maps the upstream
gradient to gradients for those parents.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "NumericError",
    "no_grad",
    "constant",
    "matmul",
    "add",
    "mul",
    "scale",
    "embedding_lookup",
    "softmax",
    "sigmoid",
    "relu",
    "tanh",
    "absolute",
    "concat",
    "transpose",
    "reshape",
    "reduce_mean",
    "reduce_sum",
    "cosine_similarity",
    "cross_entropy",
    "topological_order",
    "backward",
    "finite_difference_check",
    "OPERATORS",
]

COSINE_EPS = 1e-12


class ShapeError(ValueError):
    """Operator inputs have incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise GraphError(f"tensor of shape {self.shape} is not a scalar")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, detail="not broadcastable") from None


# ---------------------------------------------------------------------------
# operators


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; ``b`` may be 2-D and shared across batch dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims not broadcastable") from None
    shared = b.ndim == 2
    if shared:
        # one GEMM over all leading dims of a
        k = a.shape[-1]
        out = (a.data.reshape(-1, k) @ b.data).reshape(*a.shape[:-1], b.shape[1])
    else:
        out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if shared:
            g2 = g.reshape(-1, b.shape[1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    out = a.data + b.data

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    out = a.data * b.data

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def embedding_lookup(table: Tensor, indices, padding_idx: int | None = None) -> Tensor:
    """Gather rows of a 2-D ``table``.

    Rows requested at ``padding_idx`` come back as zeros and that row of the
    table never receives gradient.
    """
    idx = np.asarray(indices)
    if table.ndim != 2:
        raise ShapeError("embedding_lookup", table.shape, idx.shape, detail="table must be 2-D")
    if not np.issubdtype(idx.dtype, np.integer):
        if idx.size:
            raise ShapeError("embedding_lookup", table.shape, idx.shape, detail="indices must be integers")
        idx = idx.astype(np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = int(idx.max() if idx.max() >= n else idx.min())
        raise IndexError(f"embedding_lookup: index {bad} out of range for table with {n} rows")
    out = table.data[idx]
    pad = None
    if padding_idx is not None:
        pad = idx == padding_idx
        if pad.any():
            out = out.copy()
            out[pad] = 0.0

    def bw(g):
        gt = np.zeros_like(table.data)
        flat_idx = idx.reshape(-1)
        flat_g = g.reshape(-1, table.shape[1])
        if pad is not None:
            keep = ~pad.reshape(-1)
            flat_idx, flat_g = flat_idx[keep], flat_g[keep]
        np.add.at(gt, flat_idx, flat_g)
        return (gt,)

    return _make(out, (table,), bw, "embedding_lookup")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), bw, "softmax")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    m = a.data > 0
    return _make(a.data * m, (a,), lambda g: (g * m,), "relu")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def absolute(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", detail="no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", *(t.shape for t in tensors), detail=f"axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, tuple(tensors), bw, "concat")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"bad permutation {axes}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "reduce_sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[x] for x in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(out, (a,), bw, "reduce_mean")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine along the last axis.

    Pairs where either norm is below ``COSINE_EPS`` yield exactly 0 and pass
    no gradient; use :func:`degenerate_mask` to find them.
    """
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    sq_a = (a.data * a.data).sum(-1)
    sq_b = (b.data * b.data).sum(-1)
    ok = (np.sqrt(sq_a) >= COSINE_EPS) & (np.sqrt(sq_b) >= COSINE_EPS)
    safe_a = np.sqrt(np.where(ok, sq_a, 1.0))
    safe_b = np.sqrt(np.where(ok, sq_b, 1.0))
    dot = (a.data * b.data).sum(-1)
    # one square root of the product keeps parallel pairs at exactly +-1
    cos = np.where(ok, np.clip(dot / np.sqrt(np.where(ok, sq_a * sq_b, 1.0)), -1.0, 1.0), 0.0)

    def bw(g):
        gg = np.where(ok, g, 0.0)[..., None]
        inv = (1.0 / (safe_a * safe_b))[..., None]
        c = cos[..., None]
        ga = gb = None
        if a.requires_grad:
            ga = gg * (b.data * inv - c * a.data / (safe_a**2)[..., None])
        if b.requires_grad:
            gb = gg * (a.data * inv - c * b.data / (safe_b**2)[..., None])
        return ga, gb

    return _make(cos, (a, b), bw, "cosine_similarity")


def degenerate_mask(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """True where a cosine between rows of ``a`` and ``b`` is undefined."""
    na = np.sqrt((a * a).sum(-1))
    nb = np.sqrt((b * b).sum(-1))
    return (na < COSINE_EPS) | (nb < COSINE_EPS)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of integer ``labels`` under ``logits``."""
    y = np.asarray(labels, dtype=np.int64)
    if logits.shape[:-1] != y.shape:
        raise ShapeError("cross_entropy", logits.shape, y.shape)
    n_cls = logits.shape[-1]
    if y.size and (y.min() < 0 or y.max() >= n_cls):
        raise IndexError(f"cross_entropy: label out of range for {n_cls} classes")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, y[..., None], axis=-1)[..., 0]
    n = max(y.size, 1)
    loss = (lse - picked).sum() / n

    def bw(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, y[..., None], np.take_along_axis(p, y[..., None], -1) - 1.0, -1)
        return (p * (g / n),)

    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")


OPERATORS = (
    "matmul",
    "add",
    "scale",
    "embedding_lookup",
    "softmax",
    "sigmoid",
    "relu",
    "concat",
    "transpose",
    "reduce_mean",
    "cosine_similarity",
    "cross_entropy",
)


# ---------------------------------------------------------------------------
# backward pass


def topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Backpropagate from scalar ``root``.

    Returns a map from leaf tensor to gradient. When ``leaves`` is given,
    every listed leaf appears in the map (zeros if ``root`` does not depend
    on it). Each returned leaf also gets its ``.grad`` attribute set.
    """
    if root.data.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    found: dict[int, Tensor] = {}
    if root.requires_grad:
        grads[id(root)] = np.ones_like(root.data)
        for node in reversed(topological_order(root)):
            g = grads.pop(id(node), None) if not node.is_leaf else grads.get(id(node))
            if g is None:
                continue
            if node.is_leaf:
                found[id(node)] = node
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out: dict[Tensor, np.ndarray] = {}
    targets = list(leaves) if leaves is not None else list(found.values())
    for leaf in targets:
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64)
        out[leaf] = leaf.grad
    return out


def finite_difference_check(fn: Callable[[], Tensor], leaf: Tensor, step: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the forward pass from scratch and returns a scalar; it is
    called ``2 * leaf.size + 1`` times. ``leaf.data`` is perturbed in place
    and restored.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    root = fn()
    if not np.isfinite(root.data).all():
        raise NumericError("forward pass produced a non-finite value")
    analytic = backward(root, [leaf])[leaf].copy()
    numeric = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn().item()
        flat[i] = orig - step
        lo = fn().item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError("forward pass produced a non-finite value")
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))
