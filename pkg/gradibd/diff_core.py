# diff_core.py
"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every operation returns a new ``Tensor`` that remembers its inputs and a rule
mapping the output gradient to input gradients. ``backward`` walks that tape
from a scalar loss in reverse topological order, accumulating gradients of
values used more than once. The tape is rebuilt on every forward pass.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np

from gradibd.errors import EmptyInput, NonFiniteGradient, NotScalar, ShapeMismatch

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-12
LAYER_NORM_EPS = 1e-5

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """A differentiable dense value (the ``DiffValue`` of the model)."""
    __slots__ = ("data", "grad", "name", "_parents", "_backward")
    # Make ``ndarray <op> Tensor`` dispatch to Tensor's reflected operators.
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, name: Optional[str] = None,
                 _parents: Tuple["Tensor", ...] = (), _backward: Optional[BackwardFn] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], rule: BackwardFn) -> Tensor:
    return Tensor(data, _parents=parents, _backward=rule)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# === Elementwise and structural primitives ===

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data / b.data, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product for 1-D and 2-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")

    def rule(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        if a.ndim == 2:
            return np.outer(g, b.data), a.data.T @ g
        return g * b.data, g * a.data

    return _result(a.data @ b.data, (a, b), rule)


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got shape {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def sum(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def rule(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), rule)


def mean(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return sum(a, axis=axis, keepdims=keepdims) / float(count)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def relu(x: ArrayLike) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    x = as_tensor(x)
    positive = x.data > 0
    return _result(np.where(positive, x.data, 0.0), (x,), lambda g: (g * positive,))


def row_norm(a: ArrayLike) -> Tensor:
    """Euclidean norm along the last axis, kept as a trailing axis of size 1."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    safe = np.where(out > 0, out, 1.0)
    return _result(out, (a,), lambda g: (np.where(out > 0, g * a.data / safe, 0.0),))


def gather_rows(table: Tensor, index: Union[np.ndarray, Sequence[int]]) -> Tensor:
    """Embedding lookup: ``table[index]`` with scatter-add backward."""
    index = np.asarray(index, dtype=np.int64)

    def rule(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(table.data[index], (table,), rule)


def stack(rows: Sequence[Tensor]) -> Tensor:
    rows = [as_tensor(r) for r in rows]
    if not rows:
        raise EmptyInput("cannot stack an empty list")
    shapes = {r.shape for r in rows}
    if len(shapes) != 1:
        raise ShapeMismatch(f"cannot stack rows of shapes {sorted(shapes)}")
    return _result(np.stack([r.data for r in rows]), tuple(rows),
                   lambda g: tuple(g[i] for i in range(len(rows))))


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


# === Layers ===

def linear(x: ArrayLike, W: Tensor, b: Tensor) -> Tensor:
    """y = W x + b for a vector x, or row-wise for a matrix of row vectors."""
    x = as_tensor(x)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise ShapeMismatch(f"linear: x {x.shape}, W {W.shape}, b {b.shape}")
    return matmul(x, transpose(W)) + b


def layer_norm(x: ArrayLike, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Standardize along the last axis with population variance, then scale and shift."""
    x = as_tensor(x)
    d = x.shape[-1] if x.ndim else 0
    if d < 2 or gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    centered = x - mean(x, axis=-1, keepdims=True)
    variance = mean(centered * centered, axis=-1, keepdims=True)
    return centered / sqrt(variance + eps) * gamma + beta


def cosine_sim(a: ArrayLike, b: ArrayLike) -> Tensor:
    """a . b / (|a| |b| + 1e-12) for two vectors, as a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatch(f"cosine_sim: {a.shape} vs {b.shape}")
    value = sum(a * b) / (row_norm(a) * row_norm(b) + COSINE_EPS)
    return reshape(value, ())


# === Bucket-block graph primitives ===
# A block ``(src_start, src_stop, dst_start, dst_stop)`` stands for every edge from
# the source row range to the destination row range. Per-edge values are laid out
# block by block, each block as a (dst, src) matrix in row-major order.

Block = Tuple[int, int, int, int]


def block_offsets(blocks: Sequence[Block]) -> List[int]:
    """Start of each block in the flat edge vector, plus the total edge count."""
    offsets = [0]
    for s0, s1, d0, d1 in blocks:
        offsets.append(offsets[-1] + (s1 - s0) * (d1 - d0))
    return offsets


def block_cosine(H: ArrayLike, blocks: Sequence[Block]) -> Tensor:
    """Per-edge ``cos(H[dst], H[src])`` with the same epsilon as ``cosine_sim``."""
    H = as_tensor(H)
    if H.ndim != 2:
        raise ShapeMismatch(f"block_cosine expects a matrix, got shape {H.shape}")
    offsets = block_offsets(blocks)
    norms = np.sqrt((H.data * H.data).sum(axis=1))
    inv_norms = np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 0.0)
    out = np.empty(offsets[-1])
    for (s0, s1, d0, d1), o0, o1 in zip(blocks, offsets, offsets[1:]):
        denom = np.outer(norms[d0:d1], norms[s0:s1]) + COSINE_EPS
        out[o0:o1] = (H.data[d0:d1] @ H.data[s0:s1].T / denom).ravel()

    def rule(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(H.data)
        for (s0, s1, d0, d1), o0, o1 in zip(blocks, offsets, offsets[1:]):
            Hd, Hs = H.data[d0:d1], H.data[s0:s1]
            nd, ns = norms[d0:d1], norms[s0:s1]
            denom = np.outer(nd, ns) + COSINE_EPS
            Q = g[o0:o1].reshape(d1 - d0, s1 - s0) / denom
            R = Q * (Hd @ Hs.T) / denom
            grad[d0:d1] += Q @ Hs - (R @ ns)[:, np.newaxis] * Hd * inv_norms[d0:d1, np.newaxis]
            grad[s0:s1] += Q.T @ Hd - (R.T @ nd)[:, np.newaxis] * Hs * inv_norms[s0:s1, np.newaxis]
        return (grad,)

    return _result(out, (H,), rule)


def segment_sum(values: ArrayLike, segments: Union[np.ndarray, Sequence[int]], n_segments: int) -> Tensor:
    """``out[s]`` is the sum of ``values[i]`` over every ``segments[i] == s``."""
    values = as_tensor(values)
    segments = np.asarray(segments, dtype=np.int64)
    if values.ndim != 1 or segments.shape != values.shape:
        raise ShapeMismatch(f"segment_sum: values {values.shape}, segments {segments.shape}")
    if segments.size and (segments.min() < 0 or segments.max() >= n_segments):
        raise ShapeMismatch(f"segment ids must lie in [0, {n_segments})")
    out = np.bincount(segments, weights=values.data, minlength=n_segments).astype(np.float64)
    return _result(out, (values,), lambda g: (g[segments],))


def block_aggregate(weights: ArrayLike, H: ArrayLike, blocks: Sequence[Block]) -> Tensor:
    """Messages ``M[v] = sum_u w(u -> v) H[u]``; rows outside every destination range stay zero."""
    weights, H = as_tensor(weights), as_tensor(H)
    offsets = block_offsets(blocks)
    if weights.shape != (offsets[-1],) or H.ndim != 2:
        raise ShapeMismatch(f"block_aggregate: weights {weights.shape} for {offsets[-1]} edges, H {H.shape}")
    out = np.zeros_like(H.data)
    for (s0, s1, d0, d1), o0, o1 in zip(blocks, offsets, offsets[1:]):
        out[d0:d1] += weights.data[o0:o1].reshape(d1 - d0, s1 - s0) @ H.data[s0:s1]

    def rule(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad_w = np.empty_like(weights.data)
        grad_h = np.zeros_like(H.data)
        for (s0, s1, d0, d1), o0, o1 in zip(blocks, offsets, offsets[1:]):
            W = weights.data[o0:o1].reshape(d1 - d0, s1 - s0)
            grad_w[o0:o1] = (g[d0:d1] @ H.data[s0:s1].T).ravel()
            grad_h[s0:s1] += W.T @ g[d0:d1]
        return grad_w, grad_h

    return _result(out, (weights, H), rule)


def mean_pool(rows: Union[Tensor, Sequence[Tensor]]) -> Tensor:
    """Global average over rows, from a list of vectors or a 2-D tensor."""
    if isinstance(rows, Tensor):
        if rows.ndim != 2 or rows.shape[0] == 0:
            raise EmptyInput(f"mean_pool needs at least one row, got shape {rows.shape}")
        return mean(rows, axis=0)
    if not rows:
        raise EmptyInput("mean_pool needs at least one row")
    return mean(stack(rows), axis=0)


def bce_with_logit(logit: ArrayLike, label: Union[int, float, np.ndarray]) -> Tensor:
    """Binary cross-entropy on logits: max(l, 0) - l*y + log(1 + exp(-|l|))."""
    logit = as_tensor(logit)
    y = np.asarray(label, dtype=np.float64)
    l = logit.data
    loss = np.maximum(l, 0.0) - l * y + np.log1p(np.exp(-np.abs(l)))
    return _result(loss, (logit,), lambda g: (g * (_stable_sigmoid(l) - y),))


# === Reverse pass ===

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack_: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every value reachable from a scalar loss.

    Gradients of reachable values are reset first, so calling this twice on
    the same tape gives the same result.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    for node in order:
        node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if g is not None:
                parent.grad = parent.grad + g


# === Optimizer ===

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        """Snapshot with copied moment arrays; later steps leave it untouched."""
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         {n: a.copy() for n, a in self.m.items()}, {n: a.copy() for n, a in self.v.items()})


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Nothing changes if any check fails.

    Raises:
        ShapeMismatch: If a gradient or moment does not match its parameter.
        NonFiniteGradient: If a gradient holds NaN or inf.
    """
    for name, value in params.items():
        if name not in grads or grads[name].shape != value.shape:
            raise ShapeMismatch(f"gradient for {name!r} does not match shape {value.shape}")
        if name in state.m and state.m[name].shape != value.shape:
            raise ShapeMismatch(f"Adam moments for {name!r} do not match shape {value.shape}")
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradient(name)

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    updated = {}
    for name, value in params.items():
        g = grads[name]
        m = state.beta1 * state.m.get(name, np.zeros_like(value)) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(name, np.zeros_like(value)) + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        updated[name] = value - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return updated, state


# === Gradient checking ===

def numerical_gradient(loss_fn: Callable[[], float], value: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``loss_fn`` w.r.t. ``value.data`` (perturbed in place)."""
    grad = np.zeros_like(value.data)
    flat = value.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = loss_fn()
        flat[i] = original - step
        minus = loss_fn()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error. Norms below ``floor`` count as ``floor``, so
    vanishing gradients compare by their finite-difference noise."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)
