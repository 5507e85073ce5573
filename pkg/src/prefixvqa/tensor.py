"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every primitive builds its output together with a closure mapping the output
gradient to gradients for each parent.  ``backward`` orders the recorded
nodes topologically (a :class:`Graph`) and visits each node once.

Values are stored as C-contiguous ``numpy.float64`` arrays.  Broadcasting is
limited to ``add``/``mul``/``matmul`` where numpy semantics apply; gradients
are summed back to the parent shape.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateMaskError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal


class Graph:
    """Topologically ordered record of the operations that produced a loss."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> Graph:
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def free(self) -> None:
        for node in self.nodes:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
        self.nodes = []


def backward(loss: Tensor, graph: Graph | None = None, *, params: Iterable[Tensor] = (),
             retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Tensors in ``params`` that the loss does not depend on receive zero
    gradient buffers.  The graph is freed afterwards unless ``retain_graph``.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    graph = graph or Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if not retain_graph:
        graph.free()


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: x {x.shape}, weight {weight.shape}")
    w = weight.data
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])  # one 2-D BLAS call instead of a batched matmul
    out = x2 @ w.T
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (w.shape[0],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._result(out, parents, bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.data, axes), (a,),
                          lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return Tensor._result(np.ascontiguousarray(a.data).reshape(shape), (a,),
                          lambda g: (g.reshape(src),))


def expand(a: Tensor, leading: Sequence[int]) -> Tensor:
    """Repeat ``a`` along new leading axes (gradient sums them back)."""
    shape = tuple(leading) + a.shape
    n_new = len(leading)
    return Tensor._result(np.broadcast_to(a.data, shape).copy(), (a,),
                          lambda g: (g.sum(axis=tuple(range(n_new))),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (the sequence axis in practice)."""
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise DimensionError(f"concat shape mismatch: {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return Tensor._result(out, tuple(tensors), bw)


def slice_(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return index(a, tuple(idx))


def index(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; gradient scatters back with ``np.add.at``."""
    out = a.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.array(out)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(np.array(out, copy=True), (a,), bw)


def sum_(a: Tensor) -> Tensor:
    return Tensor._result(np.array(a.data.sum()), (a,),
                          lambda g: (np.full_like(a.data, float(g)),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return Tensor._result(np.array(a.data.mean()), (a,),
                          lambda g: (np.full_like(a.data, float(g) / n),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * d,)

    return Tensor._result(out, (a,), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return Tensor._result(out, (table,), bw)


def place_rows(base: Tensor, rows: Tensor, starts) -> Tensor:
    """Overwrite ``base[b, s_b:s_b+k]`` with ``rows[b]`` for every batch entry.

    ``base`` is (B, n, e), ``rows`` is (B, k, e), ``starts`` holds B offsets.
    """
    starts = np.asarray(starts, dtype=np.int64)
    bsz, k = rows.shape[0], rows.shape[1]
    if base.ndim != 3 or rows.ndim != 3 or base.shape[0] != bsz or base.shape[2] != rows.shape[2]:
        raise DimensionError(f"place_rows shape mismatch: {base.shape} <- {rows.shape}")
    if starts.shape != (bsz,) or (starts < 0).any() or (starts + k > base.shape[1]).any():
        raise DimensionError("place_rows offsets out of range")
    b_idx = np.repeat(np.arange(bsz), k)
    t_idx = (starts[:, None] + np.arange(k)[None, :]).reshape(-1)
    out = base.data.copy()
    out[b_idx, t_idx] = rows.data.reshape(bsz * k, -1)

    def bw(g):
        gb = g.copy()
        gb[b_idx, t_idx] = 0.0
        gr = g[b_idx, t_idx].reshape(rows.shape)
        return gb, gr

    return Tensor._result(out, (base, rows), bw)


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are 0."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not mask.any(axis=-1).all():
        raise DegenerateMaskError("softmax row has every entry masked")
    z = np.where(mask, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._result(y, (logits,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis with population variance, then apply gain/bias."""
    e = x.shape[-1]
    if gain.shape != (e,) or bias.shape != (e,):
        raise DimensionError(f"layer_norm affine shape {gain.shape}/{bias.shape} vs last dim {e}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, e)
        dgain = (flat_g * xhat.reshape(-1, e)).sum(axis=0)
        dbias = flat_g.sum(axis=0)
        return dx, dgain, dbias

    return Tensor._result(out, (x, gain, bias), bw)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_masked(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked positions.

    ``logits`` is (T, V) or (B, T, V).  For a batch the result is the mean of
    the per-sample means, so padding a sample never changes its weight.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=bool)
    single = logits.ndim == 2
    lg = logits.data[None] if single else logits.data
    tg = targets[None] if single else targets
    mk = mask[None] if single else mask
    if tg.shape != lg.shape[:-1] or mk.shape != tg.shape:
        raise DimensionError(f"targets {targets.shape}/mask {mask.shape} do not match logits {logits.shape}")
    vocab = lg.shape[-1]
    if tg.size and (tg.min() < 0 or tg.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    counts = mk.sum(axis=-1)
    if (counts == 0).any():
        raise DegenerateMaskError("cross-entropy with every position masked")
    logp = log_softmax_np(lg)
    picked = np.take_along_axis(logp, tg[..., None], axis=-1)[..., 0]
    per_sample = -(picked * mk).sum(axis=-1) / counts
    loss = per_sample.mean()
    weights = mk / counts[:, None] / lg.shape[0]

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, tg[..., None],
                          np.take_along_axis(grad, tg[..., None], axis=-1) - 1.0, axis=-1)
        grad *= (weights * float(g))[..., None]
        return (grad[0] if single else grad,)

    return Tensor._result(np.array(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backward-mode and central-difference gradients.

    ``f`` must read ``x`` (its data is perturbed in place and restored).
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    backward(loss, params=[x])
    analytic = x.grad.copy()
    x.grad = None
    x.requires_grad = was
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return max_relative_error(analytic, numeric)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))
