"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a closure mapping
the output gradient to one gradient per parent. ``backward`` walks the
recorded graph once in reverse topological order.

Forward outputs are checked for NaN/Inf and raise ``NumericError``
immediately. Compute precision is 32-bit by default; ``precision("f64")``
(or ``MMGC_PRECISION=f64`` in the environment) switches newly created
tensors to 64-bit, which is what the gradient checker runs under.
"""

from __future__ import annotations

import contextlib
import math
import os
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .errors import DegenerateVector, GraphError, MaskError, NumericError, ShapeMismatch

_PRECISIONS = {"f32": np.float32, "f64": np.float64}


def _env_dtype() -> type:
    name = os.environ.get("MMGC_PRECISION", "f32").strip().lower()
    if name not in _PRECISIONS:
        raise ValueError(f"MMGC_PRECISION must be one of {sorted(_PRECISIONS)}, got {name!r}")
    return _PRECISIONS[name]


_default_dtype = _env_dtype()
_grad_enabled = True


def get_dtype() -> type:
    return _default_dtype


def set_precision(name: str) -> None:
    global _default_dtype
    if name not in _PRECISIONS:
        raise ValueError(f"precision must be one of {sorted(_PRECISIONS)}")
    _default_dtype = _PRECISIONS[name]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors."""
    previous = _default_dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_default_dtype"] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording a graph."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A numpy array plus an optional gradient slot and graph links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op}: forward pass produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded from ``shape``."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        # constants (scalars or arrays) keep the tensor's dtype
        const = np.asarray(b, dtype=a.dtype)
        sa = a.shape
        return _result(a.data * const, (a,), lambda g: (unbroadcast(g * const, sa),), "mul")
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), backward_fn, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    x = as_tensor(x)
    n_in = weight.shape[1]
    if x.shape[-1] != n_in:
        raise ShapeMismatch(f"linear expects last dim {n_in}, got input of shape {x.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, n_in)
    w = weight.data
    out = x2 @ w.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, w.shape[0])

    def backward_fn(g):
        g2 = g.reshape(-1, w.shape[0])
        gx = (g2 @ w).reshape(*lead, n_in)
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward_fn, "linear")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(a.shape[i] for i in axes)
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(
        np.broadcast_to(a.data, shape), (a,), lambda g: (unbroadcast(g, old),), "broadcast_to"
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward_fn, "concat")


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; the backward pass scatters into used rows only."""
    ids = np.asarray(ids, dtype=np.int64)
    n_rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"token id out of range [0, {n_rows}): min={ids.min()}, max={ids.max()}")
    shape = table.shape

    def backward_fn(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _result(table.data[ids], (table,), backward_fn, "embedding")


# ---------------------------------------------------------------------------
# nonlinearities and normalizations
# ---------------------------------------------------------------------------


def _check_finite_input(x: Tensor, op: str) -> None:
    if not np.isfinite(x.data).all():
        raise NumericError(f"{op}: input contains non-finite values")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite_input(x, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward_fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite_input(x, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward_fn, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm params {gamma.shape}/{beta.shape} do not match last dim {d}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(xd.ndim - 1))

    def backward_fn(g):
        gxhat = g * gd
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), backward_fn, "layer_norm")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF written via erf."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def backward_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _result(xd * cdf, (x,), backward_fn, "gelu")


def l2_normalize(x: Tensor, axis: int = -1, min_norm: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    if (norm < min_norm).any():
        raise DegenerateVector(f"cannot L2-normalize a vector with norm < {min_norm}")
    y = xd / norm

    def backward_fn(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _result(y, (x,), backward_fn, "l2_normalize")


# ---------------------------------------------------------------------------
# attention and loss
# ---------------------------------------------------------------------------


def _attention_grads(g, q, k, v, weights, scale):
    gv = np.swapaxes(weights, -1, -2) @ g
    gw = g @ np.swapaxes(v, -1, -2)
    gs = weights * (gw - (gw * weights).sum(axis=-1, keepdims=True))
    gq = (gs @ k) * scale
    gk = (np.swapaxes(gs, -1, -2) @ q) * scale
    return gq, gk, gv


def scaled_dot_product_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None, return_weights: bool = False
):
    """softmax(q k^T / sqrt(d_head)) v over the last two axes.

    ``mask`` is boolean, True where a key may be attended, and must broadcast
    to the score shape ``(..., n_queries, n_keys)``.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    if k.shape[-2] == 0:
        raise MaskError("attention over an empty key set")
    qd, kd, vd = q.data, k.data, v.data
    scale = 1.0 / math.sqrt(qd.shape[-1])
    scores = (qd @ np.swapaxes(kd, -1, -2)) * scale
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
        if not mask.any(axis=-1).all():
            raise MaskError("every key is masked for at least one query")
        scores = np.where(mask, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    weights = e / e.sum(axis=-1, keepdims=True)
    out = _result(
        weights @ vd,
        (q, k, v),
        lambda g: _attention_grads(g, qd, kd, vd, weights, scale),
        "attention",
    )
    return (out, weights) if return_weights else out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    _check_finite_input(logits, "cross_entropy")
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeMismatch(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"label out of range [0, {n_classes})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)
    count = max(labels.size, 1)
    loss = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    def backward_fn(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], -1) - 1.0, -1)
        return (grad * (g / count),)

    return _result(loss, (logits,), backward_fn, "cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass and gradient checking
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
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
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.array(g, dtype=node.data.dtype).reshape(node.shape)
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float | None = None,
    max_entries: int | None = None,
    seed: int = 0,
    order: int = 2,
) -> float:
    """Max relative error between autodiff and central-difference gradients of ``f`` at ``x``.

    ``x`` is perturbed in place, one coordinate at a time, and restored.
    With ``max_entries`` only a seeded random subset of coordinates is probed.
    ``order=4`` uses the five-point stencil, whose O(h^4) truncation error
    allows a larger step (less round-off) for the same accuracy.
    The relative error uses ``max(|a|, |b|, 1e-8)`` as denominator.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if h is None:
        h = 1e-4 if x.dtype == np.float64 else 1e-2
    x.grad = None
    was = x.requires_grad
    x.requires_grad = True
    try:
        backward(f(x))
        analytic = np.zeros(x.data.size) if x.grad is None else x.grad.astype(np.float64).reshape(-1)
        flat = x.data.reshape(-1)
        if not np.shares_memory(flat, x.data):
            raise ValueError("finite_diff_check needs a contiguous tensor")
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(np.random.default_rng(seed).choice(flat.size, max_entries, replace=False))
        worst = 0.0
        with no_grad():
            for i in indices:
                orig = flat[i]

                def at(delta):
                    flat[i] = orig + delta
                    point = float(flat[i])
                    value = float(f(x).data)
                    flat[i] = orig
                    if not math.isfinite(value):
                        raise NumericError("finite_diff_check: function value is not finite")
                    return point, value

                (up, f_plus), (down, f_minus) = at(h), at(-h)
                if order == 2:
                    numeric = (f_plus - f_minus) / (up - down)
                else:
                    f_plus2, f_minus2 = at(2 * h)[1], at(-2 * h)[1]
                    numeric = (8 * (f_plus - f_minus) - (f_plus2 - f_minus2)) / (12 * h)
                a = analytic[i]
                err = abs(numeric - a) / max(abs(numeric), abs(a), 1e-8)
                worst = max(worst, err)
    finally:
        x.requires_grad = was
        x.grad = None
    return worst
