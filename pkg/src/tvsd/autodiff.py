"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records a closure on its output when any input requires grad and
recording is enabled (see :func:`no_grad`). :func:`backward` walks the
recorded graph in reverse topological order exactly once per node.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

_GRAD_ENABLED = True
_GELU_C = math.sqrt(2.0 / math.pi)


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor | None, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor division only supports scalar divisors")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        grads = _run_backward(self)
        for node, g in grads.items():
            if node.requires_grad and not node._parents:
                node.grad = g if node.grad is None else node.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite output from {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        # parents that were not differentiable at construction stay cut off for good
        out._parents = tuple(p if p.requires_grad else None for p in parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make(a.data * c, (a,), bw, "scale")


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_np(a.data)

    def bw(g):
        return (g * y * (1.0 - y),)

    return _make(y, (a,), bw, "sigmoid")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return expit(x)


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid_np(x)

    def bw(g):
        return (g * (s + x * s * (1.0 - s)),)

    return _make(x * s, (a,), bw, "silu")


def gelu(a: Tensor) -> Tensor:
    # tanh approximation; backward is the exact derivative of that approximation
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(0.5 * x * (1.0 + t), (a,), bw, "gelu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(0.0, x)

    def bw(g):
        return (g * _sigmoid_np(x),)

    return _make(y, (a,), bw, "softplus")


def glu(a: Tensor, axis: int = -1) -> Tensor:
    """First half gated by sigmoid of the second half along ``axis``."""
    x = a.data
    n = x.shape[axis]
    if n % 2:
        raise ValueError("glu needs an even-sized axis")
    lin, gate = np.split(x, 2, axis=axis)
    s = _sigmoid_np(gate)

    def bw(g):
        return (np.concatenate([g * s, g * lin * s * (1.0 - s)], axis=axis),)

    return _make(lin * s, (a,), bw, "glu")


def straight_through(source: Tensor, value: np.ndarray) -> Tensor:
    """Forward returns ``value`` verbatim; backward passes the gradient to ``source`` unchanged."""
    value = np.asarray(value, dtype=np.float64)
    if value.shape != source.shape:
        raise ValueError(f"straight_through shape mismatch {source.shape} vs {value.shape}")

    def bw(g):
        return (g,)

    return _make(value.copy(), (source,), bw, "straight_through")


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ---------------------------------------------------------------- shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul needs operands with ndim >= 2")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    if bd.ndim == 2 and ad.ndim > 2:
        # weight-style product: fold leading axes so the weight gradient is one GEMM
        a2 = ad.reshape(-1, ad.shape[-1])

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make((a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],)), (a, b), bw, "matmul")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape

    def bw(g):
        return (g.reshape(src),)

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), bw, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of nothing")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat shape mismatch: {exc}") from None

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, tensors, bw, "concat")


def getitem(a: Tensor, key) -> Tensor:
    src = a.shape
    data = a.data[key]
    basic = _is_basic_index(key)

    def bw(g):
        out = np.zeros(src)
        if basic:
            out[key] += g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _make(np.array(data, copy=True), (a,), bw, "getitem")


def _is_basic_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in keys)


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    axis = axis % a.ndim
    out, start = [], 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + n)
        out.append(getitem(a, tuple(idx)))
        start += n
    return out


def embedding_lookup(table: Tensor, idx) -> Tensor:
    """Rows of a 2-D ``table`` gathered by integer ``idx`` of any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise ValueError("embedding table must be 2-D")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"embedding index out of range [0, {n})")
    src = table.shape

    def bw(g):
        out = np.zeros(src)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, src[1]))
        return (out,)

    return _make(table.data[idx], (table,), bw, "embedding_lookup")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def mean_pool_axis(a: Tensor, axis: int, mask: np.ndarray | None = None) -> Tensor:
    """Mean over ``axis``; with ``mask`` (broadcastable to ``a``) only kept positions count."""
    if mask is None:
        return mean(a, axis=axis)
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), a.shape)
    cnt = np.maximum(m.sum(axis=axis, keepdims=True), 1.0)
    w = m / cnt

    def bw(g):
        return (np.expand_dims(g, axis) * w,)

    return _make((a.data * w).sum(axis=axis), (a,), bw, "mean_pool_axis")


# ---------------------------------------------------------------- normalisation


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with optional boolean keep-mask; masked entries get probability exactly 0.

    Rows with nothing kept return all zeros.
    """
    x = a.data
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        xm = np.where(keep, x, -np.inf)
        mx = np.max(xm, axis=axis, keepdims=True)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        e = np.where(keep, np.exp(np.where(keep, x, 0.0) - mx), 0.0)
    else:
        e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), bw, "softmax")


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    gd = gamma.data
    d = x.shape[-1]

    def bw(g):
        gxh = g * gd
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        ggamma = (g * xh).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _make(xh * gd + beta.data, (a, gamma, beta), bw, "layernorm")


def depthwise_conv1d(a: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded depthwise conv along axis -2 of ``(..., L, C)`` with ``weight`` of shape ``(C, k)``."""
    x = a.data
    c, k = weight.shape
    if k % 2 == 0:
        raise ValueError("depthwise_conv1d kernel size must be odd")
    if x.shape[-1] != c:
        raise ValueError(f"channel mismatch {x.shape[-1]} vs {c}")
    L = x.shape[-2]
    pad = k // 2
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x, widths)
    w = weight.data
    out = np.zeros_like(x)
    for j in range(k):
        out += xp[..., j : j + L, :] * w[:, j]
    if bias is not None:
        out += bias.data
    parents = (a, weight) if bias is None else (a, weight, bias)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        gflat = g.reshape(-1, L, c)
        xflat = xp.reshape(-1, L + 2 * pad, c)
        for j in range(k):
            gxp[..., j : j + L, :] += g * w[:, j]
            gw[:, j] = np.einsum("blc,blc->c", gflat, xflat[:, j : j + L, :])
        gx = gxp[..., pad : pad + L, :]
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, c).sum(axis=0)

    return _make(out, parents, bw, "depthwise_conv1d")


# ---------------------------------------------------------------- losses


def _loss_weights(shape, mask) -> tuple[np.ndarray | None, float]:
    if mask is None:
        return None, float(np.prod(shape))
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), shape)
    return m, max(float(m.sum()), 1.0)


def l1_loss(pred: Tensor, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute error over (optionally masked) elements."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    m, n = _loss_weights(diff.shape, mask)
    ad = np.abs(diff) if m is None else np.abs(diff) * m
    sgn = np.sign(diff) if m is None else np.sign(diff) * m

    def bw(g):
        gg = g * sgn / n
        return gg, -gg

    return _make(np.asarray(ad.sum() / n), (pred, target), bw, "l1_loss")


def mse_loss(pred: Tensor, target, mask: np.ndarray | None = None) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    m, n = _loss_weights(diff.shape, mask)
    if m is not None:
        diff = diff * m

    def bw(g):
        gg = g * 2.0 * diff / n
        return gg, -gg

    return _make(np.asarray((diff * diff).sum() / n), (pred, target), bw, "mse_loss")


# ---------------------------------------------------------------- dispatch

OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "split": split,
    "transpose": transpose,
    "reshape": reshape,
    "softmax": softmax,
    "layernorm": layernorm,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "silu": silu,
    "softplus": softplus,
    "glu": glu,
    "depthwise_conv1d": depthwise_conv1d,
    "embedding_lookup": embedding_lookup,
    "mean_pool_axis": mean_pool_axis,
    "sum": sum_,
    "mean": mean,
    "l1_loss": l1_loss,
    "mse_loss": mse_loss,
}


def forward_op(kind: str, *inputs, **attrs):
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def _run_backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    if not loss.requires_grad:
        return leaves
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or parent is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def backward(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` for each of ``params``; unreachable params get zeros."""
    leaves = _run_backward(loss)
    out = []
    for p in params:
        g = leaves.get(p)
        out.append(np.zeros_like(p.data) if g is None else g.reshape(p.shape))
    return out


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    floor: float = 1e-5,
    max_params: int = 50_000,
) -> GradCheckReport:
    """Compare analytic gradients against central differences for every scalar in ``params``.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    round-off on near-zero gradients from dominating.
    """
    names = list(params)
    total = sum(params[n].size for n in names)
    if total > max_params:
        raise ValueError(f"{total} parameters exceeds exhaustive grad-check limit {max_params}")
    analytic = backward(loss_fn(), [params[n] for n in names])
    report = GradCheckReport(tolerance)
    with no_grad():
        for name, ga in zip(names, analytic):
            p = params[name]
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = loss_fn().item()
                flat[i] = orig - step
                fm = loss_fn().item()
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                rel = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), floor)
                worst = max(worst, rel)
            report.max_rel_error[name] = worst
    return report
