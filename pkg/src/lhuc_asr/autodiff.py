"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy float64 array. Ops build an acyclic graph;
`backward` walks it in exact reverse topological order and accumulates
gradients into every leaf that requires them. Everything runs in float64 so
that finite-difference checks are meaningful.

Broadcasting is deliberately restricted to leading batch axes: two shapes are
compatible only if equal, or if the smaller shape equals the trailing dims of
the larger. Anything fancier raises ShapeMismatch, which keeps every backward
rule auditable.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NonFinite, NotScalar, ShapeMismatch

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Node of the gradient graph; leaves carry parameters or inputs."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "kind")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None,
                 kind: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.kind = kind

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, kind={self.kind}, requires_grad={self.requires_grad})"

    # Operator sugar; floats/ndarrays become constant leaves.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_tensor(self, key)


def _not_scalar(t: Tensor):
    raise NotScalar(t.data.shape)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def constant(value) -> Tensor:
    """Non-trainable leaf."""
    return _as_tensor(value)


def _finite_or_raise(kind: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise NonFinite(kind)


def _node(kind: str, data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], tuple]) -> Tensor:
    _finite_or_raise(kind, data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents),
                      _backward=backward, kind=kind)
    return Tensor(data, kind=kind)


# -- broadcasting (leading batch axes only) --------------------------------

def _broadcast_shape(kind: str, a: Tensor, b: Tensor):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeMismatch(kind, (sa, sb))


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra)))


# -- op registry ------------------------------------------------------------

OPS: dict[str, Callable] = {}


def _register(kind: str):
    def deco(fn):
        OPS[kind] = fn
        return fn
    return deco


def forward_op(kind: str, inputs: Sequence, attrs: Optional[dict] = None) -> Tensor:
    """Dispatch a registered op by name (generic entry point for audits)."""
    if kind not in OPS:
        raise ValueError(f"unknown op kind '{kind}'")
    return OPS[kind](*inputs, **(attrs or {}))


# -- elementwise arithmetic --------------------------------------------------

@_register("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node("add", out, (a, b), bwd)


@_register("sub")
def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _node("sub", out, (a, b), bwd)


@_register("mul")
def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _node("mul", out, (a, b), bwd)


@_register("div")
def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bwd(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node("div", out, (a, b), bwd)


@_register("neg")
def neg(a: Tensor) -> Tensor:
    return _node("neg", -a.data, (a,), lambda g: (-g,))


@_register("square")
def square(a: Tensor) -> Tensor:
    return _node("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


@_register("exp")
def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _node("exp", out, (a,), bwd)


@_register("log")
def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _node("log", out, (a,), bwd)


@_register("sqrt")
def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return _node("sqrt", out, (a,), bwd)


# -- linear algebra ----------------------------------------------------------

@_register("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch("matmul", (a.data.shape, b.data.shape))
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _node("matmul", out, (a, b), bwd)


@_register("transpose")
def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatch("transpose", (a.data.shape,))
    return _node("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


# -- activations -------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable in both tails.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@_register("sigmoid")
def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _node("sigmoid", s, (a,), bwd)


@_register("two_sigmoid")
def two_sigmoid(a: Tensor) -> Tensor:
    """Elementwise 2*sigmoid with range (0, 2); the LHUC scaling function."""
    s = _sigmoid(a.data)

    def bwd(g):
        return (g * 2.0 * s * (1.0 - s),)

    return _node("two_sigmoid", 2.0 * s, (a,), bwd)


@_register("swish")
def swish(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s

    def bwd(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _node("swish", out, (a,), bwd)


@_register("relu")
def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0.0),)

    return _node("relu", out, (a,), bwd)


@_register("softplus")
def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    s = _sigmoid(a.data)

    def bwd(g):
        return (g * s,)

    return _node("softplus", out, (a,), bwd)


@_register("glu")
def glu(a: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half gated by sigmoid of second."""
    d = a.data.shape[-1]
    if d % 2 != 0:
        raise ShapeMismatch("glu", (a.data.shape,))
    h = d // 2
    x, gate = a.data[..., :h], a.data[..., h:]
    s = _sigmoid(gate)
    out = x * s

    def bwd(g):
        gx = g * s
        gg = g * x * s * (1.0 - s)
        return (np.concatenate([gx, gg], axis=-1),)

    return _node("glu", out, (a,), bwd)


# -- normalizations / reductions over rows -----------------------------------

@_register("softmax")
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _node("softmax", out, (a,), bwd)


@_register("log_softmax")
def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node("log_softmax", out, (a,), bwd)


@_register("logsumexp")
def logsumexp(a: Tensor, axis: Optional[int] = None) -> Tensor:
    # Stable shift by the max; reduces over `axis` (all axes when None).
    m = a.data.max(axis=axis, keepdims=True)
    out_keep = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    if axis is None:
        out = out_keep.reshape(())
    else:
        out = np.squeeze(out_keep, axis=axis)

    def bwd(g):
        soft = np.exp(a.data - out_keep)
        if axis is None:
            return (g * soft,)
        return (np.expand_dims(g, axis) * soft,)

    return _node("logsumexp", out, (a,), bwd)


@_register("layernorm")
def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then affine: z*gain + bias."""
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeMismatch("layernorm", (a.data.shape, gain.data.shape, bias.data.shape))
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    z = xc * inv
    out = z * gain.data + bias.data

    def bwd(g):
        gz = g * gain.data
        gx = inv * (gz - gz.mean(axis=-1, keepdims=True)
                    - z * (gz * z).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        return gx, (g * z).sum(axis=axes), g.sum(axis=axes)

    return _node("layernorm", out, (a, gain, bias), bwd)


@_register("sum")
def sum_(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node("sum", out, (a,), bwd)


@_register("mean")
def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / n,)

    return _node("mean", out, (a,), bwd)


# -- structure ops -----------------------------------------------------------

@_register("concat")
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(np.moveaxis(moved[offsets[i]:offsets[i + 1]], 0, axis)
                     for i in range(len(tensors)))

    return _node("concat", out, tensors, bwd)


@_register("slice")
def slice_tensor(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out, dtype=np.float64)

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[key] += g
        return (buf,)

    return _node("slice", out, (a,), bwd)


@_register("embedding")
def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: out[i] = table[ids[i]]."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeMismatch("embedding", (table.data.shape, idx.shape))
    out = table.data[idx]

    def bwd(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, g)
        return (buf,)

    return _node("embedding", out, (table,), bwd)


@_register("pick")
def pick(a: Tensor, ids) -> Tensor:
    """Per-row scalar gather: out[i] = a[i, ids[i]]."""
    idx = np.asarray(ids, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.data.shape[0],):
        raise ShapeMismatch("pick", (a.data.shape, idx.shape))
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[rows, idx] = g
        return (buf,)

    return _node("pick", out, (a,), bwd)


# -- convolutions ------------------------------------------------------------

@_register("conv1d_depthwise")
def conv1d_depthwise(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Per-channel 1-D convolution over time with same-length output.

    x: [T, C], w: [k, C] (k odd), optional bias [C].
    """
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1] \
            or w.data.shape[0] % 2 == 0:
        raise ShapeMismatch("conv1d_depthwise", (x.data.shape, w.data.shape))
    t, c = x.data.shape
    k = w.data.shape[0]
    p = k // 2
    xp = np.zeros((t + 2 * p, c))
    xp[p:p + t] = x.data
    out = np.zeros((t, c))
    for i in range(k):
        out += xp[i:i + t] * w.data[i]
    if b is not None:
        if b.data.shape != (c,):
            raise ShapeMismatch("conv1d_depthwise", (x.data.shape, b.data.shape))
        out = out + b.data

    def bwd(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for i in range(k):
            dxp[i:i + t] += g * w.data[i]
            dw[i] = (g * xp[i:i + t]).sum(axis=0)
        grads = [dxp[p:p + t], dw]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _node("conv1d_depthwise", out, parents, bwd)


@_register("conv1d_pointwise")
def conv1d_pointwise(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution over channels: x [T, C] @ w [C, C'] (+ bias)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeMismatch("conv1d_pointwise", (x.data.shape, w.data.shape))
    out = x.data @ w.data
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ShapeMismatch("conv1d_pointwise", (x.data.shape, b.data.shape))
        out = out + b.data

    def bwd(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _node("conv1d_pointwise", out, parents, bwd)


@_register("conv2d")
def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: tuple = (1, 1), padding: tuple = (0, 0)) -> Tensor:
    """Strided 2-D convolution. x: [C_in, H, W], w: [C_out, C_in, kh, kw]."""
    if x.data.ndim != 3 or w.data.ndim != 4 or x.data.shape[0] != w.data.shape[1]:
        raise ShapeMismatch("conv2d", (x.data.shape, w.data.shape))
    cin, h, wd = x.data.shape
    cout, _, kh, kw = w.data.shape
    sh, sw = stride
    ph, pw = padding
    hout = (h + 2 * ph - kh) // sh + 1
    wout = (wd + 2 * pw - kw) // sw + 1
    if hout < 1 or wout < 1:
        raise ShapeMismatch("conv2d", (x.data.shape, w.data.shape))
    xp = np.zeros((cin, h + 2 * ph, wd + 2 * pw))
    xp[:, ph:ph + h, pw:pw + wd] = x.data
    out = np.zeros((cout, hout, wout))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + sh * hout:sh, j:j + sw * wout:sw]
            out += np.einsum("oc,chw->ohw", w.data[:, :, i, j], patch)
    if b is not None:
        if b.data.shape != (cout,):
            raise ShapeMismatch("conv2d", (x.data.shape, b.data.shape))
        out = out + b.data[:, None, None]

    def bwd(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i:i + sh * hout:sh, j:j + sw * wout:sw]
                dw[:, :, i, j] = np.einsum("ohw,chw->oc", g, patch)
                dxp[:, i:i + sh * hout:sh, j:j + sw * wout:sw] += np.einsum(
                    "oc,ohw->chw", w.data[:, :, i, j], g)
        grads = [dxp[:, ph:ph + h, pw:pw + wd], dw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _node("conv2d", out, parents, bwd)


# -- stochastic ops ----------------------------------------------------------

@_register("dropout")
def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator] = None,
            training: bool = False, mask: Optional[np.ndarray] = None) -> Tensor:
    """Inverted dropout; identity in eval mode. The mask can be pinned for checks."""
    if not training or rate <= 0.0:
        return x
    if mask is None:
        mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = x.data * mask

    def bwd(g):
        return (g * mask,)

    return _node("dropout", out, (x,), bwd)


@_register("reparam_gaussian")
def reparam_gaussian(mu: Tensor, log_sigma: Tensor, eps: np.ndarray) -> Tensor:
    """Gaussian reparameterization mu + exp(log_sigma) * eps with pinned noise."""
    eps = np.asarray(eps, dtype=np.float64)
    if mu.data.shape != log_sigma.data.shape or mu.data.shape != eps.shape:
        raise ShapeMismatch("reparam_gaussian",
                            (mu.data.shape, log_sigma.data.shape, eps.shape))
    sig = np.exp(log_sigma.data)
    out = mu.data + sig * eps

    def bwd(g):
        return g, g * eps * sig

    return _node("reparam_gaussian", out, (mu, log_sigma), bwd)


# -- backward engine ---------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order = []
    visited = {id(root)}
    stack = [(root, 0)]
    while stack:
        node, idx = stack[-1]
        parents = node._parents
        if idx < len(parents):
            stack[-1] = (node, idx + 1)
            child = parents[idx]
            if id(child) not in visited:
                visited.add(id(child))
                stack.append((child, 0))
        else:
            stack.pop()
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad node reachable from a scalar loss.

    Repeated calls accumulate into existing grads.
    """
    if loss.data.size != 1:
        raise NotScalar(loss.data.shape)
    order = _topo_order(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not (parent.requires_grad or parent._parents):
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must be scalar-valued and deterministic. Returns Inf when the analytic
    gradient is non-finite.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
    if not np.all(np.isfinite(analytic)):
        return float("inf")
    flat = leaf.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(leaf).item()
            flat[i] = orig - eps
            lo = f(leaf).item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / (abs(a) + eps))
    return worst
