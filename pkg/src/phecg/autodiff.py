"""Reverse-mode automatic differentiation over numpy arrays.

A small tape: every op returns a :class:`Variable` holding the result,
its parent variables, and a vector-Jacobian closure. ``backward`` walks
the graph once in reverse topological order and accumulates gradients.
One tape belongs to one training step and one thread; gradients of
fan-out nodes are summed; calling ``backward`` twice without zeroing
accumulates twice.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy import sparse

from . import ndtensor as nd
from .errors import ShapeError

_ids = itertools.count()


class Variable:
    """A tensor value plus the bookkeeping needed for backprop."""

    __slots__ = ("value", "grad", "requires_grad", "node_id", "_parents", "_vjp")

    def __init__(self, value, requires_grad=False, _parents=(), _vjp=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.node_id = next(_ids)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Variable(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # light operator sugar; everything routes through the op functions
    def __add__(self, other):
        return add(self, as_variable(other, self.dtype))

    def __radd__(self, other):
        return add(as_variable(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, as_variable(other, self.dtype))

    def __rsub__(self, other):
        return sub(as_variable(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, as_variable(other, self.dtype))

    def __rmul__(self, other):
        return mul(as_variable(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)


def as_variable(x, dtype=None) -> Variable:
    if isinstance(x, Variable):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Variable(arr)


def _topo_order(root: Variable) -> list[Variable]:
    order: list[Variable] = []
    seen: set[int] = set()
    stack: list[tuple[Variable, bool]] = [(root, False)]
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
    return order


def backward(loss: Variable) -> dict[int, np.ndarray]:
    """Accumulate dLoss/dv into every requires_grad Variable reachable from loss.

    Returns the gradient map ``{node_id: gradient}``. Gradients add onto
    any existing ``.grad``, so two backward passes without zeroing give
    exactly twice the gradient.
    """
    if loss.value.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    grads: dict[Variable, np.ndarray] = {loss: np.ones((), dtype=loss.value.dtype)}
    for node in reversed(order):
        g = grads.get(node)
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(p)
            grads[p] = pg if acc is None else acc + pg
    result: dict[int, np.ndarray] = {}
    for node, g in grads.items():
        result[node.node_id] = g
        node.grad = g.copy() if node.grad is None else node.grad + g
    return result


# ---------------------------------------------------------------------------
# elementwise ops


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(ax for ax, s in enumerate(shape) if s == 1 and g.shape[ax] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Variable, b: Variable) -> Variable:
    value = a.value + b.value
    return Variable(
        value,
        _parents=(a, b),
        _vjp=lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a: Variable, b: Variable) -> Variable:
    value = a.value - b.value
    return Variable(
        value,
        _parents=(a, b),
        _vjp=lambda g: (_unbroadcast(g, a.value.shape), -_unbroadcast(g, b.value.shape)),
    )


def mul(a: Variable, b: Variable) -> Variable:
    value = a.value * b.value
    return Variable(
        value,
        _parents=(a, b),
        _vjp=lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def scale(a: Variable, c: float) -> Variable:
    return Variable(a.value * c, _parents=(a,), _vjp=lambda g: (g * c,))


def power(a: Variable, c: float) -> Variable:
    """Elementwise a**c with a constant exponent (c == 0 has zero gradient)."""
    value = a.value**c
    if c == 0:
        return Variable(value, _parents=(a,), _vjp=lambda g: (np.zeros_like(a.value),))
    return Variable(value, _parents=(a,), _vjp=lambda g: (g * c * a.value ** (c - 1),))


def vlog(a: Variable) -> Variable:
    return Variable(np.log(a.value), _parents=(a,), _vjp=lambda g: (g / a.value,))


def vexp(a: Variable) -> Variable:
    value = np.exp(a.value)
    return Variable(value, _parents=(a,), _vjp=lambda g: (g * value,))


def clip(a: Variable, lo: float, hi: float) -> Variable:
    value = np.clip(a.value, lo, hi)
    mask = (a.value > lo) & (a.value < hi)
    return Variable(value, _parents=(a,), _vjp=lambda g: (g * mask,))


def relu(a: Variable) -> Variable:
    mask = a.value > 0
    return Variable(a.value * mask, _parents=(a,), _vjp=lambda g: (g * mask,))


def sigmoid(a: Variable) -> Variable:
    s = nd.sigmoid(a.value)
    return Variable(s, _parents=(a,), _vjp=lambda g: (g * s * (1 - s),))


def tanh(a: Variable) -> Variable:
    y = np.tanh(a.value)
    return Variable(y, _parents=(a,), _vjp=lambda g: (g * (1 - y * y),))


def softplus(a: Variable) -> Variable:
    value = nd.softplus(a.value)
    return Variable(value, _parents=(a,), _vjp=lambda g: (g * nd.sigmoid(a.value),))


def mish(a: Variable) -> Variable:
    return mul(a, tanh(softplus(a)))


def vsum(a: Variable) -> Variable:
    return Variable(
        a.value.sum(),
        _parents=(a,),
        _vjp=lambda g: (np.broadcast_to(g, a.value.shape).astype(a.value.dtype, copy=False),),
    )


def vmean(a: Variable) -> Variable:
    return scale(vsum(a), 1.0 / a.value.size)


def softmax(a: Variable) -> Variable:
    """Softmax over the trailing axis."""
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return Variable(
        s, _parents=(a,), _vjp=lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
    )


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Variable, shape) -> Variable:
    old = a.value.shape
    return Variable(
        a.value.reshape(shape), _parents=(a,), _vjp=lambda g: (g.reshape(old),)
    )


def transpose_last2(a: Variable) -> Variable:
    return Variable(
        np.swapaxes(a.value, -1, -2),
        _parents=(a,),
        _vjp=lambda g: (np.swapaxes(g, -1, -2),),
    )


def concat(parts: list[Variable], axis: int = 1) -> Variable:
    value = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Variable(value, _parents=tuple(parts), _vjp=vjp)


def pad_channels(a: Variable, n_total: int) -> Variable:
    """Zero-pad the channel axis of (b, d, t) input up to n_total channels."""
    b, d, t = a.value.shape
    if n_total < d:
        raise ShapeError(f"pad_channels: target {n_total} < current {d}")
    if n_total == d:
        return a
    value = np.zeros((b, n_total, t), dtype=a.value.dtype)
    value[:, :d] = a.value
    return Variable(value, _parents=(a,), _vjp=lambda g: (g[:, :d],))


# ---------------------------------------------------------------------------
# linear algebra / conv ops


def matmul(w: Variable, x: Variable) -> Variable:
    """Channel-mixing product: w (o,i) times x (i,), (i,t) or (b,i,t)."""
    value = nd.matmul(w.value, x.value)
    need_w, need_x = w.requires_grad, x.requires_grad

    def vjp(g):
        xv, wv = x.value, w.value
        if xv.ndim == 1:
            dw = np.outer(g, xv) if need_w else None
            dx = wv.T @ g if need_x else None
        elif xv.ndim == 2:
            dw = g @ xv.T if need_w else None
            dx = wv.T @ g if need_x else None
        else:
            dw = np.tensordot(g, xv, axes=([0, 2], [0, 2])) if need_w else None
            dx = np.matmul(wv.T, g) if need_x else None
        return dw, dx

    return Variable(value, _parents=(w, x), _vjp=vjp)


def kron_sum(a: Variable, b: Variable) -> Variable:
    """Materialise the weight H = sum_i a[i] (x) b[i] from stacked factors."""
    value = nd.kron_sum(a.value, b.value)
    n = a.value.shape[0]

    def vjp(g):
        if b.value.ndim == 3:
            _, p, q = b.value.shape
            h4 = g.reshape(n, p, n, q)
            da = np.einsum("ipjq,mpq->mij", h4, b.value) if a.requires_grad else None
            db = np.einsum("mij,ipjq->mpq", a.value, h4) if b.requires_grad else None
        else:
            _, p, q, k = b.value.shape
            h5 = g.reshape(n, p, n, q, k)
            da = np.einsum("ipjqk,mpqk->mij", h5, b.value) if a.requires_grad else None
            db = np.einsum("mij,ipjqk->mpqk", a.value, h5) if b.requires_grad else None
        return da, db

    return Variable(value, _parents=(a, b), _vjp=vjp)


def _conv1d_grads(g, xv, wv, stride, dilation, padding, groups, need_x, need_w):
    b, d_in, t_in = xv.shape
    d_out, cpg, k = wv.shape
    t_out = g.shape[-1]
    span = (t_out - 1) * stride + 1
    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding))) if padding else xv
    dxp = np.zeros_like(xp) if need_x else None
    dw = np.zeros_like(wv) if need_w else None
    if groups == 1:
        for j in range(k):
            lo = j * dilation
            sl = xp[:, :, lo : lo + span : stride]
            if need_w:
                dw[:, :, j] = np.tensordot(g, sl, axes=([0, 2], [0, 2]))
            if need_x:
                dxp[:, :, lo : lo + span : stride] += np.matmul(wv[:, :, j].T, g)
    elif groups == d_in and d_out == d_in and cpg == 1:
        for j in range(k):
            lo = j * dilation
            sl = xp[:, :, lo : lo + span : stride]
            if need_w:
                dw[:, 0, j] = (g * sl).sum(axis=(0, 2))
            if need_x:
                dxp[:, :, lo : lo + span : stride] += wv[:, 0, j][None, :, None] * g
    else:
        opg = d_out // groups
        for grp in range(groups):
            xg = xp[:, grp * cpg : (grp + 1) * cpg]
            wg = wv[grp * opg : (grp + 1) * opg]
            gg = g[:, grp * opg : (grp + 1) * opg]
            for j in range(k):
                lo = j * dilation
                sl = xg[:, :, lo : lo + span : stride]
                if need_w:
                    dw[grp * opg : (grp + 1) * opg, :, j] = np.tensordot(
                        gg, sl, axes=([0, 2], [0, 2])
                    )
                if need_x:
                    dxp[:, grp * cpg : (grp + 1) * cpg, lo : lo + span : stride] += np.matmul(
                        wg[:, :, j].T, gg
                    )
    dx = None
    if need_x:
        dx = dxp[:, :, padding : padding + t_in] if padding else dxp
    return dx, dw


def conv1d(
    x: Variable,
    w: Variable,
    bias: Variable | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Variable:
    """Batched 1D cross-correlation on (b, d_in, t) input."""
    if x.value.ndim != 3:
        raise ShapeError(f"conv1d op expects batched (b,d,t) input, got {x.value.shape}")
    value = nd.conv1d(
        x.value,
        w.value,
        None if bias is None else bias.value,
        stride=stride,
        dilation=dilation,
        padding=padding,
        groups=groups,
    )
    parents = (x, w) if bias is None else (x, w, bias)

    def vjp(g):
        dx, dw = _conv1d_grads(
            g, x.value, w.value, stride, dilation, padding, groups,
            x.requires_grad, w.requires_grad,
        )
        if bias is None:
            return dx, dw
        db = g.sum(axis=(0, 2)) if bias.requires_grad else None
        return dx, dw, db

    return Variable(value, _parents=parents, _vjp=vjp)


# ---------------------------------------------------------------------------
# pooling / resampling


def maxpool1d(x: Variable, kernel: int, stride: int | None = None) -> Variable:
    stride = kernel if stride is None else stride
    xv = x.value
    t = xv.shape[-1]
    if kernel > t:
        raise ShapeError(f"maxpool1d: kernel {kernel} > length {t}")
    t_out = (t - kernel) // stride + 1
    offs = np.arange(t_out) * stride
    windows = xv[..., offs[:, None] + np.arange(kernel)]
    arg = windows.argmax(axis=-1)  # first max wins on ties
    value = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    flat = offs + arg  # absolute source index per output slot

    def vjp(g):
        dx = np.zeros_like(xv)
        if stride >= kernel:
            np.put_along_axis(dx, flat, g, axis=-1)
        else:
            ix = np.indices(g.shape)
            np.add.at(dx, (*tuple(ix[:-1]), flat), g)
        return (dx,)

    return Variable(value, _parents=(x,), _vjp=vjp)


def avgpool1d(x: Variable, kernel: int, stride: int | None = None) -> Variable:
    stride = kernel if stride is None else stride
    xv = x.value
    t = xv.shape[-1]
    if kernel > t:
        raise ShapeError(f"avgpool1d: kernel {kernel} > length {t}")
    value = nd.pool1d(xv, "avg", kernel, stride)
    t_out = value.shape[-1]
    offs = np.arange(t_out) * stride

    def vjp(g):
        dx = np.zeros_like(xv)
        gk = g / kernel
        for off in range(kernel):
            dx[..., offs + off] += gk
        return (dx,)

    return Variable(value, _parents=(x,), _vjp=vjp)


def global_maxpool(x: Variable) -> Variable:
    arg = x.value.argmax(axis=-1)
    value = np.take_along_axis(x.value, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        dx = np.zeros_like(x.value)
        np.put_along_axis(dx, arg[..., None], g[..., None], axis=-1)
        return (dx,)

    return Variable(value, _parents=(x,), _vjp=vjp)


def global_avgpool(x: Variable) -> Variable:
    t = x.value.shape[-1]
    value = x.value.mean(axis=-1)
    return Variable(
        value, _parents=(x,), _vjp=lambda g: (np.repeat(g[..., None], t, axis=-1) / t,)
    )


_INTERP_CACHE: dict[tuple, sparse.csr_matrix] = {}


def _interp_matrix(t: int, t_target: int, dtype) -> sparse.csr_matrix:
    key = (t, t_target, np.dtype(dtype).str)
    m = _INTERP_CACHE.get(key)
    if m is None:
        i0, frac = nd.interp_positions(t, t_target)
        rows = np.repeat(np.arange(t_target), 2)
        cols = np.stack([i0, i0 + 1], axis=1).ravel()
        data = np.stack([1 - frac, frac], axis=1).ravel().astype(dtype)
        m = sparse.csr_matrix((data, (rows, cols)), shape=(t_target, t))
        _INTERP_CACHE[key] = m
    return m


def interpolate(x: Variable, t_target: int) -> Variable:
    """Endpoint-aligned linear resampling of the trailing time axis."""
    t = x.value.shape[-1]
    if t == t_target:
        return x
    value = nd.linear_interpolate(x.value, t_target)
    if t == 1:
        return Variable(
            value, _parents=(x,), _vjp=lambda g: (g.sum(axis=-1, keepdims=True),)
        )
    m = _interp_matrix(t, t_target, x.value.dtype)

    def vjp(g):
        flat = g.reshape(-1, t_target)
        return ((flat @ m).reshape(x.value.shape),)

    return Variable(value, _parents=(x,), _vjp=vjp)


# ---------------------------------------------------------------------------
# stochastic / normalisation ops


def dropout(x: Variable, p: float, training: bool, rng: np.random.Generator) -> Variable:
    """Inverted dropout; exact identity when eval or p == 0."""
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.value.shape) >= p).astype(x.value.dtype)
    factor = 1.0 / (1.0 - p)
    value = x.value * keep * factor
    return Variable(value, _parents=(x,), _vjp=lambda g: (g * keep * factor,))


def batch_norm(
    x: Variable,
    gamma: Variable,
    beta: Variable,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Variable:
    """Per-channel batch normalisation of (b, c, t) input.

    Batch statistics use the population variance; running buffers are
    updated in place during training forward passes only.
    """
    xv = x.value
    if training:
        mu = xv.mean(axis=(0, 2))
        var = xv.var(axis=(0, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu[None, :, None]) * inv[None, :, None]
    value = gamma.value[None, :, None] * xhat + beta.value[None, :, None]

    def vjp(g):
        dgamma = (g * xhat).sum(axis=(0, 2)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2)) if beta.requires_grad else None
        if not x.requires_grad:
            return None, dgamma, dbeta
        coef = (gamma.value * inv)[None, :, None]
        if training:
            gm = g.mean(axis=(0, 2), keepdims=True)
            gxm = (g * xhat).mean(axis=(0, 2), keepdims=True)
            dx = coef * (g - gm - xhat * gxm)
        else:
            dx = coef * g
        return dx, dgamma, dbeta

    return Variable(value, _parents=(x, gamma, beta), _vjp=vjp)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, inputs: list[Variable], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued function of the given
    Variables. Inputs should be float64 and sit away from kinks.
    """
    for v in inputs:
        v.grad = None
    out = f(*inputs)
    backward(out)
    worst = 0.0
    for v in inputs:
        analytic = np.zeros_like(v.value) if v.grad is None else v.grad
        flat = v.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*inputs).value)
            flat[i] = orig - eps
            fm = float(f(*inputs).value)
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
