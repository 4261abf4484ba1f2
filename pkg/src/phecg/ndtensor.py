"""Dense tensor primitives used by every layer.

All functions operate on plain numpy arrays (row-major, float32 for
training, float64 for verification) and are pure: inputs are never
mutated and the same inputs always give bit-identical outputs.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

__all__ = [
    "kron",
    "kron_sum",
    "matmul",
    "conv1d",
    "conv_out_len",
    "pool1d",
    "global_pool",
    "linear_interpolate",
    "relu",
    "sigmoid",
    "softplus",
    "mish",
    "activation",
]


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product of a square matrix with a rank-2 or rank-3 tensor.

    ``out[i*p + r, j*q + s (, kappa)] = a[i, j] * b[r, s (, kappa)]``.
    A trailing kernel axis of ``b`` is broadcast: the product acts on the
    first two axes and copies along the third.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"kron: a must be square, got {a.shape}")
    n = a.shape[0]
    if b.ndim == 2:
        p, q = b.shape
        return np.einsum("ij,rs->irjs", a, b).reshape(n * p, n * q)
    if b.ndim == 3:
        p, q, k = b.shape
        return np.einsum("ij,rsk->irjsk", a, b).reshape(n * p, n * q, k)
    raise ShapeError(f"kron: b must have rank 2 or 3, got rank {b.ndim}")


def kron_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum of n Kronecker products from stacked factors.

    ``a`` has shape (n, n, n) holding n square mixing matrices, ``b`` has
    shape (n, p, q) or (n, p, q, k) holding the matching weight blocks.
    Returns the materialised (n*p, n*q[, k]) weight.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    n = a.shape[0]
    if a.shape != (n, n, n):
        raise ShapeError(f"kron_sum: a must be (n, n, n), got {a.shape}")
    if b.shape[0] != n:
        raise ShapeError("kron_sum: a and b disagree on n")
    if b.ndim == 3:
        _, p, q = b.shape
        return np.einsum("mij,mrs->irjs", a, b).reshape(n * p, n * q)
    if b.ndim == 4:
        _, p, q, k = b.shape
        return np.einsum("mij,mrsk->irjsk", a, b).reshape(n * p, n * q, k)
    raise ShapeError(f"kron_sum: b must have rank 3 or 4, got rank {b.ndim}")


def matmul(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Channel-mixing product ``w @ x``.

    ``w`` is (d_out, d_in); ``x`` is (d_in,), (d_in, t) or batched
    (b, d_in, t). The contraction is always over the channel axis.
    """
    w = np.asarray(w)
    x = np.asarray(x)
    if w.ndim != 2:
        raise ShapeError(f"matmul: w must be a matrix, got {w.shape}")
    d_in = x.shape[0] if x.ndim <= 2 else x.shape[1]
    if w.shape[1] != d_in:
        raise ShapeError(f"matmul: inner dims disagree, {w.shape} vs {x.shape}")
    return np.matmul(w, x)


def conv_out_len(t_in: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (t_in + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv1d(
    x: np.ndarray,
    w: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> np.ndarray:
    """1D cross-correlation with zero padding.

    ``x`` is (d_in, t) or (b, d_in, t); ``w`` is (d_out, d_in/groups, k).
    Groups partition channels; ``groups == d_in`` with one-channel filters
    gives a depth-wise convolution.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d: need x (b,d,t) and w (o,c,k), got {x.shape}, {w.shape}")
    b, d_in, t_in = x.shape
    d_out, cpg, k = w.shape
    if d_in % groups or d_out % groups:
        raise ShapeError(f"conv1d: channels ({d_in}->{d_out}) not divisible by groups={groups}")
    if cpg != d_in // groups:
        raise ShapeError(f"conv1d: w expects {cpg} channels/group, input has {d_in // groups}")
    t_out = conv_out_len(t_in, k, stride, dilation, padding)
    if t_out < 1:
        raise ShapeError(f"conv1d: output length {t_out} < 1 for t_in={t_in}, k={k}")

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    span = (t_out - 1) * stride + 1
    y = np.zeros((b, d_out, t_out), dtype=x.dtype)
    if groups == 1:
        for j in range(k):
            sl = xp[:, :, j * dilation : j * dilation + span : stride]
            y += np.matmul(w[:, :, j], sl)
    elif groups == d_in and d_out == d_in and cpg == 1:
        # depth-wise fast path
        for j in range(k):
            sl = xp[:, :, j * dilation : j * dilation + span : stride]
            y += w[:, 0, j][None, :, None] * sl
    else:
        opg = d_out // groups
        for g in range(groups):
            xg = xp[:, g * cpg : (g + 1) * cpg]
            wg = w[g * opg : (g + 1) * opg]
            for j in range(k):
                sl = xg[:, :, j * dilation : j * dilation + span : stride]
                y[:, g * opg : (g + 1) * opg] += np.matmul(wg[:, :, j], sl)
    if bias is not None:
        y += np.asarray(bias)[None, :, None]
    return y[0] if squeeze else y


def pool1d(x: np.ndarray, mode: str, kernel: int, stride: int | None = None) -> np.ndarray:
    """Per-channel windowed max/avg reduction over the trailing time axis.

    Trailing samples that do not fill a complete window are dropped.
    """
    x = np.asarray(x)
    stride = kernel if stride is None else stride
    t = x.shape[-1]
    if kernel > t:
        raise ShapeError(f"pool1d: kernel {kernel} > length {t}")
    t_out = (t - kernel) // stride + 1
    idx = np.arange(t_out) * stride
    windows = x[..., idx[:, None] + np.arange(kernel)]  # (..., t_out, kernel)
    if mode == "max":
        return windows.max(axis=-1)
    if mode == "avg":
        return windows.mean(axis=-1)
    raise ValueError(f"pool1d: unknown mode {mode!r}")


def global_pool(x: np.ndarray, mode: str) -> np.ndarray:
    """Full-length reduction of the time axis."""
    x = np.asarray(x)
    if mode == "max":
        return x.max(axis=-1)
    if mode == "avg":
        return x.mean(axis=-1)
    raise ValueError(f"global_pool: unknown mode {mode!r}")


def interp_positions(t: int, t_target: int) -> tuple[np.ndarray, np.ndarray]:
    """Endpoint-aligned source indices and fractions for linear resampling."""
    if t_target == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(t_target) * ((t - 1) / (t_target - 1))
    i0 = np.minimum(np.floor(pos).astype(np.int64), max(t - 2, 0))
    frac = pos - i0
    return i0, frac


def linear_interpolate(x: np.ndarray, t_target: int) -> np.ndarray:
    """Per-channel piecewise-linear resampling with aligned endpoints."""
    x = np.asarray(x)
    if t_target < 1:
        raise ShapeError(f"linear_interpolate: t_target {t_target} < 1")
    t = x.shape[-1]
    if t == t_target:
        return x.copy()
    if t == 1:
        return np.repeat(x, t_target, axis=-1)
    i0, frac = interp_positions(t, t_target)
    frac = frac.astype(x.dtype)
    return x[..., i0] * (1 - frac) + x[..., i0 + 1] * frac


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) = max(x, 0) + log1p(e^-|x|), safe for large |x|
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def mish(x: np.ndarray) -> np.ndarray:
    return x * np.tanh(softplus(x))


_ACTIVATIONS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": np.tanh,
    "softplus": softplus,
    "mish": mish,
}


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise activation by name: relu|sigmoid|tanh|softplus|mish."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"activation: unknown kind {kind!r}") from None
    return fn(np.asarray(x))
