"""Neural network primitives on top of the autodiff tensor core.

Convolution is im2col plus one BLAS matmul per call; pooling and the
norms are fully vectorised. Spatial ops accept a single image (C, H, W)
or a batch (N, C, H, W) and return the matching rank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, DimensionError, StateError
from .tensor import (
    Tensor,
    _make,
    as_tensor,
    matmul,
    reshape,
    take_along_last,
    tmean,
    transpose,
    tsum,
)

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# -- activations ----------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0),)  # gradient at exactly 0 is defined as 0

    return _make(data, (a,), vjp)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, slope * a.data)  # slope < 1

    def vjp(g):
        return (g * np.where(a.data > 0, 1.0, slope),)

    return _make(data, (a,), vjp)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    data = a.data * phi

    def vjp(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        return (g * (phi + a.data * pdf),)

    return _make(data, (a,), vjp)


_ACTIVATIONS = {"relu": relu, "leaky_relu": leaky_relu, "gelu": gelu}


def activation(a, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(
            f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}"
        ) from None
    return fn(a)


# -- convolution ----------------------------------------------------------


def _as_batched(a: Tensor):
    if a.ndim == 3:
        return reshape(a, (1,) + a.shape), True
    if a.ndim == 4:
        return a, False
    raise DimensionError(f"expected (C,H,W) or (N,C,H,W), got shape {a.shape}")


def _im2col(xb: np.ndarray, kh: int, kw: int, padding: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*KH*KW, H_out*W_out) patch matrix, stride 1.

    The layout keeps batch as the leading (GEMM stack) axis so that no
    transposed copy is needed on either side of the product.
    """
    n, c, h, w = xb.shape
    h_out = h + 2 * padding - kh + 1
    w_out = w + 2 * padding - kw + 1
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, h_out, w_out))
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + h_out, kj : kj + w_out]
    return cols.reshape(n, c * kh * kw, h_out * w_out)


def conv2d(x, w, bias, stride: int = 1, padding: int = 1) -> Tensor:
    """Cross-correlation with zero padding (no kernel flip).

    x: (C_in, H, W) or (N, C_in, H, W); w: (C_out, C_in, KH, KW); bias: (C_out,).
    Runs as im2col plus one batched GEMM; the column matrix is kept for
    the weight gradient.
    """
    if stride != 1:
        raise ConfigurationError("conv2d supports stride 1 only")
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    xb, squeeze = _as_batched(x)
    n, c_in, h, wd = xb.shape
    c_out, c_in_w, kh, kw = w.shape
    if c_in != c_in_w:
        raise DimensionError(
            f"conv2d channel mismatch: input has {c_in} channels, "
            f"kernel expects {c_in_w}"
        )
    if bias.shape != (c_out,):
        raise DimensionError(
            f"conv2d bias shape {bias.shape} does not match {c_out} filters"
        )
    h_out = h + 2 * padding - kh + 1
    w_out = wd + 2 * padding - kw + 1
    cols = _im2col(xb.data, kh, kw, padding)  # (N, C*9, H*W)
    w_mat = w.data.reshape(c_out, -1)
    out = np.matmul(w_mat, cols).reshape(n, c_out, h_out, w_out)
    out += bias.data[None, :, None, None]
    need_x = x.requires_grad or x._vjp is not None

    def vjp(g):
        g3 = g.reshape(n, c_out, h_out * w_out)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3))
        if not need_x:
            return None, gw, gb
        gcols = np.matmul(w_mat.T, g3).reshape(n, c_in, kh, kw, h_out, w_out)
        gxp = np.zeros((n, c_in, h + 2 * padding, wd + 2 * padding))
        for ki in range(kh):
            for kj in range(kw):
                gxp[:, :, ki : ki + h_out, kj : kj + w_out] += gcols[:, :, ki, kj]
        gx = gxp[:, :, padding : padding + h, padding : padding + wd]
        if squeeze:
            gx = gx[0]
        return gx, gw, gb

    out_t = _make(out, (x, w, bias), vjp)
    return reshape(out_t, out.shape[1:]) if squeeze else out_t


def max_pool2d(x, window: int = 2, stride: int = 2) -> Tensor:
    """2x2/stride-2 max pooling; ties route the gradient to the first
    maximal element in row-major window order."""
    if window != 2 or stride != 2:
        raise ConfigurationError("max_pool2d supports window=2, stride=2 only")
    x = as_tensor(x)
    xb, squeeze = _as_batched(x)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2d needs even spatial extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = (
        xb.data.reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    arg = windows.argmax(axis=-1)  # argmax takes the first max on ties
    data = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gwin = np.zeros_like(windows)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = (
            gwin.reshape(n, c, h2, w2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        if squeeze:
            gx = gx[0]
        return (gx,)

    out = _make(data, (x,), vjp)
    return reshape(out, data.shape[1:]) if squeeze else out


def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic averaging matrix for adaptive pooling on one axis.

    Output cell i averages input cells [floor(i*n_in/n_out),
    ceil((i+1)*n_in/n_out)); works for both down- and up-sizing.
    """
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        start = (i * n_in) // n_out
        end = -((-(i + 1) * n_in) // n_out)  # ceil division
        mat[i, start:end] = 1.0 / (end - start)
    return mat


def adaptive_avg_pool2d(x, out_h: int, out_w: int) -> Tensor:
    """Resize spatial extents to (out_h, out_w) by region averaging."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"output extents must be positive, got {out_h}x{out_w}")
    x = as_tensor(x)
    xb, squeeze = _as_batched(x)
    n, c, h, w = xb.shape
    if (h, w) == (out_h, out_w):
        return x
    rows = _pool_matrix(h, out_h)
    cols_t = _pool_matrix(w, out_w).T
    data = np.matmul(np.matmul(rows, xb.data), cols_t)

    def vjp(g):
        gx = np.matmul(np.matmul(rows.T, g), cols_t.T)
        if squeeze:
            gx = gx[0]
        return (gx,)

    out = _make(data, (x,), vjp)
    return reshape(out, data.shape[1:]) if squeeze else out


# -- normalisation --------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics buffers for one batch-norm layer."""

    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    def initialized(self) -> bool:
        return self.mean is not None and self.var is not None

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(mean=np.zeros(channels), var=np.ones(channels))


def batch_norm(
    x,
    gamma,
    beta,
    state: BatchNormState,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over (N, H, W) of an (N, C, H, W) batch.

    Train mode normalises with batch statistics and updates ``state``
    in place (momentum is the weight of the new batch statistic); eval
    mode normalises with the stored running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects (N,C,H,W), got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batch_norm affine shapes {gamma.shape}/{beta.shape} do not match "
            f"{c} channels"
        )
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"batch_norm mode must be train or eval, got {mode!r}")
    g4 = reshape(gamma, (1, c, 1, 1))
    b4 = reshape(beta, (1, c, 1, 1))
    if mode == "eval":
        if not state.initialized():
            raise StateError("batch_norm eval mode requires populated running stats")
        mean = state.mean.reshape(1, c, 1, 1)
        var = state.var.reshape(1, c, 1, 1)
        xhat = (x - mean) / np.sqrt(var + eps)
        return xhat * g4 + b4
    out, var = _normalize(x, gamma, beta, axes=(0, 2, 3), eps=eps)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    batch_mean = x.data.mean(axis=(0, 2, 3))
    unbiased = var.reshape(c) * (count / max(count - 1, 1))
    if state.initialized():
        state.mean = (1.0 - momentum) * state.mean + momentum * batch_mean
        state.var = (1.0 - momentum) * state.var + momentum * unbiased
    else:
        state.mean = batch_mean.copy()
        state.var = unbiased.copy()
    return out


def _normalize(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple[int, ...],
               eps: float = 1e-5) -> tuple[Tensor, np.ndarray]:
    """Shared normalise-and-affine op for batch and layer norm.

    Normalises ``x`` over ``axes`` (biased variance, eps inside the
    square root) and applies the per-feature affine. The backward pass
    uses the closed form
    dx = (g*gamma - mean(g*gamma) - xhat * mean(g*gamma * xhat)) / sigma.
    """
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = centered / sigma
    # broadcastable affine: gamma/beta are per-channel (axis 1) for 4-d
    # batch input, per-feature (last axis) otherwise
    if x.ndim == 4 and axes == (0, 2, 3):
        gshape = (1, -1, 1, 1)
    else:
        gshape = (1,) * (x.ndim - 1) + (-1,)
    gq = gamma.data.reshape(gshape)
    bq = beta.data.reshape(gshape)
    data = xhat * gq + bq

    def vjp(g):
        reduce_affine = tuple(i for i in range(x.ndim) if gq.shape[i] == 1)
        gbeta = g.sum(axis=reduce_affine)
        ggamma = (g * xhat).sum(axis=reduce_affine)
        dxhat = g * gq
        gx = (
            dxhat
            - dxhat.mean(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
        ) / sigma
        return gx, ggamma, gbeta

    return _make(data, (x, gamma, beta), vjp), var


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine (gamma, beta)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match "
            f"width {d}"
        )
    out, _ = _normalize(x, gamma, beta, axes=(x.ndim - 1,), eps=eps)
    return out


# -- softmax family -------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shift = x - x.data.max(axis=axis, keepdims=True)  # constant shift, exact grad
    e = shift.exp()
    return e / tsum(e, axis=axis, keepdims=True)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shift = x - x.data.max(axis=axis, keepdims=True)
    return shift - tsum(shift.exp(), axis=axis, keepdims=True).log()


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    logp = log_softmax(logits, axis=-1)
    picked = take_along_last(logp, labels[:, None])
    return -tmean(picked)


# -- attention ------------------------------------------------------------


@dataclass
class AttentionParams:
    """Stacked per-head Q/K/V projections plus the output projection."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo, self.bq, self.bk, self.bv, self.bo]


def multihead_self_attention(
    z, params: AttentionParams, heads: int, return_weights: bool = False
):
    """Scaled dot-product self-attention over tokens.

    z: (N, d) or (B, N, d). Heads are contiguous slices of width d/heads;
    per-head scores are scaled by 1/sqrt(d/heads), softmaxed row-wise,
    applied to V, concatenated and output-projected.
    """
    z = as_tensor(z)
    squeeze = z.ndim == 2
    zb = reshape(z, (1,) + z.shape) if squeeze else z
    if zb.ndim != 3:
        raise DimensionError(f"attention expects (N,d) or (B,N,d), got {z.shape}")
    b, n, d = zb.shape
    if d % heads:
        raise ConfigurationError(f"width {d} is not divisible by {heads} heads")
    dh = d // heads

    def split(t: Tensor) -> Tensor:  # (B, N, d) -> (B, heads, N, dh)
        return transpose(reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(matmul(zb, params.wq) + params.bq)
    k = split(matmul(zb, params.wk) + params.bk)
    v = split(matmul(zb, params.wv) + params.bv)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    weights = softmax(scores, axis=-1)
    mixed = matmul(weights, v)  # (B, heads, N, dh)
    merged = reshape(transpose(mixed, (0, 2, 1, 3)), (b, n, d))
    out = matmul(merged, params.wo) + params.bo
    if squeeze:
        out = reshape(out, (n, d))
    if return_weights:
        w = weights.data[0] if squeeze else weights.data
        return out, w.copy()
    return out


# -- row normalisation (cosine support) ------------------------------------


def normalize_rows(x, eps: float = 1e-12) -> Tensor:
    """Scale the last axis of ``x`` to unit L2 norm; zero rows stay zero."""
    x = as_tensor(x)
    norms = np.linalg.norm(x.data, axis=-1, keepdims=True)
    safe = np.where(norms > eps, norms, 1.0)
    zero = norms <= eps
    unit = np.where(zero, 0.0, x.data / safe)

    def vjp(g):
        # d(u)/dx = (I - u u^T) / r per row; zero rows get zero gradient
        dots = (g * unit).sum(axis=-1, keepdims=True)
        gx = (g - unit * dots) / safe
        return (np.where(zero, 0.0, gx),)

    return _make(unit, (x,), vjp)
