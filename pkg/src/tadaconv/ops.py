"""Video-tensor operators: convolutions, pooling, batchnorm, linear layers.

Layout convention for video values is [N, C, T, H, W]. All convolutions use
the cross-correlation convention (no kernel flip) and are bias-free; shifts
live in the batchnorm offsets. Spatial/temporal zero padding is explicit per
op. Each convolution is a tape primitive with a hand-written pullback; the
rest are composites of `tensor` primitives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import (
    Tensor,
    as_tensor,
    exp,
    log,
    matmul,
    maximum,
    mean,
    mul,
    no_grad,
    pad_axis,
    power,
    reshape,
    resolve_dtype,
    tensor_sum,
    transpose,
    _record,
)


def _check_conv_args(k: int, stride: int, pad: int):
    if k < 1 or k % 2 == 0:
        raise ParameterError(f"kernel size must be odd and positive, got {k}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ParameterError(f"padding must be >= 0, got {pad}")


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    out = (n + 2 * pad - k) // stride + 1
    if out < 1:
        raise DimensionError(f"geometry underflow: extent {n} with k={k}, stride={stride}, pad={pad}")
    return out


def conv2d_per_frame(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Convolve every frame of x[N,Ci,T,H,W] with the shared kernel w[Co,Ci,k,k]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5:
        raise DimensionError(f"expected [N,C,T,H,W] input, got shape {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"expected [Co,Ci,k,k] kernel, got shape {w.shape}")
    n, ci, t, h, wd = x.shape
    co, ciw, k, _ = w.shape
    if ciw != ci:
        raise DimensionError(f"kernel expects {ciw} input channels, input has {ci}")
    _check_conv_args(k, stride, pad)
    ho = _out_extent(h, k, stride, pad)
    wo = _out_extent(wd, k, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(3, 4))
    win = win[:, :, :, ::stride, ::stride, :, :]
    out = np.einsum("nctijuv,ocuv->notij", win, w.data, optimize=True)

    def pullback(g):
        gw = np.einsum("notij,nctijuv->ocuv", g, win, optimize=True)
        gxp = np.zeros_like(xp)
        for u in range(k):
            for v in range(k):
                gxp[:, :, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += np.einsum(
                    "notij,oc->nctij", g, w.data[:, :, u, v], optimize=True
                )
        gx = gxp[:, :, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw

    return _record(out, (x, w), pullback)


def conv2d_framewise(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Per-frame spatial convolution with a distinct kernel per (clip, frame).

    x: [N,Ci,T,H,W], w: [N,T,Co,Ci,k,k]. This is the execution path for
    calibrated kernels; gradients flow into both x and the per-frame kernels.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 6:
        raise DimensionError(f"expected 5-D input and 6-D kernels, got {x.shape} and {w.shape}")
    n, ci, t, h, wd = x.shape
    nw, tw, co, ciw, k, k2 = w.shape
    if (nw, tw) != (n, t):
        raise DimensionError(f"kernel batch/time {nw}x{tw} does not match input {n}x{t}")
    if ciw != ci or k != k2:
        raise DimensionError(f"kernel shape {w.shape} incompatible with input channels {ci}")
    _check_conv_args(k, stride, pad)
    ho = _out_extent(h, k, stride, pad)
    wo = _out_extent(wd, k, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(3, 4))
    win = win[:, :, :, ::stride, ::stride, :, :]
    out = np.einsum("nctijuv,ntocuv->notij", win, w.data, optimize=True)

    def pullback(g):
        gw = np.einsum("notij,nctijuv->ntocuv", g, win, optimize=True)
        gxp = np.zeros_like(xp)
        for u in range(k):
            for v in range(k):
                gxp[:, :, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += np.einsum(
                    "notij,ntoc->nctij", g, w.data[:, :, :, :, u, v], optimize=True
                )
        gx = gxp[:, :, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw

    return _record(out, (x, w), pullback)


def conv1d_temporal(v, w, stride: int = 1, pad: int = 0) -> Tensor:
    """1-D cross-correlation of v[N,C,T] with w[Co,C,k], zero padded along T."""
    v, w = as_tensor(v), as_tensor(w)
    if v.ndim != 3 or w.ndim != 3:
        raise DimensionError(f"expected [N,C,T] and [Co,C,k], got {v.shape} and {w.shape}")
    n, c, t = v.shape
    co, cw, k = w.shape
    if cw != c:
        raise DimensionError(f"kernel expects {cw} channels, input has {c}")
    _check_conv_args(k, stride, pad)
    to = _out_extent(t, k, stride, pad)

    vp = np.pad(v.data, ((0, 0), (0, 0), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(vp, k, axis=2)[:, :, ::stride, :]
    out = np.einsum("nctk,ock->not", win, w.data, optimize=True)

    def pullback(g):
        gw = np.einsum("not,nctk->ock", g, win, optimize=True)
        gvp = np.zeros_like(vp)
        for j in range(k):
            gvp[:, :, j : j + stride * to : stride] += np.einsum(
                "not,oc->nct", g, w.data[:, :, j], optimize=True
            )
        gv = gvp[:, :, pad : pad + t] if pad else gvp
        return gv, gw

    return _record(out, (v, w), pullback)


def conv3d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """3-D cross-correlation of x[N,Ci,T,H,W] with w[Co,Ci,kt,k,k].

    `stride`/`pad` act on the spatial axes; the temporal axis is zero padded
    by (kt-1)/2 at stride 1, so T is preserved (the geometry every network
    preset uses).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5 or w.shape[3] != w.shape[4]:
        raise DimensionError(f"expected [N,Ci,T,H,W] and [Co,Ci,kt,k,k], got {x.shape} and {w.shape}")
    n, ci, t, h, wd = x.shape
    co, ciw, kt, k, _ = w.shape
    if ciw != ci:
        raise DimensionError(f"kernel expects {ciw} input channels, input has {ci}")
    if kt % 2 == 0:
        raise ParameterError(f"temporal kernel size must be odd, got {kt}")
    _check_conv_args(k, stride, pad)
    pt = (kt - 1) // 2
    ho = _out_extent(h, k, stride, pad)
    wo = _out_extent(wd, k, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kt, k, k), axis=(2, 3, 4))
    win = win[:, :, :, ::stride, ::stride, :, :, :]
    out = np.einsum("nctijsuv,ocsuv->notij", win, w.data, optimize=True)

    def pullback(g):
        gw = np.einsum("notij,nctijsuv->ocsuv", g, win, optimize=True)
        gxp = np.zeros_like(xp)
        for s in range(kt):
            for u in range(k):
                for v in range(k):
                    gxp[:, :, s : s + t, u : u + stride * ho : stride, v : v + stride * wo : stride] += np.einsum(
                        "notij,oc->nctij", g, w.data[:, :, s, u, v], optimize=True
                    )
        gx = gxp[:, :, pt : pt + t, pad : pad + h, pad : pad + wd]
        return gx.copy() if (pt or pad) else gx, gw

    return _record(out, (x, w), pullback)


# ---------------------------------------------------------------------------
# pooling and descriptors
# ---------------------------------------------------------------------------

def gap_spatial(x) -> Tensor:
    """Per-frame channel descriptor: mean over (H, W) -> [N,C,T]."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise DimensionError(f"expected [N,C,T,H,W], got shape {x.shape}")
    return mean(x, axis=(3, 4))


def gap_spatiotemporal(x) -> Tensor:
    """Clip-level channel descriptor: mean over (T, H, W) -> [N,C]."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise DimensionError(f"expected [N,C,T,H,W], got shape {x.shape}")
    return mean(x, axis=(2, 3, 4))


def _check_pool(x, k: int):
    if x.ndim < 3:
        raise DimensionError(f"temporal pooling expects [N,C,T,...], got shape {x.shape}")
    if k < 1:
        raise ParameterError(f"pooling window must be >= 1, got {k}")
    if k > x.shape[2]:
        raise ParameterError(f"pooling window {k} exceeds temporal length {x.shape[2]}")


def temporal_avg_pool_strided(x, k: int) -> Tensor:
    """Window-k mean along T at stride 1; edge replication keeps the length."""
    x = as_tensor(x)
    _check_pool(x, k)
    t = x.shape[2]
    xp = pad_axis(x, 2, (k - 1) // 2, k // 2, mode="edge")
    sl = [slice(None)] * x.ndim
    sl[2] = slice(0, t)
    acc = xp[tuple(sl)]
    for j in range(1, k):
        sl[2] = slice(j, j + t)
        acc = acc + xp[tuple(sl)]
    return mul(acc, 1.0 / k)


def temporal_max_pool_strided(x, k: int) -> Tensor:
    """Window-k max along T at stride 1; edge replication keeps the length."""
    x = as_tensor(x)
    _check_pool(x, k)
    t = x.shape[2]
    xp = pad_axis(x, 2, (k - 1) // 2, k // 2, mode="edge")
    sl = [slice(None)] * x.ndim
    sl[2] = slice(0, t)
    out = xp[tuple(sl)]
    for j in range(1, k):
        sl[2] = slice(j, j + t)
        out = maximum(out, xp[tuple(sl)])
    return out


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormParams:
    """Affine parameters plus running statistics for one channel axis."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9  # running <- momentum*running + (1-momentum)*batch

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def make_batchnorm(channels: int, dtype="f64", eps: float = 1e-5, momentum: float = 0.9,
                   zero_init: bool = False, requires_grad: bool = True) -> BatchNormParams:
    if eps <= 0:
        raise ParameterError(f"batchnorm eps must be positive, got {eps}")
    dt = resolve_dtype(dtype)
    scale = np.zeros(channels, dt) if zero_init else np.ones(channels, dt)
    return BatchNormParams(
        gamma=Tensor(scale, requires_grad=requires_grad),
        beta=Tensor(np.zeros(channels, dt), requires_grad=requires_grad),
        running_mean=np.zeros(channels, dt),
        running_var=np.ones(channels, dt),
        eps=eps,
        momentum=momentum,
    )


def batchnorm(x, params: BatchNormParams, training: bool = True) -> Tensor:
    """Normalize over all non-channel axes (channel axis 1), then scale/shift.

    Training mode uses batch statistics (biased variance) and updates the
    running statistics in place; eval mode normalizes with the stored ones.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"batchnorm expects [N,C,...], got shape {x.shape}")
    c = x.shape[1]
    if params.channels != c:
        raise DimensionError(f"batchnorm has {params.channels} channels, input has {c}")
    if params.eps <= 0:
        raise ParameterError(f"batchnorm eps must be positive, got {params.eps}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)

    if training:
        mu = mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = mean(mul(centered, centered), axis=axes, keepdims=True)
        with no_grad():
            m = params.momentum
            params.running_mean[...] = m * params.running_mean + (1 - m) * mu.data.reshape(c)
            params.running_var[...] = m * params.running_var + (1 - m) * var.data.reshape(c)
        inv_std = power(var + params.eps, -0.5)
        xhat = mul(centered, inv_std)
    else:
        mu = params.running_mean.reshape(bshape)
        inv = (params.running_var.reshape(bshape) + params.eps) ** -0.5
        xhat = mul(x - mu, inv)
    return reshape(params.gamma, bshape) * xhat + reshape(params.beta, bshape)


# ---------------------------------------------------------------------------
# linear layer and classification loss
# ---------------------------------------------------------------------------

@dataclass
class LinearParams:
    weight: Tensor  # [Co, Ci]
    bias: Tensor | None = None


def linear(x, params: LinearParams) -> Tensor:
    """x[N,Ci] @ W.T (+ bias)."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"linear expects [N,C], got shape {x.shape}")
    if x.shape[1] != params.weight.shape[1]:
        raise DimensionError(f"linear weight expects {params.weight.shape[1]} features, input has {x.shape[1]}")
    out = matmul(x, transpose(params.weight, (1, 0)))
    if params.bias is not None:
        out = out + reshape(params.bias, (1, -1))
    return out


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer labels; max-shifted for stability."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    shift = logits.data.max(axis=1, keepdims=True)  # constant w.r.t. grad
    z = logits - shift
    lse = log(tensor_sum(exp(z), axis=1, keepdims=True))
    logp = z - lse
    onehot = np.zeros((n, k), logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    return mul(tensor_sum(mul(logp, onehot)), -1.0 / n)


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator, dtype="f64") -> np.ndarray:
    """Fan-in-scaled uniform init, U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(resolve_dtype(dtype))
