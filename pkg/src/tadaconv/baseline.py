"""Static temporal-modelling operators and the calibration-equivalence oracle.

A depthwise temporal convolution stacked on a shared spatial convolution can
be rewritten as a sum of spatial convolutions whose kernels are the shared
kernel scaled per output channel by the temporal taps and, when a ReLU sits
between the two convolutions, additionally gated per spatial location by the
binary active-set mask. `temporal_conv_equivalence_oracle` evaluates both
routes and reports their divergence; the reconstruction route materializes
the location-adaptive kernels explicitly instead of reusing the stacked form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .ops import conv2d_per_frame
from .ops import conv3d  # noqa: F401  (re-export: the 3-D baseline lives with its peers)
from .oracles import naive_conv2d_per_frame
from .tensor import Tensor, as_tensor, concat, pad_axis, relu, reshape


@dataclass
class TemporalKernel:
    """Per-channel depthwise 1-D kernel along T, taps[C, kt] with kt odd."""

    taps: Tensor

    def __post_init__(self):
        self.taps = as_tensor(self.taps)
        if self.taps.ndim != 2:
            raise DimensionError(f"temporal kernel must be [C, kt], got shape {self.taps.shape}")
        if self.taps.shape[1] % 2 == 0:
            raise ParameterError(f"temporal kernel width must be odd, got {self.taps.shape[1]}")

    @property
    def channels(self) -> int:
        return self.taps.shape[0]

    @property
    def width(self) -> int:
        return self.taps.shape[1]


def depthwise_temporal_conv(x, kernel: TemporalKernel) -> Tensor:
    """y[n,c,t] = sum_j taps[c,j] * x[n,c,t+j-(kt-1)/2], zero padded along T."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"expected [N,C,T,...], got shape {x.shape}")
    if x.shape[1] != kernel.channels:
        raise DimensionError(f"kernel has {kernel.channels} channels, input has {x.shape[1]}")
    t = x.shape[2]
    kt = kernel.width
    off = (kt - 1) // 2
    xp = pad_axis(x, 2, off, off, mode="constant")
    bshape = (1, kernel.channels) + (1,) * (x.ndim - 2)
    sl = [slice(None)] * x.ndim
    out = None
    for j in range(kt):
        sl[2] = slice(j, j + t)
        term = reshape(kernel.taps[:, j], bshape) * xp[tuple(sl)]
        out = term if out is None else out + term
    return out


def r2plus1d_forward(x, w_spatial, kernel: TemporalKernel, with_activation: bool,
                     stride: int = 1, pad: int | None = None) -> Tensor:
    """Spatial conv per frame, optional ReLU, then depthwise temporal conv."""
    w_spatial = as_tensor(w_spatial)
    if kernel.channels != w_spatial.shape[0]:
        raise DimensionError(
            f"temporal kernel has {kernel.channels} channels, spatial conv outputs {w_spatial.shape[0]}"
        )
    if pad is None:
        pad = (w_spatial.shape[2] - 1) // 2
    z = conv2d_per_frame(x, w_spatial, stride=stride, pad=pad)
    if with_activation:
        z = relu(z)
    return depthwise_temporal_conv(z, kernel)


def active_mask(pre_activation: np.ndarray) -> np.ndarray:
    """Binary {0,1} map of the ReLU active set: 1 iff the value is > 0."""
    return (pre_activation > 0).astype(pre_activation.dtype)


def grouped_weights_reference(x: np.ndarray, w_spatial: np.ndarray, taps: np.ndarray,
                              stride: int = 1, pad: int | None = None) -> np.ndarray:
    """No-activation route: per-tap kernels taps[c,j]*W convolved and summed.

    Each tap's kernel is materialized and run through the naive convolution,
    so this shares nothing with the stacked spatial-then-temporal execution.
    """
    co, _, k, _ = w_spatial.shape
    if pad is None:
        pad = (k - 1) // 2
    n, ci, t = x.shape[:3]
    kt = taps.shape[1]
    off = (kt - 1) // 2
    out = None
    for j in range(kt):
        w_j = taps[:, j].reshape(co, 1, 1, 1) * w_spatial
        conv_j = naive_conv2d_per_frame(x, w_j, stride, pad)
        shifted = np.zeros_like(conv_j)
        lo, hi = max(0, off - j), min(t, t + off - j)
        shifted[:, :, lo:hi] = conv_j[:, :, lo + j - off : hi + j - off]
        out = shifted if out is None else out + shifted
    return out


def masked_reconstruction_reference(x: np.ndarray, w_spatial: np.ndarray, taps: np.ndarray,
                                    stride: int = 1, pad: int | None = None) -> np.ndarray:
    """With-activation route, rebuilt from location-adaptive kernels.

    For every (frame, spatial location) the kernel taps[c,j] * mask * W is
    materialized and contracted against the input patch, so the ReLU never
    appears explicitly on this side.
    """
    n, ci, t, h, wd = x.shape
    co, _, k, _ = w_spatial.shape
    if pad is None:
        pad = (k - 1) // 2
    kt = taps.shape[1]
    off = (kt - 1) // 2

    pre = naive_conv2d_per_frame(x, w_spatial, stride, pad)  # [N,Co,T,Ho,Wo]
    mask = active_mask(pre)
    ho, wo = pre.shape[3], pre.shape[4]

    xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (pad, pad), (pad, pad)))
    patches = np.empty((n, ci, t, ho, wo, k, k), x.dtype)
    for i in range(ho):
        for j in range(wo):
            patches[:, :, :, i, j] = xp[:, :, :, i * stride : i * stride + k, j * stride : j * stride + k]

    out = np.zeros_like(pre)
    for j in range(kt):
        # kernels[n,c,t,i,j,ci,u,v] = taps[c,j] * mask[n,c,t,i,j] * W[c,ci,u,v]
        gate = taps[None, :, j, None, None, None] * mask
        kernels = gate[..., None, None, None] * w_spatial[None, :, None, None, None]
        contrib = np.einsum("nctijduv,ndtijuv->nctij", kernels, patches, optimize=True)
        lo, hi = max(0, off - j), min(t, t + off - j)
        out[:, :, lo:hi] += contrib[:, :, lo + j - off : hi + j - off]
    return out


def temporal_conv_equivalence_oracle(x, w_spatial, kernel: TemporalKernel,
                                     stride: int = 1, pad: int | None = None) -> dict:
    """Evaluate the stacked form and the masked reconstruction, return both sides."""
    x = as_tensor(x)
    w_spatial = as_tensor(w_spatial)
    lhs = r2plus1d_forward(x, w_spatial, kernel, with_activation=True, stride=stride, pad=pad)
    rhs = masked_reconstruction_reference(x.data, w_spatial.data, kernel.taps.data, stride=stride, pad=pad)
    return {
        "lhs": lhs.data,
        "rhs": rhs,
        "max_abs_diff": float(np.max(np.abs(lhs.data - rhs))) if lhs.data.size else 0.0,
    }


def temporal_shift(x, fraction_fwd: float, fraction_bwd: float) -> Tensor:
    """Shift leading channel groups by +1/-1 along T, zero filled at the ends.

    The first floor(fraction_fwd*C) channels are delayed by one frame, the
    next floor(fraction_bwd*C) advanced by one; the remainder pass through.
    """
    x = as_tensor(x)
    if x.ndim != 5:
        raise DimensionError(f"expected [N,C,T,H,W], got shape {x.shape}")
    for f in (fraction_fwd, fraction_bwd):
        if not 0.0 <= f <= 0.5:
            raise ParameterError(f"shift fractions must lie in [0, 0.5], got {f}")
    c = x.shape[1]
    n_fwd = int(fraction_fwd * c)
    n_bwd = int(fraction_bwd * c)
    if n_fwd + n_bwd > c:
        raise ParameterError(f"shifted groups overlap: {n_fwd}+{n_bwd} channels of {c}")

    n, _, t, h, w = x.shape
    parts = []
    if n_fwd:
        zero = Tensor(np.zeros((n, n_fwd, 1, h, w), x.dtype))
        parts.append(concat([zero, x[:, :n_fwd, : t - 1]], axis=2))
    if n_bwd:
        zero = Tensor(np.zeros((n, n_bwd, 1, h, w), x.dtype))
        parts.append(concat([x[:, n_fwd : n_fwd + n_bwd, 1:], zero], axis=2))
    if n_fwd + n_bwd < c:
        parts.append(x[:, n_fwd + n_bwd :])
    return parts[0] if len(parts) == 1 else concat(parts, axis=1)
