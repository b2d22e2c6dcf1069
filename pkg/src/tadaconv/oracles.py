"""Brute-force reference implementations and the finite-difference checker.

Everything in this module is written as plain index loops over numpy scalars
(or one np.dot over an explicitly gathered patch), independent of the strided
window views and einsum contractions used by the real operators. Tests and
the verification CLI compare both routes; keep this file boring.
"""

from __future__ import annotations

import numpy as np


def naive_conv2d_frame(frame: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Direct 2-D cross-correlation of one frame [Ci,H,W] with w[Co,Ci,k,k]."""
    ci, h, wd = frame.shape
    co, _, k, _ = w.shape
    fp = np.pad(frame, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((co, ho, wo), frame.dtype)
    for c in range(co):
        for i in range(ho):
            for j in range(wo):
                patch = fp[:, i * stride : i * stride + k, j * stride : j * stride + k]
                out[c, i, j] = np.sum(patch * w[c])
    return out


def naive_conv2d_per_frame(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, ci, t, h, wd = x.shape
    frames = [
        np.stack([naive_conv2d_frame(x[b, :, ti], w, stride, pad) for ti in range(t)], axis=1)
        for b in range(n)
    ]
    return np.stack(frames, axis=0)


def naive_conv1d(v: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, c, t = v.shape
    co, _, k = w.shape
    vp = np.pad(v, ((0, 0), (0, 0), (pad, pad)))
    to = (t + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, to), v.dtype)
    for b in range(n):
        for o in range(co):
            for i in range(to):
                out[b, o, i] = np.sum(vp[b, :, i * stride : i * stride + k] * w[o])
    return out


def naive_conv3d(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Temporal axis: same-length, zero pad (kt-1)/2, stride 1."""
    n, ci, t, h, wd = x.shape
    co, _, kt, k, _ = w.shape
    pt = (kt - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, t, ho, wo), x.dtype)
    for b in range(n):
        for o in range(co):
            for ti in range(t):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[b, :, ti : ti + kt, i * stride : i * stride + k, j * stride : j * stride + k]
                        out[b, o, ti, i, j] = np.sum(patch * w[o])
    return out


def naive_depthwise_temporal(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """y[n,c,t] = sum_j taps[c,j] * x[n,c,t+j-(kt-1)/2], zero padded in T."""
    n, c, t = x.shape[:3]
    kt = taps.shape[1]
    off = (kt - 1) // 2
    out = np.zeros_like(x)
    for j in range(kt):
        for ti in range(t):
            src = ti + j - off
            if 0 <= src < t:
                out[:, :, ti] += taps[None, :, j].reshape((1, c) + (1,) * (x.ndim - 3)) * x[:, :, src]
    return out


def naive_gap_spatial(x: np.ndarray) -> np.ndarray:
    n, c, t, h, w = x.shape
    out = np.zeros((n, c, t), x.dtype)
    for b in range(n):
        for ch in range(c):
            for ti in range(t):
                out[b, ch, ti] = x[b, ch, ti].sum() / (h * w)
    return out


def naive_gap_spatiotemporal(x: np.ndarray) -> np.ndarray:
    n, c, t, h, w = x.shape
    out = np.zeros((n, c), x.dtype)
    for b in range(n):
        for ch in range(c):
            out[b, ch] = x[b, ch].sum() / (t * h * w)
    return out


def naive_temporal_pool(x: np.ndarray, k: int, kind: str) -> np.ndarray:
    """Stride-1, window-k pooling over axis 2 with edge replication."""
    t = x.shape[2]
    left, right = (k - 1) // 2, k // 2
    widths = [(0, 0)] * x.ndim
    widths[2] = (left, right)
    xp = np.pad(x, widths, mode="edge")
    out = np.empty_like(x)
    for ti in range(t):
        window = xp[:, :, ti : ti + k]
        if kind == "avg":
            out[:, :, ti] = window.mean(axis=2)
        elif kind == "max":
            out[:, :, ti] = window.max(axis=2)
        else:
            raise ValueError(f"unknown pooling kind {kind!r}")
    return out


def naive_aggregation(conv_out: np.ndarray, bn1_fn, bn2_fn, k: int, pool_kind: str) -> np.ndarray:
    """Reference for the two-branch aggregation: relu(bn1(x) + bn2(pool_k(x)))."""
    if pool_kind == "mix":
        pooled = 0.5 * (naive_temporal_pool(conv_out, k, "avg") + naive_temporal_pool(conv_out, k, "max"))
    else:
        pooled = naive_temporal_pool(conv_out, k, pool_kind)
    pre = bn1_fn(conv_out) + bn2_fn(pooled)
    return np.where(pre > 0, pre, 0.0)


def materialized_forward_reference(x: np.ndarray, base_w: np.ndarray, factors,
                                   stride: int = 1, pad: int = 0) -> np.ndarray:
    """Calibrated conv rebuilt kernel by kernel: scale base_w per (clip, frame),
    then run the naive convolution on that frame.

    factors: broadcastable arrays [N|1, T|1, Co|1, Ci|1, k|1, k|1].
    """
    n, ci, t = x.shape[:3]
    clips = []
    for b in range(n):
        frames = []
        for ti in range(t):
            wk = base_w.copy()
            for f in factors:
                bi = b if f.shape[0] > 1 else 0
                si = ti if f.shape[1] > 1 else 0
                wk = wk * f[bi, si]
            frames.append(naive_conv2d_frame(x[b, :, ti], wk, stride, pad))
        clips.append(np.stack(frames, axis=1))
    return np.stack(clips, axis=0)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_difference_grad(loss_fn, arr: np.ndarray, base_step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar loss w.r.t. every entry of arr.

    Step per coordinate is base_step * (1 + |value|); arr is perturbed in
    place and restored, so loss_fn must read it afresh on every call.
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = base_step * (1.0 + abs(orig))
        flat[i] = orig + h
        hi = loss_fn()
        flat[i] = orig - h
        lo = loss_fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1.0) -> float:
    """max |a-n| / max(floor, |a|, |n|); absolute below the floor, relative above."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(n)))
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / denom))
