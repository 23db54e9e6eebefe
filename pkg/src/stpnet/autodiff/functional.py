"""Differentiable operators used by the network blocks.

Convolution works on NCHW arrays.  Kernel taps whose receptive field lies
entirely in the zero padding contribute nothing and are skipped, which keeps
the large-dilation convolutions cheap on small feature maps.
"""
from __future__ import annotations

import functools
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..errors import InvalidArgumentError
from .tensor import Tensor, _norm_axes, _stable_sigmoid, as_tensor, make_result


# --------------------------------------------------------------------- conv2d
def _axis_range(n_in: int, n_out: int, offset: int, stride: int):
    # output index o reads input index o * stride + offset
    lo = max(0, -(offset // stride))
    hi = min(n_out - 1, (n_in - 1 - offset) // stride)
    if lo > hi:
        return None
    return slice(lo, hi + 1), slice(lo * stride + offset, hi * stride + offset + 1, stride)


@functools.lru_cache(maxsize=512)
def _tap_plan(H, W, kh, kw, stride, padding, dilation):
    Ho = (H + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    Wo = (W + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    plan = []
    for i in range(kh):
        r = _axis_range(H, Ho, i * dilation - padding, stride)
        if r is None:
            continue
        for j in range(kw):
            c = _axis_range(W, Wo, j * dilation - padding, stride)
            if c is None:
                continue
            plan.append((i * kw + j, r[0], r[1], c[0], c[1]))
    return Ho, Wo, tuple(plan)


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(x, plan, Ho, Wo):
    B, C = x.shape[:2]
    cols = np.zeros((B, C, len(plan), Ho, Wo), dtype=x.dtype)
    for t, (_, ro, ri, co, ci) in enumerate(plan):
        cols[:, :, t, ro, co] = x[:, :, ri, ci]
    return cols


def _col2im(gcols, plan, shape):
    gx = np.zeros(shape, dtype=gcols.dtype)
    for t, (_, ro, ri, co, ci) in enumerate(plan):
        gx[:, :, ri, ci] += gcols[:, :, t, ro, co]
    return gx


def _dense_conv(x, w, plan, Ho, Wo, identity):
    B, Cin = x.shape[:2]
    Cout = w.shape[0]
    taps = [p[0] for p in plan]
    w2 = w.reshape(Cout, Cin, -1)[:, :, taps].reshape(Cout, Cin * len(taps))
    if identity:
        cols2 = x.reshape(B, Cin, Ho * Wo)
    else:
        cols2 = _im2col(x, plan, Ho, Wo).reshape(B, Cin * len(taps), Ho * Wo)
    out = np.matmul(w2, cols2).reshape(B, Cout, Ho, Wo)
    return out, w2, cols2, taps


def _dense_conv_backward(g, x, w, plan, Ho, Wo, identity, w2, cols2, taps, need_x, need_w):
    B, Cin = x.shape[:2]
    Cout = w.shape[0]
    g2 = g.reshape(B, Cout, Ho * Wo)
    gx = gw = None
    if need_w:
        gw2 = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0)
        if len(taps) == w.shape[2] * w.shape[3]:
            gw = gw2.reshape(w.shape)
        else:
            gw = np.zeros((Cout, Cin, w.shape[2] * w.shape[3]), dtype=w.dtype)
            gw[:, :, taps] = gw2.reshape(Cout, Cin, len(taps))
            gw = gw.reshape(w.shape)
    if need_x:
        gcols = np.matmul(w2.T, g2)
        if identity:
            gx = gcols.reshape(x.shape)
        else:
            gx = _col2im(gcols.reshape(B, Cin, len(taps), Ho, Wo), plan, x.shape)
    return gx, gw


def _depthwise_conv(x, w, plan, Ho, Wo):
    B, C = x.shape[:2]
    wf = w.reshape(C, -1)
    out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    for tap, ro, ri, co, ci in plan:
        out[:, :, ro, co] += x[:, :, ri, ci] * wf[:, tap][None, :, None, None]
    return out


def _depthwise_backward(g, x, w, plan, need_x, need_w):
    C = x.shape[1]
    wf = w.reshape(C, -1)
    gx = np.zeros_like(x) if need_x else None
    gw = np.zeros_like(wf) if need_w else None
    for tap, ro, ri, co, ci in plan:
        gs = g[:, :, ro, co]
        if need_w:
            gw[:, tap] = np.einsum("bchw,bchw->c", gs, x[:, :, ri, ci])
        if need_x:
            gx[:, :, ri, ci] += gs * wf[:, tap][None, :, None, None]
    return gx, (gw.reshape(w.shape) if need_w else None)


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding, dilation and channel groups."""
    if x.ndim != 4 or w.ndim != 4:
        raise InvalidArgumentError("conv2d expects x [B,C,H,W] and w [Cout,Cin/g,kh,kw]")
    B, Cin, H, W = x.shape
    Cout, cpg, kh, kw = w.shape
    if groups < 1 or Cin % groups or Cout % groups:
        raise InvalidArgumentError(
            f"channels ({Cin} in, {Cout} out) not divisible by groups={groups}"
        )
    if cpg != Cin // groups:
        raise InvalidArgumentError(
            f"weight expects {cpg} input channels per group, input has {Cin // groups}"
        )
    if bias is not None and bias.shape != (Cout,):
        raise InvalidArgumentError("bias must have shape [Cout]")
    if stride < 1 or dilation < 1 or padding < 0:
        raise InvalidArgumentError("stride and dilation must be >= 1, padding >= 0")
    if H + 2 * padding < dilation * (kh - 1) + 1 or W + 2 * padding < dilation * (kw - 1) + 1:
        raise InvalidArgumentError("kernel extent exceeds padded input")

    Ho, Wo, plan = _tap_plan(H, W, kh, kw, stride, padding, dilation)
    identity = kh == kw == 1 and stride == 1 and padding == 0
    xd, wd = x.data, w.data
    depthwise = groups == Cin == Cout and cpg == 1

    if depthwise:
        out = _depthwise_conv(xd, wd, plan, Ho, Wo)
        saved = None
    elif groups == 1:
        out, *saved = _dense_conv(xd, wd, plan, Ho, Wo, identity)
    else:
        og = Cout // groups
        parts, saved = [], []
        for gi in range(groups):
            o, *s = _dense_conv(
                xd[:, gi * cpg:(gi + 1) * cpg], wd[gi * og:(gi + 1) * og], plan, Ho, Wo, identity
            )
            parts.append(o)
            saved.append(s)
        out = np.concatenate(parts, axis=1)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        need_x, need_w = x.requires_grad, w.requires_grad
        if depthwise:
            gx, gw = _depthwise_backward(g, xd, wd, plan, need_x, need_w)
        elif groups == 1:
            gx, gw = _dense_conv_backward(g, xd, wd, plan, Ho, Wo, identity, *saved, need_x, need_w)
        else:
            og = Cout // groups
            gxs, gws = [], []
            for gi in range(groups):
                a, b = _dense_conv_backward(
                    g[:, gi * og:(gi + 1) * og],
                    xd[:, gi * cpg:(gi + 1) * cpg],
                    wd[gi * og:(gi + 1) * og],
                    plan, Ho, Wo, identity, *saved[gi], need_x, need_w,
                )
                gxs.append(a)
                gws.append(b)
            gx = np.concatenate(gxs, axis=1) if need_x else None
            gw = np.concatenate(gws, axis=0) if need_w else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return make_result(out, parents, backward, "conv2d")


# -------------------------------------------------------------------- pooling
def maxpool2d(x: Tensor, k: int = 2, stride: Optional[int] = None) -> Tensor:
    """Non-overlapping max pooling (``k == stride``); ties go to the first element."""
    stride = k if stride is None else stride
    if stride != k:
        raise InvalidArgumentError("only k == stride pooling is supported")
    B, C, H, W = x.shape
    if H % k or W % k:
        raise InvalidArgumentError(f"spatial dims {H}x{W} not divisible by {k}")
    Ho, Wo = H // k, W // k
    win = x.data.reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, k * k)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((B, C, Ho, Wo, k * k), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return make_result(out, (x,), backward, "maxpool2d")


# -------------------------------------------------------------- normalization
def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, given momentum).
    """
    if x.ndim != 4:
        raise InvalidArgumentError("batchnorm2d expects [B,C,H,W]")
    B, C, H, W = x.shape
    axes = (0, 2, 3)
    xd = x.data
    g_ = gamma.data[None, :, None, None]
    if training:
        n = B * H * W
        if n < 2:
            raise InvalidArgumentError("batchnorm2d in train mode needs B*H*W >= 2")
        mu = xd.mean(axis=axes)
        xc = xd - mu[None, :, None, None]
        var = np.mean(xc * xc, axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv[None, :, None, None]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype)
        xhat = (xd - running_mean.astype(xd.dtype)[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * g_ + beta.data[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * g_
            if training:
                m1 = gxhat.mean(axis=axes)[None, :, None, None]
                m2 = (gxhat * xhat).mean(axis=axes)[None, :, None, None]
                gx = (gxhat - m1 - xhat * m2) * inv[None, :, None, None]
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward, "batchnorm2d")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            ) * inv
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------- activations
def relu(x: Tensor) -> Tensor:
    return x.relu()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    c = math.sqrt(2.0 / math.pi)
    x2 = xd * xd
    u = c * xd * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return make_result(out, (x,), backward, "gelu")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) computed without overflow."""
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    s = _stable_sigmoid(xd)
    return make_result(out, (x,), lambda g: (g * s,), "softplus")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    (axis,) = _norm_axes(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    (axis,) = _norm_axes(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


# --------------------------------------------------------------------- affine
def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` over the last axis; ``w`` has shape [out, in]."""
    if x.shape[-1] != w.shape[1]:
        raise InvalidArgumentError(
            f"linear: input width {x.shape[-1]} != weight in-features {w.shape[1]}"
        )
    xd = x.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ w.data.T
    if b is not None:
        out += b.data
    out = out.reshape(lead + (w.shape[0],))

    def backward(g):
        g2 = g.reshape(-1, w.shape[0])
        gx = (g2 @ w.data).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward, "linear")


# ------------------------------------------------------------------ structure
def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise InvalidArgumentError("concat of an empty sequence")
    (axis,) = _norm_axes(axis, xs[0].ndim)
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in xs], axis=axis)

    def backward(g):
        grads = []
        for i in range(len(xs)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return make_result(out, tuple(xs), backward, "concat")


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return x.mean(axis=axes, keepdims=keepdims)


@functools.lru_cache(maxsize=64)
def _bilinear_matrix(n: int, dtype_str: str) -> np.ndarray:
    """(2n x n) interpolation matrix with corner-aligned sampling."""
    m = 2 * n
    A = np.zeros((m, n), dtype=np.float64)
    if n == 1:
        A[:, 0] = 1.0
    else:
        pos = np.arange(m) * (n - 1) / (m - 1)
        lo = np.minimum(np.floor(pos).astype(int), n - 2)
        frac = pos - lo
        A[np.arange(m), lo] = 1.0 - frac
        A[np.arange(m), lo + 1] += frac
    return A.astype(dtype_str)


def upsample2x(x: Tensor, mode: str = "nearest") -> Tensor:
    """Double H and W by nearest-neighbour or corner-aligned bilinear sampling."""
    if x.ndim != 4:
        raise InvalidArgumentError("upsample2x expects [B,C,H,W]")
    B, C, H, W = x.shape
    xd = x.data
    if mode == "nearest":
        out = np.repeat(np.repeat(xd, 2, axis=2), 2, axis=3)

        def backward(g):
            return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    elif mode == "bilinear":
        Ah = _bilinear_matrix(H, xd.dtype.str)
        Aw = _bilinear_matrix(W, xd.dtype.str)
        out = np.matmul(np.matmul(Ah, xd), Aw.T)

        def backward(g):
            return (np.matmul(np.matmul(Ah.T, g), Aw),)

    else:
        raise InvalidArgumentError(f"unknown upsample mode {mode!r}")
    return make_result(out, (x,), backward, f"upsample2x_{mode}")


# ------------------------------------------------------------------ attention
def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, heads: int = 1, return_weights: bool = False
):
    """Multi-head ``softmax(Q K^T / sqrt(d_head)) V``.

    ``q``/``k`` are [B, T, dk] and ``v`` is [B, T, dv]; heads split the last
    axis and the per-head outputs are concatenated back to [B, T, dv].  Any
    output projection belongs to the caller.
    """
    B, Tq, dk = q.shape
    _, Tk, dv = v.shape
    if k.shape != (B, Tk, dk):
        raise InvalidArgumentError("attention: K shape does not match Q / V")
    if heads < 1 or dk % heads or dv % heads:
        raise InvalidArgumentError(f"dk={dk}, dv={dv} not divisible by heads={heads}")
    hk, hv = dk // heads, dv // heads
    qh = q.reshape(B, Tq, heads, hk).transpose(0, 2, 1, 3)
    kh = k.reshape(B, Tk, heads, hk).transpose(0, 2, 3, 1)
    vh = v.reshape(B, Tk, heads, hv).transpose(0, 2, 1, 3)
    scores = (qh @ kh) * (1.0 / math.sqrt(hk))
    weights = softmax(scores, axis=-1)
    out = (weights @ vh).transpose(0, 2, 1, 3).reshape(B, Tq, dv)
    if return_weights:
        return out, weights
    return out


def cosine_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean norm."""
    from ..errors import NumericError

    norm2 = (x * x).sum(axis=axis, keepdims=True)
    if np.any(norm2.data == 0):
        raise NumericError("cosine similarity of a zero-norm vector")
    return x / norm2.sqrt()
