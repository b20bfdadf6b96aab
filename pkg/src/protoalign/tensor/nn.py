"""Image-shaped primitives in NHWC layout."""
from __future__ import annotations

import numpy as np

from protoalign.errors import ShapeError
from protoalign.tensor.core import Tensor, as_tensor


def conv2d(x, weight, bias=None, stride: int = 1, dilation: int = 1) -> Tensor:
    """2-D convolution with "same" zero padding.

    ``x`` is (N, H, W, Cin), ``weight`` is (kh, kw, Cin, Cout) with odd
    kernel extents. Output is (N, ceil(H/stride), ceil(W/stride), Cout).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    kh, kw, cin, cout = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", weight.shape, detail="kernel extents must be odd")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError("conv2d", weight.shape, bias.shape)
    n, h, w, _ = x.shape
    ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))

    taps = [(i * dilation, j * dilation) for i in range(kh) for j in range(kw)]
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.stack([xp[:, r:r + span_h:stride, c:c + span_w:stride, :] for r, c in taps], axis=3)
    cols2d = cols.reshape(n * ho * wo, kh * kw * cin)
    w2d = weight.data.reshape(kh * kw * cin, cout)
    out = (cols2d @ w2d).reshape(n, ho, wo, cout)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2d = g.reshape(n * ho * wo, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (cols2d.T @ g2d).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2d.sum(axis=0)
        if x.requires_grad:
            gcols = (g2d @ w2d.T).reshape(n, ho, wo, kh * kw, cin)
            gxp = np.zeros_like(xp)
            for t, (r, c) in enumerate(taps):
                gxp[:, r:r + span_h:stride, c:c + span_w:stride, :] += gcols[:, :, :, t, :]
            gx = gxp[:, ph:ph + h, pw:pw + w, :]
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward, "conv2d")


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over all but the last axis.

    In training mode the batch statistics are used and the running buffers
    are updated in place (they are plain arrays, not tracked tensors).
    Otherwise the stored running statistics are applied as a fixed affine map.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm", x.shape, gamma.shape, beta.shape)
    axes = tuple(range(x.ndim - 1))
    if training:
        count = x.data.size // c
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                gx = inv * (gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes))
            else:
                gx = gxhat * inv
        return gx, ggamma, gbeta

    return Tensor._result(out, (x, gamma, beta), backward, "batch_norm")


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def avg_pool2d(x, factor: int) -> Tensor:
    """Non-overlapping mean pooling of an (N, H, W, C) tensor."""
    x = as_tensor(x)
    if factor == 1:
        return x
    n, h, w, c = x.shape
    if h % factor or w % factor:
        raise ShapeError("avg_pool2d", x.shape, detail=f"factor {factor} must divide H and W")
    out = x.data.reshape(n, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4))

    def backward(g):
        g = np.repeat(np.repeat(g, factor, axis=1), factor, axis=2)
        return (g / (factor * factor),)

    return Tensor._result(out, (x,), backward, "avg_pool2d")


def upsample_nearest(x, factor: int) -> Tensor:
    x = as_tensor(x)
    if factor == 1:
        return x
    if x.ndim != 4:
        raise ShapeError("upsample_nearest", x.shape)
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)
    n, h, w, c = x.shape

    def backward(g):
        return (g.reshape(n, h, factor, w, factor, c).sum(axis=(2, 4)),)

    return Tensor._result(out, (x,), backward, "upsample_nearest")


def bilinear_matrix(size_in: int, factor: int) -> np.ndarray:
    """(size_in*factor, size_in) interpolation matrix, half-pixel centres, edge clamped."""
    size_out = size_in * factor
    pos = (np.arange(size_out) + 0.5) / factor - 0.5
    pos = np.clip(pos, 0.0, size_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, size_in - 1)
    frac = pos - lo
    mat = np.zeros((size_out, size_in))
    rows = np.arange(size_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def _apply_rows(x: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Contract axis 1 of (N, H, W, C) with ``mat`` (H', H)."""
    return np.moveaxis(np.tensordot(mat, x, axes=([1], [1])), 0, 1)


def _apply_cols(x: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Contract axis 2 of (N, H, W, C) with ``mat`` (W', W)."""
    return np.moveaxis(np.tensordot(mat, x, axes=([1], [2])), 0, 2)


def upsample_bilinear(x, factor: int) -> Tensor:
    x = as_tensor(x)
    if factor == 1:
        return x
    if x.ndim != 4:
        raise ShapeError("upsample_bilinear", x.shape)
    uh = bilinear_matrix(x.shape[1], factor)
    uw = bilinear_matrix(x.shape[2], factor)
    out = _apply_rows(_apply_cols(x.data, uw), uh)

    def backward(g):
        return (_apply_rows(_apply_cols(g, uw.T), uh.T),)

    return Tensor._result(out, (x,), backward, "upsample_bilinear")
