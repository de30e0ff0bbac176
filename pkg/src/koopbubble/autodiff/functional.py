"""Differentiable layers: dense, convolutions, pooling, activation, loss.

Spatial operations take ``(C, H, W)`` or batched ``(N, C, H, W)`` inputs and
return the same rank they were given.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, note_branch, record


def _batched(x: Tensor, name: str):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{name} expects (C,H,W) or (N,C,H,W), got shape {x.shape}")


def dense(x, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W.T + b`` over the last axis of ``x``."""
    x = as_tensor(x)
    if W.ndim != 2 or x.shape[-1:] != W.shape[1:]:
        raise ShapeError(f"dense: input shape {x.shape} incompatible with weight shape {W.shape}")
    if b is not None and b.shape != W.shape[:1]:
        raise ShapeError(f"dense: bias shape {b.shape} does not match weight shape {W.shape}")
    y = x.data @ W.data.T
    if b is not None:
        y = y + b.data
    xshape = x.shape

    def rule(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, xshape[-1])
        gx = (g @ W.data).reshape(xshape)
        gW = g2.T @ x2
        grads = [gx, gW]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, W) if b is None else (x, W, b)
    return record(y, parents, rule, "dense")


def _im2col(xd: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = xd.shape
    pad = k // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, h, w, k, k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def _conv_cols(cols: np.ndarray, kmat: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return (cols @ kmat.T).reshape(n, h, w, -1).transpose(0, 3, 1, 2)


def conv2d(x, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with zero padding ``k // 2`` (odd square kernels)."""
    x = as_tensor(x)
    xd, squeeze = _batched(x, "conv2d")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d kernels must be (C_out, C_in, k, k), got {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d needs an odd square kernel, got {kh}x{kw}")
    n, c, h, w = xd.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels, kernels expect {c_in}")
    cols = _im2col(xd, kh)
    kmat = kernels.data.reshape(c_out, -1)
    y = _conv_cols(cols, kmat, n, h, w)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    y = np.ascontiguousarray(y)

    def rule(g):
        if squeeze:
            g = g[None]
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gk = (g2.T @ cols).reshape(kernels.shape)
        # input gradient: correlation with the flipped, channel-swapped kernels
        kflip = kernels.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
        gx = np.ascontiguousarray(_conv_cols(_im2col(g, kh), kflip, n, h, w))
        if squeeze:
            gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return record(y[0] if squeeze else y, parents, rule, "conv2d")


def maxpool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; a trailing odd row/column is dropped."""
    x = as_tensor(x)
    xd, squeeze = _batched(x, "maxpool2d")
    n, c, h, w = xd.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2d needs H, W >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    blocks = (
        xd[:, :, :2 * ho, :2 * wo]
        .reshape(n, c, ho, 2, wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, 4)
    )
    idx = blocks.argmax(axis=-1)[..., None]
    note_branch(idx)
    y = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def rule(g):
        if squeeze:
            g = g[None]
        gb = np.zeros((n, c, ho, wo, 4))
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gx = np.zeros((n, c, h, w))
        gx[:, :, :2 * ho, :2 * wo] = (
            gb.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        )
        return (gx[0] if squeeze else gx,)

    return record(y[0] if squeeze else y, (x,), rule, "maxpool2d")


def downsample_conv2x2(y: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Stride-2, 2x2 correlation ``(N, C_out, 2H, 2W) -> (N, C_in, H, W)``.

    This is the adjoint of the stride-2 transposed convolution with the same
    ``(C_in, C_out, 2, 2)`` kernels.
    """
    n, o, h2, w2 = y.shape
    y6 = y.reshape(n, o, h2 // 2, 2, w2 // 2, 2)
    return np.einsum("nohawb,coab->nchw", y6, kernels, optimize=True)


def transposed_conv2d(x, kernels: Tensor, output_hw, bias: Tensor | None = None) -> Tensor:
    """Stride-2, 2x2 transposed convolution to ``output_hw``.

    Targets of ``2H+1`` / ``2W+1`` receive one trailing zero row / column.
    """
    x = as_tensor(x)
    xd, squeeze = _batched(x, "transposed_conv2d")
    if kernels.ndim != 4 or kernels.shape[2:] != (2, 2):
        raise ShapeError(f"transposed_conv2d kernels must be (C_in, C_out, 2, 2), got {kernels.shape}")
    n, c, h, w = xd.shape
    c_in, c_out = kernels.shape[:2]
    if c != c_in:
        raise ShapeError(f"transposed_conv2d: input has {c} channels, kernels expect {c_in}")
    th, tw = (int(v) for v in output_hw)
    if th not in (2 * h, 2 * h + 1) or tw not in (2 * w, 2 * w + 1):
        raise ShapeError(
            f"transposed_conv2d: target {(th, tw)} not reachable from {(h, w)}; "
            f"allowed heights {{{2 * h}, {2 * h + 1}}}, widths {{{2 * w}, {2 * w + 1}}}"
        )
    y = np.tensordot(xd, kernels.data, axes=([1], [0]))  # n, h, w, o, 2, 2
    y = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, c_out, 2 * h, 2 * w)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    if (th, tw) != (2 * h, 2 * w):
        y = np.pad(y, ((0, 0), (0, 0), (0, th - 2 * h), (0, tw - 2 * w)))
    y = np.ascontiguousarray(y)

    def rule(g):
        if squeeze:
            g = g[None]
        gc = np.ascontiguousarray(g[:, :, :2 * h, :2 * w])
        gx = downsample_conv2x2(gc, kernels.data)
        g6 = gc.reshape(n, c_out, h, 2, w, 2)
        gk = np.einsum("nchw,nohawb->coab", xd, g6, optimize=True)
        grads = [gx[0] if squeeze else gx, gk]
        if bias is not None:
            grads.append(gc.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return record(y[0] if squeeze else y, parents, rule, "transposed_conv2d")


def relu(x) -> Tensor:
    """``max(0, x)``; the derivative at exactly 0 is taken as 0.  NaN propagates."""
    x = as_tensor(x)
    mask = x.data > 0
    note_branch(mask)
    return record(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def residual_block(x, w1, b1, w2, b2, skip_w=None, skip_b=None) -> Tensor:
    """``relu(conv(relu(conv(x, w1)), w2) + skip(x))``.

    ``skip`` is the identity unless a 1x1 projection is given, which is
    required when the channel count changes.
    """
    x = as_tensor(x)
    c_in = x.shape[-3]
    if skip_w is None and w2.shape[0] != c_in:
        raise ShapeError(
            f"residual_block: {c_in} -> {w2.shape[0]} channels needs a 1x1 skip projection"
        )
    h = relu(conv2d(x, w1, b1))
    h = conv2d(h, w2, b2)
    skip = x if skip_w is None else conv2d(x, skip_w, skip_b)
    return relu(h + skip)


def mse(a, b) -> Tensor:
    """Mean of squared differences over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size
    val = np.asarray(np.mean(d * d))

    def rule(g):
        ga = (2.0 / n) * g * d
        return ga, -ga

    return record(val, (a, b), rule, "mse")


def flatten(x: Tensor, start: int = 1) -> Tensor:
    return x.reshape(x.shape[:start] + (-1,))
