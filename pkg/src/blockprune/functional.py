"""Differentiable neural-network operations on :class:`Tensor`.

Convolutions are computed by im2col: a strided sliding-window view of the
padded input contracted against the kernel with ``tensordot``. Gradients for
the input are scattered back window offset by window offset, which keeps the
reduction order fixed and therefore bit-deterministic.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ShapeError, Tensor, as_tensor, log_kink, make_node


def _out_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_positive(name: str, value: int, minimum: int = 1) -> None:
    if int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value}")


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, ho, wo, kh, kw) view into the padded input
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride][:, :, :ho, :wo]


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _scatter_windows(cols: np.ndarray, padded_shape, stride: int, padding: int, h: int, w: int) -> np.ndarray:
    """Adjoint of ``_windows``: sum (N, C, ho, wo, kh, kw) window gradients into the input."""
    n, c, ho, wo, kh, kw = cols.shape
    gxp = np.zeros(padded_shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[
                :, :, :, :, i, j
            ]
    return gxp[:, :, padding : padding + h, padding : padding + w]


def _spatial_geometry(x: Tensor, kh: int, kw: int, stride: int, padding: int, op: str) -> tuple[int, int]:
    if x.ndim != 4:
        raise ShapeError(f"{op}: input must be 4-d [N,C,H,W], got shape {x.shape}")
    _check_positive("stride", stride)
    _check_positive("padding", padding, 0)
    _, _, h, w = x.shape
    ho, wo = _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"{op}: kernel {kh}x{kw} with stride {stride}, padding {padding} does not fit input H={h}, W={w}"
        )
    return ho, wo


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N*ho*wo, Cin*kh*kw), rows ordered (n, y, x), columns ordered (c, i, j)
    n, c = xp.shape[:2]
    cols = _windows(xp, kh, kw, stride, ho, wo).transpose(0, 2, 3, 1, 4, 5)
    return np.ascontiguousarray(cols).reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-d [Cout,Cin,kh,kw], got shape {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if x.ndim == 4 and x.shape[1] != cin:
        raise ShapeError(f"conv2d: input channel axis (1) has {x.shape[1]} but weight Cin axis (1) has {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match weight Cout axis (0) = {cout}")
    ho, wo = _spatial_geometry(x, kh, kw, stride, padding, "conv2d")
    n, _, h, w = x.shape
    xp = _pad(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2d = weight.data.reshape(cout, -1)
    out2d = cols @ w2d.T
    if bias is not None:
        out2d += bias.data
    out = np.ascontiguousarray(out2d.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2d.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and 2 * padding < kh and 2 * padding < kw:
                # adjoint of a stride-1 correlation is a full correlation with the flipped kernel
                flipped = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - padding,) * 2, (kw - 1 - padding,) * 2))
                gcols = _im2col(gp, kh, kw, 1, h, w)
                gx = (gcols @ flipped.reshape(cin, -1).T).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
            else:
                gcols = (g2d @ w2d).reshape(n, ho, wo, cin, kh, kw)
                gx = _scatter_windows(gcols.transpose(0, 3, 1, 2, 4, 5), xp.shape, stride, padding, h, w)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(out, parents, backward)


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if weight.ndim != 4 or weight.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: weight must be [C,1,kh,kw], got shape {weight.shape}")
    c, _, kh, kw = weight.shape
    if x.ndim == 4 and x.shape[1] != c:
        raise ShapeError(f"depthwise_conv2d: input channel axis (1) has {x.shape[1]} but weight axis (0) has {c}")
    ho, wo = _spatial_geometry(x, kh, kw, stride, padding, "depthwise_conv2d")
    _, _, h, w = x.shape
    xp = _pad(x.data, padding)
    cols = _windows(xp, kh, kw, stride, ho, wo)
    k = weight.data[:, 0]
    out = np.einsum("nchwij,cij->nchw", cols, k).astype(DTYPE)

    def backward(g):
        gw = np.einsum("nchw,nchwij->cij", g, cols)[:, None].astype(DTYPE) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g[:, :, :, :, None, None] * k[None, :, None, None, :, :]
            gx = _scatter_windows(gcols, xp.shape, stride, padding, h, w)
        return gx, gw

    return make_node(out, (x, weight), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear: expected input [N,Din] and weight [Dout,Din], got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input axis 1 has {x.shape[1]} features but weight axis 1 expects {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} does not match Dout = {weight.shape[0]}")
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    log_kink(mask)
    return make_node(np.where(mask, x.data, DTYPE(0)), (x,), lambda g: (g * mask,))


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    stride = kernel if stride is None else stride
    ho, wo = _spatial_geometry(x, kernel, kernel, stride, padding, "maxpool2d")
    n, c, h, w = x.shape
    xp = _pad(x.data, padding, value=-np.inf)
    cols = _windows(xp, kernel, kernel, stride, ho, wo).reshape(n, c, ho, wo, kernel * kernel)
    arg = np.argmax(cols, axis=-1)
    log_kink(arg)
    out = np.take_along_axis(cols, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        sel = (arg[..., None] == np.arange(kernel * kernel)).astype(DTYPE) * g[..., None]
        return (_scatter_windows(sel.reshape(n, c, ho, wo, kernel, kernel), xp.shape, stride, padding, h, w),)

    return make_node(np.ascontiguousarray(out), (x,), backward)


def avgpool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Average pooling; zero padding counts toward the divisor."""
    stride = kernel if stride is None else stride
    ho, wo = _spatial_geometry(x, kernel, kernel, stride, padding, "avgpool2d")
    n, c, h, w = x.shape
    xp = _pad(x.data, padding)
    cols = _windows(xp, kernel, kernel, stride, ho, wo)
    scale = DTYPE(1.0 / (kernel * kernel))
    out = cols.sum(axis=(4, 5), dtype=DTYPE) * scale

    def backward(g):
        spread = np.broadcast_to((g * scale)[..., None, None], (n, c, ho, wo, kernel, kernel))
        return (_scatter_windows(spread, xp.shape, stride, padding, h, w),)

    return make_node(out, (x,), backward)


def global_avgpool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avgpool: input must be 4-d, got shape {x.shape}")
    n, c, h, w = x.shape
    scale = DTYPE(1.0 / (h * w))
    out = x.data.sum(axis=(2, 3), dtype=DTYPE) * scale

    def backward(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy(),)

    return make_node(out, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_node(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


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

    In training mode the batch mean and biased variance normalize the input,
    and the running buffers are updated in place with
    ``r <- (1 - momentum) r + momentum * stat`` using the unbiased variance.
    Eval mode normalizes by the running buffers.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: input must be 4-d [N,C,H,W], got shape {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")
    m = n * h * w
    eps = DTYPE(eps)
    if training:
        if m < 2:
            raise ShapeError(f"batchnorm2d: training mode needs N*H*W >= 2, got {m}")
        mean = x.data.mean(axis=(0, 2, 3), dtype=DTYPE)
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = (centered * centered).mean(axis=(0, 2, 3), dtype=DTYPE)
        mom = DTYPE(momentum)
        running_mean *= DTYPE(1) - mom
        running_mean += mom * mean
        running_var *= DTYPE(1) - mom
        running_var += mom * var * DTYPE(m / (m - 1))
    else:
        mean = running_mean.astype(DTYPE)
        var = running_var.astype(DTYPE)
        centered = x.data - mean.reshape(1, c, 1, 1)
    inv = (DTYPE(1) / np.sqrt(var + eps)).astype(DTYPE)
    xhat = centered * inv.reshape(1, c, 1, 1)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            gx = (inv.reshape(1, c, 1, 1) / DTYPE(m)) * (DTYPE(m) * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} and labels {labels.shape} disagree")
    n, num_classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), labels]
    loss = DTYPE(np.mean(lse - picked, dtype=DTYPE))

    def backward(g):
        p = softmax(logits.data)
        p[np.arange(n), labels] -= 1
        return (p * (g / DTYPE(n)),)

    return make_node(np.asarray(loss, dtype=DTYPE), (logits,), backward)
