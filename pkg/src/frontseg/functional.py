"""Differentiable primitives for the attention U-Net.

All functions take and return :class:`~frontseg.tensor.Tensor` objects in
batch x channels x height x width layout.  Backward closures return one
gradient per parent, ``None`` where a parent does not need one.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, Tensor

LEAKY_SLOPE = 0.1
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{what} expects a 4-D tensor (B, C, H, W), got shape {x.shape}")


# --------------------------------------------------------------------------
# elementwise


def _check_pair(a: Tensor, b: Tensor, op: str) -> bool:
    """True when ``b`` is a single-channel factor broadcast over ``a``'s channels."""
    if a.shape == b.shape:
        return False
    if a.ndim == 4 and b.ndim == 4 and b.shape[1] == 1 and (a.shape[0], a.shape[2], a.shape[3]) == (
        b.shape[0],
        b.shape[2],
        b.shape[3],
    ):
        return True
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    broadcast = _check_pair(a, b, "add")

    def backward(g):
        gb = g.sum(axis=1, keepdims=True) if broadcast else g
        return g, gb

    return Tensor.from_op(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a [B,1,H,W] map applied to every channel of ``a``."""
    broadcast = _check_pair(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g * bd
        gb = g * ad
        if broadcast:
            gb = gb.sum(axis=1, keepdims=True)
        return ga, gb

    return Tensor.from_op(ad * bd, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return Tensor.from_op(x.data * c, (x,), lambda g: (g * c,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return Tensor.from_op(np.asarray(x.data.sum(dtype=np.float64), dtype=DTYPE), (x,),
                          lambda g: (np.broadcast_to(g, shape).astype(DTYPE),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return Tensor.from_op(
        np.asarray(x.data.mean(dtype=np.float64), dtype=DTYPE),
        (x,),
        lambda g: (np.full(shape, g / DTYPE(n), dtype=DTYPE),),
    )


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# --------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, DTYPE(0)), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    # derivative at exactly 0 is the slope
    s = DTYPE(slope)
    factor = np.where(x.data > 0, DTYPE(1), s).astype(DTYPE)
    return Tensor.from_op(x.data * factor, (x,), lambda g: (g * factor,))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return Tensor.from_op(s, (x,), lambda g: (g * s * (DTYPE(1) - s),))


def activation(x: Tensor, kind: str, slope: float = LEAKY_SLOPE) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B*Ho*Wo, C*kh*kw) patch matrix."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back into a (B, C, Hp, Wp) grid."""
    b, c, hp, wp = shape
    patches = cols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(shape, dtype=DTYPE)
    for p in range(kh):
        for q in range(kw):
            out[:, :, p : p + stride * ho : stride, q : q + stride * wo : stride] += patches[:, :, p, q]
    return out


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``weight`` is (Cout, Cin, kh, kw); output spatial size is
    ``(H + 2*padding - kh) // stride + 1``.
    """
    _check_4d(x, "conv2d")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels but weight expects {wcin} (weight shape {weight.shape})")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and padding <= min(kh, kw) - 1:
                # full correlation of g with the flipped, channel-swapped kernel
                ph, pw = kh - 1 - padding, kw - 1 - padding
                gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
                wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
                gx = (_im2col(gp, kh, kw, 1) @ wflip.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2)
            else:
                gxp = _col2im(gmat @ wmat, xp.shape, kh, kw, stride, ho, wo)
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(np.ascontiguousarray(out), parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Transposed convolution, the input-gradient of :func:`conv2d` run forwards.

    ``weight`` is (Cin, Cout, kh, kw).  Output spatial size is
    ``(H - 1) * stride + kh``, i.e. doubled for a 2x2 kernel at stride 2.
    """
    _check_4d(x, "conv_transpose2d")
    b, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(
            f"conv_transpose2d: input has {cin} channels but weight expects {wcin} (weight shape {weight.shape})"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv_transpose2d: bias shape {bias.shape} != ({cout},)")
    ho, wo = (h - 1) * stride + kh, (w - 1) * stride + kw
    # same matrices as conv2d with a (cout -> cin) kernel
    wmat = weight.data.reshape(cin, cout * kh * kw)
    xmat = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    out = _col2im(xmat @ wmat, (b, cout, ho, wo), kh, kw, stride, h, w)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        cols = _im2col(g, kh, kw, stride)
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray((cols @ wmat.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2))
        gw = (xmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out, parents, backward)


# --------------------------------------------------------------------------
# pooling / normalization / resampling


def max_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum in raster order."""
    _check_4d(x, "max_pool2d")
    b, c, h, w = x.shape
    if h % window or w % window:
        raise ValueError(f"max_pool2d: spatial extents {h}x{w} not divisible by window {window}")
    ho, wo = h // window, w // window
    blocks = x.data.reshape(b, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, -1)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=DTYPE)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(b, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (np.ascontiguousarray(gx),)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), backward)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and the running buffers
    are updated in place (``running_var`` with the unbiased estimate).
    """
    _check_4d(x, "batch_norm2d")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError(f"batch_norm2d: channel count {c} does not match parameter shapes {gamma.shape}")
    xd = x.data
    if training:
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE)
        centered = xd - mu[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE)
        unbiased = var * DTYPE(n / max(n - 1, 1))
        running_mean *= DTYPE(1 - momentum)
        running_mean += DTYPE(momentum) * mu
        running_var *= DTYPE(1 - momentum)
        running_var += DTYPE(momentum) * unbiased
    else:
        mu, var = running_mean.astype(DTYPE), running_var.astype(DTYPE)
        centered = xd - mu[None, :, None, None]
    inv_std = (DTYPE(1) / np.sqrt(var + DTYPE(eps))).astype(DTYPE)
    xhat = centered * inv_std[None, :, None, None]
    g4, b4 = gamma.data[None, :, None, None], beta.data[None, :, None, None]
    out = xhat * g4 + b4

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * g4
            if training:
                m1 = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - m1 - xhat * m2) * inv_std[None, :, None, None]
            else:
                gx = gxhat * inv_std[None, :, None, None]
            gx = gx.astype(DTYPE)
        return gx, gg, gbeta

    return Tensor.from_op(out.astype(DTYPE), (x, gamma, beta), backward)


def bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel centres (align_corners=False)."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"bilinear resampling needs positive sizes, got {n_in} -> {n_out}")
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check_4d(x, "upsample_bilinear")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"upsample_bilinear: output size must be positive, got {out_h}x{out_w}")
    ah = bilinear_weights(x.shape[2], out_h).astype(DTYPE)
    aw = bilinear_weights(x.shape[3], out_w).astype(DTYPE)
    out = ah @ x.data @ aw.T
    return Tensor.from_op(np.ascontiguousarray(out), (x,), lambda g: (np.ascontiguousarray(ah.T @ g @ aw),))
