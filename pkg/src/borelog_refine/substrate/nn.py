"""Network layers on top of the autodiff tape.

Convolutions use im2col + BLAS matmul; the transposed convolution is the
exact adjoint of the strided convolution (col2im scatter), so stride-2
encoder/decoder pairs round-trip shapes without output-size guesswork.
Inputs follow the (N, C, H, W) layout; 1-D convolutions reuse the 2-D path
with a singleton width.
"""

from __future__ import annotations

import numpy as np

from .tensor import (DTYPE, SubstrateError, Tensor, _accum, _lift, _node,
                     check_finite)


def _out_len(n: int, k: int, pad: int, stride: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad_h: int,
            pad_w: int) -> np.ndarray:
    """(N,C,H,W) -> (N*Ho*Wo, C*kh*kw) patch matrix."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    ho = _out_len(h, kh, pad_h, stride)
    wo = _out_len(w, kw, pad_w, stride)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols)


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int,
            pad_h: int, pad_w: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch matrix back onto the image grid."""
    n, c, h, w = x_shape
    ho = _out_len(h, kh, pad_h, stride)
    wo = _out_len(w, kw, pad_w, stride)
    blocks = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * pad_h, w + 2 * pad_w), dtype=DTYPE)
    for i in range(kh):
        hi = i + stride * ho
        for j in range(kw):
            wj = j + stride * wo
            out[:, :, i:hi:stride, j:wj:stride] += blocks[:, :, i, j]
    if pad_h or pad_w:
        out = out[:, :, pad_h:pad_h + h, pad_w:pad_w + w]
    return np.ascontiguousarray(out)


def _tap_conv_nhwc(xp: np.ndarray, weight: np.ndarray,
                   out_hw: tuple) -> np.ndarray:
    """'Same' stride-1 convolution of a padded NHWC grid via one GEMM per tap.

    xp: (N, Hp, Wp, C) zero-padded input; weight: (O, C, kh, kw).
    Avoids the im2col patch matrix entirely: each kernel tap is a full-grid
    (N*Hp*Wp, C) @ (C, O) product whose output is accumulated at its shift.
    The GEMM destination is allocated once and reused across taps.
    """
    n, hp, wp, c = xp.shape
    co, _, kh, kw = weight.shape
    h, w = out_hw
    flat = xp.reshape(-1, c)
    y = np.zeros((n, h, w, co), dtype=DTYPE)
    scratch = np.empty((flat.shape[0], co), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            np.matmul(flat, np.ascontiguousarray(weight[:, :, i, j].T),
                      out=scratch)
            y += scratch.reshape(n, hp, wp, co)[:, i:i + h, j:j + w, :]
    return y


def _conv2d_s1(x: Tensor, weight: Tensor, bias, name: str) -> Tensor:
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data.transpose(0, 2, 3, 1),
                ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    y = _tap_conv_nhwc(xp, weight.data, (h, w))
    if bias is not None:
        y += bias.data
    out_data = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    check_finite(out_data, name)

    def bwd(g):
        g_nhwc = g.transpose(0, 2, 3, 1)
        if x.requires_grad:
            # input grad = 'same' conv of g with the spatially flipped,
            # channel-swapped kernel
            gp = np.pad(g_nhwc, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            dx = _tap_conv_nhwc(gp, wflip, (h, w))
            _accum(x, np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), own=True)
        if weight.requires_grad:
            dw = np.empty_like(weight.data)
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, i:i + h, j:j + w, :]
                    dw[:, :, i, j] = np.tensordot(
                        g_nhwc, xs, axes=([0, 1, 2], [0, 1, 2]))
            _accum(weight, dw, own=True)
        if bias is not None and bias.requires_grad:
            _accum(bias, g_nhwc.sum(axis=(0, 1, 2)), own=True)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out_data, parents, bwd)


def conv2d(x, weight, bias=None, stride: int = 1, name: str = "conv2d") -> Tensor:
    """2-D convolution with 'same' zero padding (pad = kernel // 2)."""
    x, weight = _lift(x), _lift(weight)
    bias = _lift(bias) if bias is not None else None
    if x.ndim != 4 or weight.ndim != 4:
        raise SubstrateError(f"{name}: expected 4-D input and weight")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise SubstrateError(
            f"{name}: input has {c} channels but weight expects {ci}")
    if stride == 1 and kh % 2 == 1 and kw % 2 == 1:
        return _conv2d_s1(x, weight, bias, name)
    ph, pw = kh // 2, kw // 2
    ho, wo = _out_len(h, kh, ph, stride), _out_len(w, kw, pw, stride)

    cols = _im2col(x.data, kh, kw, stride, ph, pw)
    y = cols @ weight.data.reshape(co, -1).T
    if bias is not None:
        y += bias.data
    out_data = np.ascontiguousarray(
        y.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))
    check_finite(out_data, name)

    def bwd(g):
        gmat = np.ascontiguousarray(
            g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
        if weight.requires_grad:
            # recompute cols: cheaper than holding them across the pass
            cols_b = _im2col(x.data, kh, kw, stride, ph, pw)
            _accum(weight, (gmat.T @ cols_b).reshape(weight.data.shape),
                   own=True)
        if bias is not None and bias.requires_grad:
            _accum(bias, gmat.sum(axis=0), own=True)
        if x.requires_grad:
            dcols = gmat @ weight.data.reshape(co, -1)
            _accum(x, _col2im(dcols, x.data.shape, kh, kw, stride, ph, pw),
                   own=True)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out_data, parents, bwd)


def conv_transpose2d(x, weight, bias=None, stride: int = 2,
                     name: str = "conv_transpose2d") -> Tensor:
    """Transposed 2-D convolution; output extents are stride * input extents.

    Exact adjoint of conv2d(..., stride) from the (stride*H, stride*W) grid,
    with weight laid out (C_in, C_out, kh, kw).
    """
    x, weight = _lift(x), _lift(weight)
    bias = _lift(bias) if bias is not None else None
    n, c, h, w = x.shape
    ci, co, kh, kw = weight.shape
    if ci != c:
        raise SubstrateError(
            f"{name}: input has {c} channels but weight expects {ci}")
    ph, pw = kh // 2, kw // 2
    ho, wo = stride * h, stride * w
    if _out_len(ho, kh, ph, stride) != h or _out_len(wo, kw, pw, stride) != w:
        raise SubstrateError(f"{name}: incompatible kernel/stride geometry")

    xmat = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
    dcols = xmat @ weight.data.reshape(ci, -1)
    out_data = _col2im(dcols, (n, co, ho, wo), kh, kw, stride, ph, pw)
    if bias is not None:
        out_data += bias.data[None, :, None, None]
    check_finite(out_data, name)

    def bwd(g):
        gcols = _im2col(g, kh, kw, stride, ph, pw)  # (N*h*w, co*kh*kw)
        if x.requires_grad:
            dx = gcols @ weight.data.reshape(ci, -1).T
            _accum(x, np.ascontiguousarray(
                dx.reshape(n, h, w, c).transpose(0, 3, 1, 2)), own=True)
        if weight.requires_grad:
            _accum(weight, np.ascontiguousarray(
                (xmat.T @ gcols).reshape(weight.data.shape)), own=True)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)), own=True)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out_data, parents, bwd)


def conv1d(x, weight, bias=None, stride: int = 1, name: str = "conv1d") -> Tensor:
    """1-D convolution over (N, C, L) via the 2-D path."""
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 3 or weight.ndim != 3:
        raise SubstrateError(f"{name}: expected 3-D input and weight")
    from .tensor import reshape
    n, c, length = x.shape
    co, ci, k = weight.shape
    x4 = reshape(x, (n, c, length, 1))
    w4 = reshape(weight, (co, ci, k, 1))
    y = conv2d(x4, w4, bias=bias, stride=stride, name=name)
    return reshape(y, y.shape[:3])


def dense(x, weight, bias=None, name: str = "dense") -> Tensor:
    """Affine map rows @ weight + bias with weight shaped (in, out)."""
    from .tensor import add, matmul
    x, weight = _lift(x), _lift(weight)
    if x.shape[-1] != weight.shape[0]:
        raise SubstrateError(
            f"{name}: input features {x.shape[-1]} vs weight rows {weight.shape[0]}")
    y = matmul(x, weight)
    if bias is not None:
        y = add(y, bias)
    check_finite(y.data, name)
    return y


def layer_norm(x, gamma, beta, eps: float = 1e-6, name: str = "layer_norm") -> Tensor:
    """Normalize over the last axis per token, then apply the learned affine."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gamma.data * xhat + beta.data
    check_finite(out_data, name)

    def bwd(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0), own=True)
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, xhat.shape[-1]).sum(axis=0), own=True)
        if x.requires_grad:
            dz = g * gamma.data
            m1 = dz.mean(axis=-1, keepdims=True)
            m2 = (dz * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dz - m1 - xhat * m2), own=True)

    return _node(out_data, (x, gamma, beta), bwd)


def group_norm(x, gamma, beta, groups: int = 8, eps: float = 1e-6,
               name: str = "group_norm") -> Tensor:
    """GroupNorm over (C/groups, H, W) per sample with per-channel affine."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    n, c, h, w = x.shape
    if c % groups != 0:
        raise SubstrateError(f"{name}: {c} channels not divisible by {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    check_finite(out_data, name)

    def bwd(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)), own=True)
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)), own=True)
        if x.requires_grad:
            dz = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            m1 = dz.mean(axis=2, keepdims=True)
            m2 = (dz * xh).mean(axis=2, keepdims=True)
            _accum(x, np.ascontiguousarray(
                (inv * (dz - m1 - xh * m2)).reshape(n, c, h, w)), own=True)

    return _node(out_data, (x, gamma, beta), bwd)


def softmax_cross_entropy(logits, labels: np.ndarray,
                          pixel_weights: np.ndarray | None = None,
                          name: str = "cross_entropy") -> Tensor:
    """Mean (optionally pixel-weighted) cross-entropy.

    logits: (K, H, W) class scores; labels: (H, W) integer classes.
    Weighted form: mean over pixels of w(h,w) * -log p_label(h,w).
    """
    logits = _lift(logits)
    k = logits.shape[0]
    flat = logits.data.reshape(k, -1)
    lab = labels.reshape(-1)
    if lab.size != flat.shape[1]:
        raise SubstrateError(f"{name}: label grid does not match logits")
    m = flat.max(axis=0, keepdims=True)
    e = np.exp(flat - m)
    s = e.sum(axis=0, keepdims=True)
    p = e / s
    logp = (flat - m) - np.log(s)
    nll = -logp[lab, np.arange(lab.size)]
    if pixel_weights is not None:
        wflat = pixel_weights.reshape(-1)
        loss = (nll * wflat).mean()
    else:
        wflat = None
        loss = nll.mean()
    out_data = np.asarray(loss, dtype=DTYPE)
    check_finite(out_data, name)

    def bwd(g):
        onehot = np.zeros_like(p)
        onehot[lab, np.arange(lab.size)] = 1.0
        d = (p - onehot) / lab.size
        if wflat is not None:
            d = d * wflat
        _accum(logits, np.ascontiguousarray(
            (g * d).reshape(logits.data.shape)), own=True)

    return _node(out_data, (logits,), bwd)
