"""Layer operations on NCHW tensors: convolution, locally connected,
bilinear upsampling, batch normalisation and max-pooling."""
from __future__ import annotations

import numpy as np

from . import kernels
from .core import Tensor, as_tensor, make_op


def _pads(padding, kh, kw, dilation):
    if padding == "same":
        th, tw = dilation * (kh - 1), dilation * (kw - 1)
        return th // 2, th - th // 2, tw // 2, tw - tw // 2
    if padding == "valid":
        return 0, 0, 0, 0
    if isinstance(padding, int):
        return padding, padding, padding, padding
    ph, pw = padding
    return ph, ph, pw, pw


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int, wrap_lon: bool = False) -> Tensor:
    """Zero padding in latitude; zero or periodic padding in longitude."""
    if not (top or bottom or left or right):
        return x
    n, c, h, w = x.shape
    if wrap_lon and (left > w or right > w):
        raise ValueError(f"wrap padding ({left}, {right}) exceeds width {w}")
    data = x.data
    if wrap_lon:
        data = np.concatenate([data[..., w - left:], data, data[..., :right]], axis=-1)
        data = np.pad(data, ((0, 0), (0, 0), (top, bottom), (0, 0)))
    else:
        data = np.pad(data, ((0, 0), (0, 0), (top, bottom), (left, right)))

    def bw(g):
        g = g[:, :, top:top + h]
        inner = g[..., left:left + w].copy()
        if wrap_lon:
            if left:
                inner[..., w - left:] += g[..., :left]
            if right:
                inner[..., :right] += g[..., left + w:]
        return (inner,)
    return make_op(data, (x,), bw, "pad2d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding="same", wrap_lon: bool = False) -> Tensor:
    """2-D cross-correlation.

    Parameters
    ----------
    x : Tensor
        Input of shape (N, Cin, H, W).
    weight : Tensor
        Filters of shape (Cout, Cin, Kh, Kw).
    bias : Tensor, optional
        Shape (Cout,).
    padding : {"same", "valid"} or int or (int, int)
        "same" keeps H, W for stride 1 (extra pad on the high side).
    wrap_lon : bool
        Pad the width axis periodically instead of with zeros.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if stride < 1 or dilation < 1:
        raise ValueError(f"stride and dilation must be >= 1 (got stride={stride}, dilation={dilation})")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ValueError(f"conv2d channel mismatch: input has {cin} channels, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({cout},)")
    top, bottom, left, right = _pads(padding, kh, kw, dilation)
    xp = pad2d(x, top, bottom, left, right, wrap_lon)
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - dilation * (kh - 1) - 1) // stride + 1
    wo = (wp - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty: padded input {hp}x{wp}, kernel {kh}x{kw}, "
                         f"dilation {dilation}")
    pointwise = kh == 1 and kw == 1 and stride == 1
    if pointwise:
        cols = xp.data.transpose(0, 2, 3, 1).reshape(n * ho * wo, cin)
    else:
        cols = kernels.im2col(xp.data, kh, kw, stride, dilation, ho, wo)
    w2 = weight.data.reshape(cout, -1)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    parents = (xp, weight) if bias is None else (xp, weight, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = None
        if xp.requires_grad:
            dcols = g2 @ w2
            if pointwise:
                gx = np.ascontiguousarray(dcols.reshape(n, ho, wo, cin).transpose(0, 3, 1, 2))
            else:
                gx = kernels.col2im(dcols, n, cin, hp, wp, kh, kw, stride, dilation, ho, wo)
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    return make_op(out, parents, bw, "conv2d")


def locally_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 locally connected layer: an independent Cin->Cout map per gridpoint.

    ``out[n, o, h, w] = bias[h, w, o] + sum_c weight[h, w, o, c] * x[n, c, h, w]``
    """
    x, weight = as_tensor(x), as_tensor(weight)
    n, cin, h, w = x.shape
    if weight.ndim != 4 or weight.shape[:2] != (h, w):
        raise ValueError(f"locally_connected weight spatial dims {weight.shape[:2]} != input dims {(h, w)}")
    if weight.shape[3] != cin:
        raise ValueError(f"locally_connected channel mismatch: input has {cin}, weight expects {weight.shape[3]}")
    cout = weight.shape[2]
    if bias is not None and bias.shape != (h, w, cout):
        raise ValueError(f"locally_connected bias shape {bias.shape} != {(h, w, cout)}")
    out = np.einsum("hwoc,nchw->nohw", weight.data, x.data)
    if bias is not None:
        out = out + bias.data.transpose(2, 0, 1)[None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = np.einsum("hwoc,nohw->nchw", weight.data, g) if x.requires_grad else None
        gw = np.einsum("nohw,nchw->hwoc", g, x.data) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0).transpose(1, 2, 0)
    return make_op(np.ascontiguousarray(out), parents, bw, "locally_connected")


def _upsample_matrix(size: int, dtype) -> np.ndarray:
    # align_corners=False: output o samples input coordinate (o + 0.5) / 2 - 0.5
    m = np.zeros((2 * size, size), dtype=dtype)
    for o in range(2 * size):
        s = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, size - 1)
        lam = s - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def bilinear_upsample_2x(x: Tensor) -> Tensor:
    """Double H and W with bilinear interpolation (half-pixel centres)."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError(f"bilinear_upsample_2x expects a non-empty NCHW tensor, got {x.shape}")
    uh = _upsample_matrix(x.shape[2], x.dtype)
    uw = _upsample_matrix(x.shape[3], x.dtype)
    out = np.ascontiguousarray(uh @ (x.data @ uw.T))
    return make_op(out, (x,), lambda g: (uh.T @ (g @ uw),), "upsample2x")


def max_pool2x2(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"max_pool2x2 needs even spatial dims, got {x.shape[2:]}")
    out, idx = kernels.maxpool2x2(x.data)
    return make_op(out, (x,), lambda g: (kernels.maxpool2x2_backward(g, idx),), "maxpool2x2")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray | None = None,
               running_var: np.ndarray | None = None, training: bool = True,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over (N, H, W) followed by an affine map.

    In training mode the running statistics (if given) are updated in place
    with an exponential moving average; in eval mode they are used instead
    of batch statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("batch_norm eps must be > 0")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm channel mismatch: input has {c} channels, "
                         f"gamma {gamma.shape}, beta {beta.shape}")
    shape = (1, c, 1, 1)
    axes = (0, 2, 3)
    if not training:
        if running_mean is None or running_var is None:
            raise ValueError("eval-mode batch_norm needs running statistics")
        inv = 1.0 / np.sqrt(running_var.reshape(shape) + eps)
        xhat = (x.data - running_mean.reshape(shape)) * inv
        out = (gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)).astype(x.dtype)

        def bw_eval(g):
            return (g * gamma.data.reshape(shape) * inv,
                    (g * xhat).sum(axis=axes),
                    g.sum(axis=axes))
        return make_op(out, (x, gamma, beta), bw_eval, "batch_norm")

    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    mean = x.data.mean(axis=axes)
    xc = x.data - mean.reshape(shape)
    flat = x.data.max(axis=axes) == x.data.min(axis=axes)
    if flat.any():
        # a rounded mean would leave O(ulp) residue that eps then amplifies
        mean[flat] = x.data[0, flat, 0, 0]
        xc[:, flat] = 0
    var = (xc * xc).mean(axis=axes)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    if running_mean is not None and running_var is not None:
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            gx = (inv.reshape(shape) / m) * (
                m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, dgamma, dbeta
    return make_op(out, (x, gamma, beta), bw, "batch_norm")


def l1_adjacent_penalty(weight: Tensor) -> Tensor:
    """Sum of |w[p] - w[q]| over vertically and horizontally adjacent
    gridpoints p, q of an (H, W, ...) locally connected weight.

    Longitude is not wrapped. The subgradient at ties is 0.
    """
    weight = as_tensor(weight)
    w = weight.data
    dv = w[1:] - w[:-1]
    dh = w[:, 1:] - w[:, :-1]
    total = np.abs(dv).sum() + np.abs(dh).sum()

    def bw(g):
        out = np.zeros_like(w)
        sv = np.sign(dv)
        sh = np.sign(dh)
        out[1:] += sv
        out[:-1] -= sv
        out[:, 1:] += sh
        out[:, :-1] -= sh
        return (g * out,)
    return make_op(np.asarray(total, dtype=w.dtype), (weight,), bw, "l1_adjacent")
