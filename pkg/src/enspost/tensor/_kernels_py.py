"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def im2col(xp, kh, kw, stride, dilation, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, ho, wo, c, kh, kw), dtype=xp.dtype)
    span_y = stride * (ho - 1) + 1
    span_x = stride * (wo - 1) + 1
    for i in range(kh):
        y0 = i * dilation
        for j in range(kw):
            x0 = j * dilation
            patch = xp[:, :, y0:y0 + span_y:stride, x0:x0 + span_x:stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, c * kh * kw)


def col2im(cols, n, c, hp, wp, kh, kw, stride, dilation, ho, wo):
    dx = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    span_y = stride * (ho - 1) + 1
    span_x = stride * (wo - 1) + 1
    for i in range(kh):
        y0 = i * dilation
        for j in range(kw):
            x0 = j * dilation
            dx[:, :, y0:y0 + span_y:stride, x0:x0 + span_x:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx


def maxpool2x2(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, 4)
    idx = np.argmax(win, axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(g, idx):
    n, c, ho, wo = g.shape
    win = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), g[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(win.reshape(n, c, 2 * ho, 2 * wo))


def set_flush_denormal(on):
    # numpy exposes no control over the floating-point status register
    return None
