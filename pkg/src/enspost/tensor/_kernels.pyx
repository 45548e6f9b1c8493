# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled gather/scatter kernels behind conv2d and 2x2 max-pooling.

Every routine mirrors a function in ``_kernels_py`` and must return
bitwise-identical results; loop order is fixed so accumulation in
``col2im`` is deterministic.
"""
import numpy as np

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int kh, int kw, int stride, int dilation,
           int ho, int wo):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t k = c * kh * kw
    out = np.empty((n * ho * wo, k), dtype=np.asarray(xp).dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t b, oy, ox, ch, i, j, row, col, y0, x0
    with nogil:
        for b in range(n):
            for oy in range(ho):
                y0 = oy * stride
                for ox in range(wo):
                    x0 = ox * stride
                    row = (b * ho + oy) * wo + ox
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                cols[row, col] = xp[b, ch, y0 + i * dilation, x0 + j * dilation]
                                col += 1
    return out


def col2im(real[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t hp,
           Py_ssize_t wp, int kh, int kw, int stride, int dilation, int ho, int wo):
    out = np.zeros((n, c, hp, wp), dtype=np.asarray(cols).dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, oy, ox, ch, i, j, row, col, y0, x0
    # same (i, j) outer order as the numpy fallback keeps sums bitwise equal
    with nogil:
        for i in range(kh):
            for j in range(kw):
                for b in range(n):
                    for ch in range(c):
                        col = (ch * kh + i) * kw + j
                        for oy in range(ho):
                            y0 = oy * stride + i * dilation
                            for ox in range(wo):
                                x0 = ox * stride + j * dilation
                                row = (b * ho + oy) * wo + ox
                                dx[b, ch, y0, x0] += cols[row, col]
    return out


def maxpool2x2(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // 2, wo = x.shape[3] // 2
    out_arr = np.empty((n, c, ho, wo), dtype=np.asarray(x).dtype)
    idx_arr = np.empty((n, c, ho, wo), dtype=np.uint8)
    cdef real[:, :, :, ::1] out = out_arr
    cdef unsigned char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, i, j
    cdef real best, v
    cdef unsigned char arg
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        best = x[b, ch, 2 * i, 2 * j]
                        arg = 0
                        v = x[b, ch, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            arg = 1
                        v = x[b, ch, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            arg = 2
                        v = x[b, ch, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            arg = 3
                        out[b, ch, i, j] = best
                        idx[b, ch, i, j] = arg
    return out_arr, idx_arr


def maxpool2x2_backward(real[:, :, :, ::1] g, unsigned char[:, :, :, ::1] idx):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    out = np.zeros((n, c, 2 * ho, 2 * wo), dtype=np.asarray(g).dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, i, j
    cdef unsigned char a
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        a = idx[b, ch, i, j]
                        dx[b, ch, 2 * i + (a >> 1), 2 * j + (a & 1)] = g[b, ch, i, j]
    return out


cdef extern from *:
    """
    #if defined(__SSE__) || defined(_M_X64)
    #include <xmmintrin.h>
    #define ENSPOST_HAVE_MXCSR 1
    static unsigned int enspost_getcsr(void) { return _mm_getcsr(); }
    static void enspost_setcsr(unsigned int v) { _mm_setcsr(v); }
    #else
    #define ENSPOST_HAVE_MXCSR 0
    static unsigned int enspost_getcsr(void) { return 0; }
    static void enspost_setcsr(unsigned int v) { (void)v; }
    #endif
    """
    int ENSPOST_HAVE_MXCSR
    unsigned int enspost_getcsr()
    void enspost_setcsr(unsigned int v)


def set_flush_denormal(bint on):
    """Set flush-to-zero and denormals-are-zero for the calling thread.

    Returns the previous state, or ``None`` when the CPU has no MXCSR.
    """
    if not ENSPOST_HAVE_MXCSR:
        return None
    cdef unsigned int csr = enspost_getcsr()
    previous = (csr & 0x8040) == 0x8040
    enspost_setcsr((csr | 0x8040) if on else (csr & ~0x8040))
    return previous
