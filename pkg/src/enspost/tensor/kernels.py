"""Kernel backend selection.

The compiled extension is used when it imports; otherwise, or when
``ENSPOST_PURE_PYTHON=1`` is set, the numpy fallback is used. Both
backends produce identical results.
"""
import contextlib
import os

from . import _kernels_py

BACKEND = "numpy"
_impl = _kernels_py

if os.environ.get("ENSPOST_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def _contig(a):
    return a if a.flags.c_contiguous else a.copy()


def im2col(xp, kh, kw, stride, dilation, ho, wo):
    return _impl.im2col(_contig(xp), kh, kw, stride, dilation, ho, wo)


def col2im(cols, n, c, hp, wp, kh, kw, stride, dilation, ho, wo):
    return _impl.col2im(_contig(cols), n, c, hp, wp, kh, kw, stride, dilation, ho, wo)


def maxpool2x2(x):
    return _impl.maxpool2x2(_contig(x))


def maxpool2x2_backward(g, idx):
    return _impl.maxpool2x2_backward(_contig(g), _contig(idx))


@contextlib.contextmanager
def flush_denormals():
    """Treat float32/64 subnormals as zero inside the block (compiled backend only).

    Weights that decay towards zero under l2 make BLAS products subnormal,
    which slows GEMMs several-fold on x86; training runs inside this context.
    """
    previous = _impl.set_flush_denormal(True)
    try:
        yield previous is not None
    finally:
        if previous is not None:
            _impl.set_flush_denormal(previous)
