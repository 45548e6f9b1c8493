"""Compare the compiled and numpy kernel backends.

Usage::

    python benchmarks/bench_kernels.py [--repeat 20]

Times im2col/col2im/maxpool on shapes the default networks see, checks the
two backends agree bit for bit, and times one spread-net training step
under each backend in a subprocess (the backend is fixed at import).
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from enspost.tensor import _kernels_py

try:
    from enspost.tensor import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

CASES = [
    # (name, N, C, H, W, k, dilation)
    ("3x3 d1 16ch 32x64", 2, 16, 32, 64, 3, 1),
    ("3x3 d4 16ch 32x64", 2, 16, 32, 64, 3, 4),
    ("3x3 d1 64ch 8x16", 2, 64, 8, 16, 3, 1),
]

STEP_SNIPPET = """
import time, numpy as np
from enspost.models import ModelConfig, SpreadNet
from enspost.tensor import Tensor, backward, tmean, BACKEND
net = SpreadNet(ModelConfig())
x = Tensor(np.random.default_rng(0).normal(size=(2, 21, 32, 64)).astype(np.float32))
def step():
    net.zero_grad()
    out = net(x)
    backward(tmean(out * out))
step()
t = time.perf_counter()
for _ in range({n}):
    step()
print(BACKEND, (time.perf_counter() - t) / {n})
"""


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_table(repeat: int) -> list[tuple]:
    rng = np.random.default_rng(0)
    rows = []
    for name, n, c, h, w, k, d in CASES:
        pad = d * (k - 1) // 2
        xp = rng.normal(size=(n, c, h + 2 * pad, w + 2 * pad)).astype(np.float32)
        args = (k, k, 1, d, h, w)
        ref = _kernels_py.im2col(xp, *args)
        cols = rng.normal(size=ref.shape).astype(np.float32)
        cargs = (n, c, h + 2 * pad, w + 2 * pad, k, k, 1, d, h, w)
        for label, impl in (("numpy", _kernels_py), ("cython", _compiled)):
            if impl is None:
                continue
            got = impl.im2col(xp, *args)
            assert np.array_equal(got, ref), f"{label} im2col mismatch"
            assert np.array_equal(impl.col2im(cols, *cargs), _kernels_py.col2im(cols, *cargs))
            rows.append((name, "im2col", label, bench(lambda: impl.im2col(xp, *args), repeat)))
            rows.append((name, "col2im", label, bench(lambda: impl.col2im(cols, *cargs), repeat)))
        x = rng.normal(size=(n, c, h, w)).astype(np.float32)
        for label, impl in (("numpy", _kernels_py), ("cython", _compiled)):
            if impl is None:
                continue
            out, idx = impl.maxpool2x2(x)
            ref_out, ref_idx = _kernels_py.maxpool2x2(x)
            assert np.array_equal(out, ref_out) and np.array_equal(idx, ref_idx)
            rows.append((name, "maxpool", label, bench(lambda: impl.maxpool2x2(x), repeat)))
    return rows


def training_step(pure: bool, n: int) -> str:
    env = dict(os.environ, ENSPOST_PURE_PYTHON="1" if pure else "0")
    res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=n)], env=env, capture_output=True,
                         text=True, check=True)
    return res.stdout.strip()


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--steps", type=int, default=5, help="training steps per backend")
    args = p.parse_args(argv)
    if _compiled is None:
        print("compiled extension not built; only the numpy backend is timed")
    rows = kernel_table(args.repeat)
    print(f"{'case':<22}{'kernel':<9}{'backend':<8}{'ms':>9}")
    for name, kernel, label, t in rows:
        print(f"{name:<22}{kernel:<9}{label:<8}{t * 1e3:>9.3f}")
    by = {}
    for name, kernel, label, t in rows:
        by.setdefault((name, kernel), {})[label] = t
    if _compiled is not None:
        print("\nspeed-up (numpy / cython)")
        for (name, kernel), t in by.items():
            print(f"{name:<22}{kernel:<9}{t['numpy'] / t['cython']:>8.2f}x")
    print("\nspread-net training step (s):")
    print("  " + training_step(True, args.steps))
    if _compiled is not None:
        print("  " + training_step(False, args.steps))


if __name__ == "__main__":
    main()
