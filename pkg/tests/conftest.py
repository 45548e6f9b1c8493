import numpy as np
import pytest

from enspost.tensor import Tensor, backward, precision


def numeric_grad(fn, arrays, h=1e-5):
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = fn(*arrays)
            a[idx] = old - h
            fm = fn(*arrays)
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(build, arrays):
    """Gradient of ``sum(build(*tensors) * probe)`` via backward, plus the scalar fn."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    backward(out)
    return [t.grad for t in tensors]


def max_rel_error(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def check_gradients(build, arrays, h=1e-5):
    """Return the max relative error between analytic and numeric grads.

    ``build`` maps tensors to a scalar tensor. Runs in 64-bit.
    """
    with precision(np.float64):
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

        def scalar(*arrs):
            return float(build(*[Tensor(a) for a in arrs]).data)

        ana = analytic_grad(build, arrays)
        num = numeric_grad(scalar, arrays, h)
        return max(max_rel_error(a, n) for a, n in zip(ana, num))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Store and print one PASS/FAIL line for an acceptance criterion."""
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
