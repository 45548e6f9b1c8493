import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enspost.tensor import (Parameter, Tensor, backward, batch_norm, bilinear_upsample_2x, concat,
                            conv2d, erf, exp, l1_adjacent_penalty, locally_connected, max_pool2x2,
                            pad2d, precision, relu, sigmoid, softplus, sqrt, tabs, truncated_normal)
from enspost.tensor import _kernels_py, kernels
from enspost.tensor.checkpoint import load_checkpoint, save_checkpoint

from conftest import check_gradients


def conv_oracle(x, w, b, dilation, pad):
    """Direct quadruple-loop cross-correlation with zero padding."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = h + 2 * pad - dilation * (kh - 1)
    wo = wd + 2 * pad - dilation * (kw - 1)
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                acc += w[o, c, i, j] * xp[bi, c, y + i * dilation, xx + j * dilation]
                    out[bi, o, y, xx] = acc
    return out


class TestConv2d:
    def test_box_sum(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
        assert out.data[0, 0, 1, 1] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0
        assert out.data[0, 0, 2, 2] == 4.0

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 1, 5, 7)).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_dilated_matches_loop_oracle(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        with precision(np.float64):
            out = conv2d(Tensor(x), Tensor(w), Tensor(b), dilation=2, padding=2)
        np.testing.assert_allclose(out.data, conv_oracle(x, w, b, 2, 2), atol=1e-5)

    def test_strided_output_dims(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 7, 9)))
        out = conv2d(x, Tensor(np.ones((1, 1, 3, 3))), stride=2, padding=0)
        assert out.shape == (1, 1, 3, 4)

    def test_errors(self, rng):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        with pytest.raises(ValueError, match="channel"):
            conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))
        with pytest.raises(ValueError, match="dilation"):
            conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), dilation=0)
        with pytest.raises(ValueError, match="stride"):
            conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), stride=0)

    def test_linearity(self, rng):
        x, y = rng.standard_normal((2, 1, 3, 6, 6)).astype(np.float32)
        w = Tensor(rng.standard_normal((2, 3, 3, 3)).astype(np.float32))
        a, b = 0.7, -1.3
        lhs = conv2d(Tensor(a * x + b * y), w).data
        rhs = a * conv2d(Tensor(x), w).data + b * conv2d(Tensor(y), w).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_wrap_padding_is_periodic(self, rng):
        x = rng.standard_normal((1, 2, 6, 8))
        w = Tensor(rng.standard_normal((1, 2, 3, 3)))
        with precision(np.float64):
            out = conv2d(Tensor(x), w, wrap_lon=True).data
            rolled = conv2d(Tensor(np.roll(x, 3, axis=-1)), w, wrap_lon=True).data
        np.testing.assert_allclose(np.roll(out, 3, axis=-1), rolled, atol=1e-12)


class TestLocallyConnected:
    def test_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
        w = np.broadcast_to(np.eye(3), (4, 5, 3, 3)).copy()
        out = locally_connected(Tensor(x), Tensor(w), Tensor(np.zeros((4, 5, 3))))
        np.testing.assert_array_equal(out.data, x)

    def test_tied_filters_equal_pointwise_conv(self, rng):
        x = rng.standard_normal((2, 1, 4, 4)).astype(np.float32)
        v = 0.37
        lcn = locally_connected(Tensor(x), Tensor(np.full((4, 4, 1, 1), v)))
        conv = conv2d(Tensor(x), Tensor(np.full((1, 1, 1, 1), v)))
        np.testing.assert_array_equal(lcn.data, conv.data)

    def test_matches_per_pixel_matmul(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((4, 4, 3, 2))
        b = rng.standard_normal((4, 4, 3))
        with precision(np.float64):
            out = locally_connected(Tensor(x), Tensor(w), Tensor(b)).data
        for h in range(4):
            for j in range(4):
                expected = w[h, j] @ x[0, :, h, j] + b[h, j]
                np.testing.assert_allclose(out[0, :, h, j], expected, atol=1e-6)

    def test_spatial_mismatch(self):
        with pytest.raises(ValueError, match="spatial"):
            locally_connected(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((4, 5, 1, 1))))


class TestUpsample:
    def test_constant(self):
        out = bilinear_upsample_2x(Tensor(np.full((1, 2, 3, 5), 2.5)))
        assert out.shape == (1, 2, 6, 10)
        np.testing.assert_allclose(out.data, 2.5, rtol=0, atol=1e-6)

    def test_hand_formula(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]])

        def sample(o, size):
            s = max((o + 0.5) / 2 - 0.5, 0.0)
            i0 = int(np.floor(s))
            return i0, min(i0 + 1, size - 1), s - i0

        expected = np.zeros((4, 4))
        for r in range(4):
            r0, r1, fr = sample(r, 2)
            for c in range(4):
                c0, c1, fc = sample(c, 2)
                top = (1 - fc) * x[r0, c0] + fc * x[r0, c1]
                bot = (1 - fc) * x[r1, c0] + fc * x[r1, c1]
                expected[r, c] = (1 - fr) * top + fr * bot
        with precision(np.float64):
            out = bilinear_upsample_2x(Tensor(x[None, None])).data[0, 0]
        np.testing.assert_allclose(out, expected, atol=1e-12)
        # spot values from the half-pixel rule
        assert out[0, 0] == 0.0
        assert out[1, 1] == pytest.approx(0.75 * 0.75 * 0 + 0.75 * 0.25 * 1 + 0.25 * 0.75 * 2 + 0.0625 * 3)

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_sum_scales_by_four(self, h, w, seed):
        x = np.random.default_rng(seed).standard_normal((1, 1, h, w))
        with precision(np.float64):
            out = bilinear_upsample_2x(Tensor(x)).data
        assert out.sum() == pytest.approx(4 * x.sum(), abs=1e-9)


class TestBatchNorm:
    def test_normalises(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 5)) * 4 + 7)
        out = batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
        assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-4

    def test_affine(self, rng):
        z = rng.standard_normal((4, 2, 6, 6))
        z = (z - z.mean(axis=(0, 2, 3), keepdims=True)) / z.std(axis=(0, 2, 3), keepdims=True)
        with precision(np.float64):
            out = batch_norm(Tensor(z), Tensor(np.full(2, 2.0)), Tensor(np.full(2, 3.0)), eps=1e-12).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 3.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 2.0, atol=1e-6)

    def test_constant_channel_gives_beta(self):
        x = Tensor(np.full((2, 1, 4, 4), 0.1, dtype=np.float32))
        out = batch_norm(x, Tensor(np.ones(1)), Tensor(np.full(1, 0.5))).data
        assert np.all(out == np.float32(0.5))

    def test_eval_uses_running_stats(self, rng):
        rm, rv = np.zeros(2), np.ones(2)
        x = rng.standard_normal((2, 2, 3, 3)) + 5
        with precision(np.float64):
            batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True, momentum=1.0)
            np.testing.assert_allclose(rm, x.mean(axis=(0, 2, 3)))
            out = batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False).data
        assert np.isfinite(out).all()

    def test_errors(self):
        with pytest.raises(ValueError, match="channel"):
            batch_norm(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        with pytest.raises(ValueError, match="eps"):
            batch_norm(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), eps=0)


class TestBackward:
    def test_quadratic(self):
        p = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        backward((p * p).sum())
        np.testing.assert_allclose(p.grad, [2, 4, 6])

    def test_accumulates_until_zeroed(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward((p * p).sum())
        backward((p * p).sum())
        np.testing.assert_allclose(p.grad, [4, 8])
        p.zero_grad()
        backward(p.sum())
        np.testing.assert_allclose(p.grad, [1, 1])

    def test_unreachable_param_gets_no_gradient(self):
        p = Parameter(np.ones(2))
        q = Parameter(np.ones(2))
        backward((p * 3).sum())
        assert q.grad is None or not q.grad.any()

    def test_non_scalar_rejected(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(p * 2)

    def test_shared_subexpression(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        backward((y + y * x).sum())  # 2x^2... d/dx (x^2 + x^3) = 2x + 3x^2
        np.testing.assert_allclose(x.grad, [4 + 12])


def _probe_loss(out, probe):
    return (out * Tensor(probe)).sum()


GRAD_CASES = 10


@pytest.mark.parametrize("seed", range(GRAD_CASES))
class TestGradients:
    """Analytic vs central finite-difference gradients in 64-bit."""

    def test_conv2d_dilated(self, seed):
        r = np.random.default_rng(seed)
        x, w, b = r.standard_normal((2, 2, 5, 6)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)
        dil = 1 + seed % 3
        probe = r.standard_normal((2, 3, 5, 6))
        err = check_gradients(lambda x, w, b: _probe_loss(conv2d(x, w, b, dilation=dil), probe), [x, w, b])
        assert err < 1e-6

    def test_conv2d_wrap(self, seed):
        r = np.random.default_rng(100 + seed)
        x, w = r.standard_normal((1, 2, 4, 6)), r.standard_normal((2, 2, 3, 3))
        probe = r.standard_normal((1, 2, 4, 6))
        err = check_gradients(lambda x, w: _probe_loss(conv2d(x, w, dilation=2, wrap_lon=True), probe), [x, w])
        assert err < 1e-6

    def test_locally_connected(self, seed):
        r = np.random.default_rng(200 + seed)
        x, w, b = r.standard_normal((2, 3, 3, 4)), r.standard_normal((3, 4, 2, 3)), r.standard_normal((3, 4, 2))
        probe = r.standard_normal((2, 2, 3, 4))
        err = check_gradients(lambda x, w, b: _probe_loss(locally_connected(x, w, b), probe), [x, w, b])
        assert err < 1e-6

    def test_upsample(self, seed):
        r = np.random.default_rng(300 + seed)
        x = r.standard_normal((1, 2, 3, 4))
        probe = r.standard_normal((1, 2, 6, 8))
        assert check_gradients(lambda x: _probe_loss(bilinear_upsample_2x(x), probe), [x]) < 1e-6

    def test_batch_norm(self, seed):
        r = np.random.default_rng(400 + seed)
        x, g, b = r.standard_normal((2, 3, 4, 4)), r.standard_normal(3), r.standard_normal(3)
        probe = r.standard_normal((2, 3, 4, 4))
        err = check_gradients(lambda x, g, b: _probe_loss(batch_norm(x, g, b), probe), [x, g, b])
        assert err < 1e-6

    def test_maxpool(self, seed):
        r = np.random.default_rng(500 + seed)
        x = r.standard_normal((1, 2, 4, 6))
        probe = r.standard_normal((1, 2, 2, 3))
        assert check_gradients(lambda x: _probe_loss(max_pool2x2(x), probe), [x]) < 1e-6

    def test_l1_adjacent(self, seed):
        r = np.random.default_rng(600 + seed)
        w = r.standard_normal((4, 5, 1, 3))
        assert check_gradients(lambda w: l1_adjacent_penalty(w), [w]) < 1e-6

    def test_elementwise(self, seed):
        r = np.random.default_rng(700 + seed)
        a, b = r.standard_normal((2, 3)), r.uniform(0.5, 2.0, (2, 3))
        probe = r.standard_normal((2, 3))

        def f(a, b):
            parts = [relu(a), sigmoid(a), softplus(a), exp(a * 0.3), erf(a), sqrt(b), a / b, a - b,
                     tabs(a), (a ** 3.0) * 0.1]
            total = parts[0]
            for p in parts[1:]:
                total = total + p
            return _probe_loss(concat([total, total * b], axis=0).mean(axis=0), probe[0])
        assert check_gradients(f, [a, b]) < 1e-6

    def test_relu_conv_composition(self, seed):
        r = np.random.default_rng(800 + seed)
        x, w = r.standard_normal((1, 2, 5, 5)), r.standard_normal((2, 2, 3, 3))
        probe = r.standard_normal((1, 2, 5, 5))
        assert check_gradients(lambda x, w: _probe_loss(relu(conv2d(x, w)), probe), [x, w]) < 1e-6


def test_float32_gradients_within_loose_tolerance(rng):
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    w = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    probe = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    xt = Tensor(x, requires_grad=True)
    backward((conv2d(xt, Tensor(w)) * Tensor(probe)).sum())
    with precision(np.float64):
        x64 = Tensor(x.astype(np.float64), requires_grad=True)
        backward((conv2d(x64, Tensor(w.astype(np.float64))) * Tensor(probe.astype(np.float64))).sum())
    assert np.abs(xt.grad - x64.grad).max() / np.abs(x64.grad).max() < 1e-2


def test_pad2d_wrap_values():
    x = Tensor(np.arange(6, dtype=np.float64).reshape(1, 1, 2, 3))
    out = pad2d(x, 0, 0, 1, 1, wrap_lon=True).data[0, 0]
    np.testing.assert_array_equal(out, [[2, 0, 1, 2, 0], [5, 3, 4, 5, 3]])


def test_l1_adjacent_values(rng):
    assert l1_adjacent_penalty(Tensor(np.full((3, 3, 1, 1), 2.0))).item() == 0.0
    assert l1_adjacent_penalty(Tensor(np.array([1.0, 3.0]).reshape(1, 2, 1, 1))).item() == 2.0
    w = rng.standard_normal((4, 4, 2, 3))
    expected = 0.0
    for i in range(4):
        for j in range(4):
            for di, dj in ((1, 0), (0, 1)):
                if i + di < 4 and j + dj < 4:
                    expected += np.abs(w[i, j] - w[i + di, j + dj]).sum()
    with precision(np.float64):
        assert l1_adjacent_penalty(Tensor(w)).item() == pytest.approx(expected, rel=1e-12)


def test_determinism(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

    def run():
        xt, wt = Tensor(x.copy(), requires_grad=True), Tensor(w.copy(), requires_grad=True)
        out = relu(conv2d(xt, wt, dilation=2))
        backward(out.sum())
        return out.data, xt.grad, wt.grad
    for a, b in zip(run(), run()):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree_bitwise(rng, dtype):
    xp = rng.standard_normal((2, 3, 9, 10)).astype(dtype)
    args = (3, 3, 1, 2, 5, 6)
    cols_c = kernels.im2col(xp, *args)
    cols_py = _kernels_py.im2col(xp, *args)
    np.testing.assert_array_equal(cols_c, cols_py)
    dcols = rng.standard_normal(cols_c.shape).astype(dtype)
    np.testing.assert_array_equal(kernels.col2im(dcols, 2, 3, 9, 10, *args),
                                  _kernels_py.col2im(dcols, 2, 3, 9, 10, *args))
    x = rng.standard_normal((2, 3, 6, 8)).astype(dtype)
    out_c, idx_c = kernels.maxpool2x2(x)
    out_py, idx_py = _kernels_py.maxpool2x2(x)
    np.testing.assert_array_equal(out_c, out_py)
    np.testing.assert_array_equal(idx_c, idx_py)
    g = rng.standard_normal(out_c.shape).astype(dtype)
    np.testing.assert_array_equal(kernels.maxpool2x2_backward(g, idx_c), _kernels_py.maxpool2x2_backward(g, idx_py))


def test_flush_denormals_is_scoped():
    tiny = np.float32(1e-37)
    assert tiny * np.float32(1e-5) != 0
    with kernels.flush_denormals() as active:
        inside = tiny * np.float32(1e-5)
    assert tiny * np.float32(1e-5) != 0  # restored
    if active:
        assert inside == 0
    else:
        assert kernels.BACKEND == "numpy"


class TestTruncatedNormal:
    def test_bounds_and_mean(self):
        draws = truncated_normal(1_000_000, 0.05, np.random.default_rng(0))
        assert np.abs(draws).max() <= 0.1
        assert abs(draws.mean()) < 3e-3 * 0.05

    def test_seeded(self):
        a = truncated_normal(100, 1.0, np.random.default_rng(5))
        b = truncated_normal(100, 1.0, np.random.default_rng(5))
        c = truncated_normal(100, 1.0, np.random.default_rng(6))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestCheckpoint:
    def test_round_trip_float32(self, tmp_path, rng):
        from collections import OrderedDict
        state = OrderedDict(a=rng.standard_normal((2, 3)).astype(np.float32), b=np.zeros(4, np.float32))
        save_checkpoint(tmp_path / "m.ckpt", state, {"kind": "test"})
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[:8] == b"ENSPOST1"
        loaded, cfg = load_checkpoint(tmp_path / "m.ckpt")
        assert cfg == {"kind": "test"}
        assert list(loaded) == ["a", "b"]
        np.testing.assert_array_equal(loaded["a"], state["a"])
        # payload is raw little-endian f32 after the header
        np.testing.assert_array_equal(np.frombuffer(raw[-16:], "<f4"), np.zeros(4))

    def test_float64_kept_exact(self, tmp_path, rng):
        from collections import OrderedDict
        state = OrderedDict(a=rng.standard_normal(5))
        save_checkpoint(tmp_path / "m.ckpt", state)
        np.testing.assert_array_equal(load_checkpoint(tmp_path / "m.ckpt")[0]["a"], state["a"])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOTACKPT" + bytes(8))
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(tmp_path / "x")
