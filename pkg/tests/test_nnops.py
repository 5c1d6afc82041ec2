"""conv2d / conv_transpose2d / bilinear upsample against loop oracles."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anomseg.autodiff import ShapeError, Tensor, backward
from anomseg.nnops import bilinear_upsample, conv2d, conv_transpose2d

from test_autodiff import check_grads, rng


def conv2d_oracle(x, w, stride, pad):
    """Direct nested-loop cross-correlation, (Cin,H,W) x (Cout,Cin,k,k)."""
    cout, cin, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    h, wd = xp.shape[1:]
    ho = (h - k) // stride + 1
    wo = (wd - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ci in range(cin):
                    for a in range(k):
                        for b in range(k):
                            acc += xp[ci, i * stride + a, j * stride + b] * w[co, ci, a, b]
                out[co, i, j] = acc
    return out


def conv_transpose2d_oracle(x, w, stride, pad):
    """Scatter-loop adjoint of conv2d_oracle. x (Co,H,W), w (Co,Ci,k,k)."""
    co, h, wd = x.shape
    _, ci, k, _ = w.shape
    hout = (h - 1) * stride - 2 * pad + k
    wout = (wd - 1) * stride - 2 * pad + k
    out = np.zeros((ci, hout + 2 * pad, wout + 2 * pad))
    for c in range(co):
        for i in range(h):
            for j in range(wd):
                out[:, i * stride:i * stride + k, j * stride:j * stride + k] += x[c, i, j] * w[c]
    return out[:, pad:pad + hout, pad:pad + wout]


class TestConv2d:
    def test_one_by_one_identity(self):
        x = rng(20).normal(size=(1, 5, 5))
        w = np.ones((1, 1, 1, 1))
        np.testing.assert_allclose(conv2d(Tensor(x), Tensor(w)).data, x, atol=1e-7)

    def test_all_ones_interior(self):
        c = 2.5
        x = np.full((1, 6, 6), c)
        w = np.ones((1, 1, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), stride=1, pad=1).data
        np.testing.assert_allclose(out[0, 1:-1, 1:-1], 9 * c, atol=1e-5)

    @pytest.mark.parametrize("stride,pad,size", [(1, 0, 8), (1, 1, 8), (2, 1, 9), (3, 0, 9)])
    def test_against_loop_oracle(self, stride, pad, size):
        g = rng(21 + stride * 10 + pad)
        x = g.normal(size=(2, size, size))
        k = 3
        w = g.normal(size=(4, 2, k, k))
        got = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride, pad).data
        np.testing.assert_allclose(got, conv2d_oracle(x, w, stride, pad), atol=1e-10)

    def test_batched_matches_per_image(self):
        g = rng(22)
        x = g.normal(size=(3, 2, 6, 6)).astype(np.float32)
        w = g.normal(size=(4, 2, 3, 3)).astype(np.float32)
        full = conv2d(Tensor(x), Tensor(w), 1, 1).data
        for b in range(3):
            single = conv2d(Tensor(x[b]), Tensor(w), 1, 1).data
            np.testing.assert_allclose(full[b], single, atol=1e-6)

    def test_non_integral_geometry_rejected(self):
        # (8 + 0 - 3) = 5 is not divisible by stride 2
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 8, 8))), Tensor(np.ones((1, 1, 3, 3))), stride=2, pad=0)

    def test_grads(self):
        g = rng(23)
        x = g.normal(size=(2, 5, 5))
        w = g.normal(size=(3, 2, 3, 3))
        check_grads(lambda a, b: (conv2d(a, b, stride=2, pad=1) ** 2.0).sum(), x, w)

    def test_patch_conv_grads(self):
        g = rng(24)
        x = g.normal(size=(2, 4, 4))
        w = g.normal(size=(3, 2, 2, 2))
        check_grads(lambda a, b: (conv2d(a, b, stride=2, pad=0) ** 2.0).sum(), x, w)


class TestConvTranspose2d:
    def test_unit_kernel_identity(self):
        x = rng(25).normal(size=(1, 4, 4))
        w = np.ones((1, 1, 1, 1))
        np.testing.assert_allclose(conv_transpose2d(Tensor(x), Tensor(w)).data, x, atol=1e-7)

    def test_shape_round_trip(self):
        x = Tensor(np.ones((2, 9, 9)))
        w = Tensor(np.ones((4, 2, 3, 3)))
        y = conv2d(x, w, stride=2, pad=1)
        back = conv_transpose2d(y, Tensor(np.ones((4, 2, 3, 3))), stride=2, pad=1)
        assert back.shape == x.shape

    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 0), (2, 1)])
    def test_against_scatter_oracle(self, stride, pad):
        g = rng(26 + stride + pad)
        x = g.normal(size=(3, 4, 4))
        w = g.normal(size=(3, 2, 3, 3))
        got = conv_transpose2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride, pad).data
        np.testing.assert_allclose(got, conv_transpose2d_oracle(x, w, stride, pad), atol=1e-10)

    @given(st.integers(1, 3), st.integers(0, 1), st.integers(1, 3), st.integers(1, 2))
    @settings(max_examples=25, deadline=None)
    def test_adjoint_of_conv2d(self, stride, pad, kk, cin):
        k = 2 * kk - 1
        g = rng(1000 * stride + 100 * pad + 10 * k + cin)
        h = k + 2 * stride  # guarantees integral geometry margin
        if (h + 2 * pad - k) % stride:
            h += stride - (h + 2 * pad - k) % stride
        x = g.normal(size=(cin, h, h))
        cout = 2
        w = g.normal(size=(cout, cin, k, k))
        ho = (h + 2 * pad - k) // stride + 1
        y = g.normal(size=(cout, ho, ho))
        lhs = float(np.sum(conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride, pad).data * y))
        rhs = float(np.sum(x * conv_transpose2d(Tensor(y, dtype=np.float64), Tensor(w, dtype=np.float64), stride, pad).data))
        assert lhs == pytest.approx(rhs, abs=1e-8)

    def test_grads(self):
        g = rng(27)
        x = g.normal(size=(3, 3, 3))
        w = g.normal(size=(3, 2, 3, 3))
        check_grads(lambda a, b: (conv_transpose2d(a, b, stride=2, pad=1) ** 2.0).sum(), x, w)

    def test_patch_expansion_grads(self):
        g = rng(28)
        x = g.normal(size=(3, 2, 2))
        w = g.normal(size=(3, 2, 4, 4))
        check_grads(lambda a, b: (conv_transpose2d(a, b, stride=4, pad=0) ** 2.0).sum(), x, w)


def bilinear_oracle(x, oh, ow):
    """Independent closed-form align-corners=false interpolation."""
    h, w = x.shape

    def sample(r, c):
        pr = min(max((r + 0.5) * h / oh - 0.5, 0.0), h - 1.0)
        pc = min(max((c + 0.5) * w / ow - 0.5, 0.0), w - 1.0)
        r0, c0 = int(np.floor(pr)), int(np.floor(pc))
        r1, c1 = min(r0 + 1, h - 1), min(c0 + 1, w - 1)
        fr, fc = pr - r0, pc - c0
        return ((1 - fr) * (1 - fc) * x[r0, c0] + (1 - fr) * fc * x[r0, c1]
                + fr * (1 - fc) * x[r1, c0] + fr * fc * x[r1, c1])

    return np.array([[sample(r, c) for c in range(ow)] for r in range(oh)])


class TestBilinearUpsample:
    def test_constant_field(self):
        x = np.full((1, 3, 3), 7.25)
        out = bilinear_upsample(Tensor(x), 12, 12).data
        np.testing.assert_allclose(out, 7.25, atol=1e-6)

    def test_two_by_two_doubling(self):
        x = np.array([[0.0, 2.0], [4.0, 6.0]])
        got = bilinear_upsample(Tensor(x, dtype=np.float64), 4, 4).data
        np.testing.assert_allclose(got, bilinear_oracle(x, 4, 4), atol=1e-12)
        # spot-check the closed form: first row interpolates only columns
        np.testing.assert_allclose(got[0], [0.0, 0.5, 1.5, 2.0], atol=1e-12)

    def test_random_against_oracle(self):
        x = rng(29).normal(size=(5, 7))
        got = bilinear_upsample(Tensor(x, dtype=np.float64), 16, 9).data
        np.testing.assert_allclose(got, bilinear_oracle(x, 16, 9), atol=1e-12)

    def test_grads(self):
        x = rng(30).normal(size=(2, 3, 3))
        check_grads(lambda t: (bilinear_upsample(t, 7, 5) ** 2.0).sum(), x)


def test_gradients_flow_through_deep_composite():
    """conv -> transpose-conv -> upsample chain differentiates end to end."""
    g = rng(31)
    x = g.normal(size=(2, 6, 6))
    w1 = g.normal(size=(3, 2, 3, 3))
    w2 = g.normal(size=(3, 2, 2, 2))

    def build(a, b, c):
        mid = conv2d(a, b, stride=1, pad=1)
        up = conv_transpose2d(mid, c, stride=2, pad=0)
        return (bilinear_upsample(up, 8, 8) ** 2.0).mean()

    check_grads(build, x, w1, w2, rel=1e-3)
