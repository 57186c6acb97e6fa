import math

import numpy as np
import pytest
import torch

from occludet import nnkit
from occludet.errors import ContractViolation


# --- independent oracles (pure loops, no torch) -----------------------------------


def conv_oracle(x, w, b, stride, pad):
    """Direct nested-loop convolution."""
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for ky in range(k):
                            for kx in range(k):
                                acc += xp[n, ci, i * stride + ky, j * stride + kx] * w[co, ci, ky, kx]
                    out[n, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


def maxpool_oracle(x):
    """Brute-force windowed max with ceil semantics (partial edge windows)."""
    bsz, c, h, w = x.shape
    ho, wo = math.ceil(h / 2), math.ceil(w / 2)
    out = np.zeros((bsz, c, ho, wo))
    for n in range(bsz):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    out[n, ci, i, j] = x[n, ci, 2 * i : min(2 * i + 2, h), 2 * j : min(2 * j + 2, w)].max()
    return out


def bilinear_oracle(x):
    """Half-pixel-centers 2x bilinear upsampling with edge clamping."""
    h, w = x.shape

    def at(r, c):
        return x[min(max(r, 0), h - 1), min(max(c, 0), w - 1)]

    out = np.zeros((2 * h, 2 * w))
    for oy in range(2 * h):
        for ox in range(2 * w):
            sy = (oy + 0.5) / 2.0 - 0.5
            sx = (ox + 0.5) / 2.0 - 0.5
            y0, x0 = math.floor(sy), math.floor(sx)
            wy, wx = sy - y0, sx - x0
            out[oy, ox] = (
                at(y0, x0) * (1 - wy) * (1 - wx)
                + at(y0, x0 + 1) * (1 - wy) * wx
                + at(y0 + 1, x0) * wy * (1 - wx)
                + at(y0 + 1, x0 + 1) * wy * wx
            )
    return out


# --- conv2d -----------------------------------------------------------------------


def test_conv2d_all_ones_center():
    x = torch.ones(1, 1, 3, 3)
    w = torch.ones(1, 1, 3, 3)
    out = nnkit.conv2d(x, w, None, stride=1, pad=1)
    assert out.shape == (1, 1, 3, 3)
    assert out[0, 0, 1, 1].item() == pytest.approx(9.0)


def test_conv2d_identity_kernel_exact():
    x = torch.randn(2, 3, 5, 7)
    w = torch.zeros(3, 3, 1, 1)
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = nnkit.conv2d(x, w)
    assert torch.equal(out, x)


def test_conv2d_matches_nested_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 1, 5, 5))
    w = rng.standard_normal((1, 1, 3, 3))
    b = rng.standard_normal(1)
    out = nnkit.conv2d(torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b))
    expected = conv_oracle(x, w, b, stride=1, pad=0)
    np.testing.assert_allclose(out.numpy(), expected, atol=1e-6)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
def test_conv2d_oracle_strides_pads(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 3, 8, 9))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = nnkit.conv2d(torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b), stride, pad)
    expected = conv_oracle(x, w, b, stride, pad)
    assert out.shape == expected.shape  # floor((H + 2p - K)/s) + 1
    np.testing.assert_allclose(out.numpy(), expected, atol=1e-8)


def test_conv2d_channel_mismatch_raises():
    with pytest.raises(ContractViolation):
        nnkit.conv2d(torch.randn(1, 3, 4, 4), torch.randn(2, 4, 3, 3))


def test_conv2d_rejects_bad_rank():
    with pytest.raises(ContractViolation):
        nnkit.conv2d(torch.randn(3, 4, 4), torch.randn(2, 3, 3, 3))


# --- maxpool2x2 ---------------------------------------------------------------------


def test_maxpool_single_window():
    x = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).view(1, 1, 2, 2)
    assert nnkit.maxpool2x2(x).view(-1).tolist() == [4.0]


def test_maxpool_constant_invariance():
    x = torch.full((1, 2, 6, 6), 3.25)
    out = nnkit.maxpool2x2(x)
    assert out.shape == (1, 2, 3, 3)
    assert torch.all(out == 3.25)


def test_maxpool_matches_windowed_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 1, 5, 5))
    out = nnkit.maxpool2x2(torch.from_numpy(x))
    expected = maxpool_oracle(x)
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_allclose(out.numpy(), expected)


@pytest.mark.parametrize("h,w", [(1, 1), (1, 4), (7, 3), (6, 6), (9, 2)])
def test_maxpool_ceil_dims_and_values(h, w):
    rng = np.random.default_rng(h * 10 + w)
    x = rng.standard_normal((2, 3, h, w))
    out = nnkit.maxpool2x2(torch.from_numpy(x))
    assert out.shape == (2, 3, math.ceil(h / 2), math.ceil(w / 2))
    np.testing.assert_allclose(out.numpy(), maxpool_oracle(x))


# --- bilinear_upsample2x ---------------------------------------------------------------


def test_bilinear_constant_invariance():
    x = torch.full((1, 3, 4, 5), -1.5)
    out = nnkit.bilinear_upsample2x(x)
    assert out.shape == (1, 3, 8, 10)
    assert torch.allclose(out, torch.full_like(out, -1.5))


def test_bilinear_degenerate_one_pixel():
    x = torch.tensor([[[[7.0]]]])
    out = nnkit.bilinear_upsample2x(x)
    assert out.shape == (1, 1, 2, 2)
    assert torch.all(out == 7.0)


def test_bilinear_ramp_hand_computed():
    # 2x2 ramp under the half-pixel convention, weights worked out by hand
    x = torch.tensor([[0.0, 1.0], [2.0, 3.0]]).view(1, 1, 2, 2)
    expected = np.array(
        [
            [0.0, 0.25, 0.75, 1.0],
            [0.5, 0.75, 1.25, 1.5],
            [1.5, 1.75, 2.25, 2.5],
            [2.0, 2.25, 2.75, 3.0],
        ]
    )
    out = nnkit.bilinear_upsample2x(x)
    np.testing.assert_allclose(out[0, 0].numpy(), expected, atol=1e-6)
    np.testing.assert_allclose(bilinear_oracle(x[0, 0].numpy()), expected, atol=1e-12)


def test_bilinear_matches_oracle_random():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 5))
    out = nnkit.bilinear_upsample2x(torch.from_numpy(x).view(1, 1, 3, 5))
    np.testing.assert_allclose(out[0, 0].numpy(), bilinear_oracle(x), atol=1e-10)


# --- zero_pad -----------------------------------------------------------------------


def test_zero_pad_identity():
    x = torch.randn(1, 2, 3, 3)
    assert torch.equal(nnkit.zero_pad(x, 0, 0), x)


def test_zero_pad_right_column():
    x = torch.randn(1, 1, 2, 2)
    out = nnkit.zero_pad(x, pad_right=1, pad_bottom=0)
    assert out.shape == (1, 1, 2, 3)
    assert torch.all(out[:, :, :, -1] == 0)
    assert torch.equal(out[:, :, :, :2], x)


def test_zero_pad_preserves_sum():
    x = torch.randn(1, 1, 3, 3)
    out = nnkit.zero_pad(x, 1, 1)
    assert out.shape == (1, 1, 4, 4)
    assert out.sum().item() == pytest.approx(x.sum().item(), abs=1e-6)


# --- graph arithmetic -----------------------------------------------------------------


def test_count_parameters_empty():
    assert nnkit.count_parameters([]) == 0


def test_count_parameters_single_conv():
    g = [nnkit.conv_op(3, 64, 64)]
    assert nnkit.count_parameters(g) == 3 * 3 * 64 * 64 + 64  # 36,928


def test_count_parameters_additive():
    g = [nnkit.conv_op(3, 64, 64), nnkit.conv_op(3, 64, 64)]
    assert nnkit.count_parameters(g) == 73_856
    a = [nnkit.conv_op(3, 8, 16)]
    b = [nnkit.conv_op(1, 16, 4), nnkit.pool_op(4)]
    assert nnkit.count_parameters(a + b) == nnkit.count_parameters(a) + nnkit.count_parameters(b)


def test_graph_channel_mismatch_rejected():
    with pytest.raises(ContractViolation):
        nnkit.count_parameters([nnkit.conv_op(3, 8, 16), nnkit.conv_op(3, 8, 16)])


def test_receptive_field_single_conv():
    assert nnkit.receptive_field([nnkit.conv_op(3, 8, 8)]).receptive_field == 3


def test_receptive_field_two_convs():
    g = [nnkit.conv_op(3, 8, 8), nnkit.conv_op(3, 8, 8)]
    assert nnkit.receptive_field(g).receptive_field == 5


def test_receptive_field_after_two_pools():
    g = [nnkit.pool_op(8), nnkit.pool_op(8), nnkit.conv_op(3, 8, 8)]
    spec = nnkit.receptive_field(g)
    assert spec.receptive_field == 1 + (3 - 1) * 4  # 9
    assert spec.stride == 4


# --- gradient checking ------------------------------------------------------------------


def test_grad_check_linear_op_near_exact():
    w = torch.randn(4, 3, dtype=torch.float64)

    def fn(x):
        return x @ w

    err = nnkit.grad_check(fn, [torch.randn(2, 4, dtype=torch.float64)])
    assert err < 1e-10


def test_grad_check_conv2d():
    torch.manual_seed(0)
    x = torch.randn(1, 2, 6, 6)
    w = torch.randn(3, 2, 3, 3)
    b = torch.randn(3)

    def fn(xi, wi, bi):
        return nnkit.conv2d(xi, wi, bi, stride=1, pad=1)

    assert nnkit.grad_check(fn, [x, w, b]) < 1e-4


def test_grad_check_pool_upsample_pad():
    torch.manual_seed(1)
    x = torch.randn(1, 2, 5, 5)
    assert nnkit.grad_check(lambda t: nnkit.maxpool2x2(t), [x]) < 1e-4
    assert nnkit.grad_check(lambda t: nnkit.bilinear_upsample2x(t), [x]) < 1e-4
    assert nnkit.grad_check(lambda t: nnkit.zero_pad(t, 1, 1), [x]) < 1e-4


def test_grad_check_reports_nonfinite_as_failure():
    def fn(x):
        return x / (x - x)  # NaN everywhere

    err = nnkit.grad_check(fn, [torch.ones(2, 2, dtype=torch.float64)])
    assert err == float("inf")


def test_grad_check_module_conv_layer():
    layer = nnkit.Conv2d(2, 3, 3, generator=torch.Generator().manual_seed(0))
    err = nnkit.grad_check_module(layer, [torch.randn(1, 2, 4, 4)])
    assert err < 1e-4


# --- invariants -----------------------------------------------------------------------


def test_shape_determinism():
    for h, w in [(4, 4), (5, 9), (1, 3)]:
        x = torch.randn(1, 2, h, w)
        assert nnkit.maxpool2x2(x).shape == (1, 2, math.ceil(h / 2), math.ceil(w / 2))
        assert nnkit.bilinear_upsample2x(x).shape == (1, 2, 2 * h, 2 * w)
        assert nnkit.conv2d(x, torch.randn(4, 2, 1, 1)).shape == (1, 4, h, w)


def test_pool_then_upsample_constant_roundtrip():
    x = torch.full((1, 1, 6, 6), 2.5)
    back = nnkit.bilinear_upsample2x(nnkit.maxpool2x2(x))
    assert back.shape == x.shape
    assert torch.allclose(back, x)


def test_conv_layer_same_padding_default():
    layer = nnkit.Conv2d(3, 5, 3)
    out = layer(torch.randn(1, 3, 7, 7))
    assert out.shape == (1, 5, 7, 7)
    op = layer.graph_op()
    assert op.kernel_size == 3 and op.in_channels == 3 and op.out_channels == 5
