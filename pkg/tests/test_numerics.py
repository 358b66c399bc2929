import numpy as np
import pytest
import torch

from plckit.numerics import (
    DepthwiseSeparableConv2d,
    DualPathDepthwiseConv2d,
    GradCheckError,
    PaddingMode,
    channels_to_complex,
    complex_to_channels,
    grad_check,
    gru_cell_step,
    primitive_suite,
    time_padding,
)

torch.manual_seed(0)


class TestTimePadding:
    def test_causal_pads_past_only(self):
        assert time_padding(2, 1, PaddingMode.CAUSAL) == (1, 0)
        assert time_padding(3, 4, PaddingMode.CAUSAL) == (8, 0)

    def test_noncausal_even_kernel_future_weighted(self):
        # kernel 2: exactly one frame of look-ahead
        assert time_padding(2, 1, PaddingMode.NONCAUSAL) == (0, 1)

    def test_noncausal_odd_kernel_symmetric(self):
        assert time_padding(3, 1, PaddingMode.NONCAUSAL) == (1, 1)
        assert time_padding(3, 4, PaddingMode.NONCAUSAL) == (4, 4)


class TestDepthwiseSeparable:
    def test_identity_kernels_preserve_input(self):
        conv = DepthwiseSeparableConv2d(3, 3, kernel=(1, 1), stride=(1, 1))
        with torch.no_grad():
            conv.depthwise.weight.fill_(1.0)
            conv.pointwise.weight.zero_()
            conv.pointwise.bias.zero_()
            for c in range(3):
                conv.pointwise.weight[c, c, 0, 0] = 1.0
        x = torch.randn(2, 3, 5, 7)
        assert torch.equal(conv(x), x)

    def test_parameter_count_vs_full_conv(self):
        # closed-form oracle: C*Kt*Kf depthwise + C*C pointwise + bias,
        # against C*C*Kt*Kf for a full conv
        c, kernel = 80, (2, 3)
        conv = DepthwiseSeparableConv2d(c, c, kernel, stride=(1, 1), bias=True)
        n = sum(p.numel() for p in conv.parameters())
        expected = c * kernel[0] * kernel[1] + c * c + c
        assert n == expected
        full = c * c * kernel[0] * kernel[1] + c
        assert n / full == pytest.approx(0.1809, abs=0.002)

    def test_freq_stride_formula(self):
        conv = DepthwiseSeparableConv2d(4, 8, (2, 3), (1, 2))
        out = conv(torch.randn(1, 4, 10, 321))
        assert out.shape == (1, 8, 10, (321 + 2 * 1 - 3) // 2 + 1)

    def test_time_length_preserved(self):
        for mode in (PaddingMode.CAUSAL, PaddingMode.NONCAUSAL):
            conv = DepthwiseSeparableConv2d(4, 4, (2, 3), (1, 1), padding=mode)
            out = conv(torch.randn(1, 4, 9, 15))
            assert out.shape[2] == 9

    def test_channel_mismatch_rejected(self):
        conv = DepthwiseSeparableConv2d(4, 8, (2, 3), (1, 1))
        with pytest.raises(RuntimeError):
            conv(torch.randn(1, 5, 9, 15))


class TestCausality:
    """Prefix property: same-shape runs perturbed after frame t agree
    bit-exactly on frames <= t."""

    @pytest.mark.parametrize("kernel,dilation", [((2, 3), (1, 1)), ((3, 3), (2, 2))])
    def test_causal_prefix_bit_exact(self, kernel, dilation):
        conv = DepthwiseSeparableConv2d(4, 6, kernel, (1, 1), dilation=dilation,
                                        padding=PaddingMode.CAUSAL)
        x = torch.randn(2, 4, 12, 9)
        y = conv(x)
        x2 = x.clone()
        x2[:, :, 7:, :] += 1.0
        y2 = conv(x2)
        assert torch.equal(y[:, :, :7], y2[:, :, :7])
        assert not torch.equal(y[:, :, 7:], y2[:, :, 7:])

    def test_noncausal_sees_future(self):
        conv = DepthwiseSeparableConv2d(4, 6, (3, 3), (1, 1),
                                        padding=PaddingMode.NONCAUSAL)
        x = torch.randn(1, 4, 12, 9)
        x2 = x.clone()
        x2[:, :, 7, :] += 1.0
        y, y2 = conv(x), conv(x2)
        assert not torch.equal(y[:, :, 6], y2[:, :, 6])  # one-frame look-ahead
        assert torch.equal(y[:, :, :6], y2[:, :, :6])


class TestDualPath:
    def test_paths_use_distinct_parameters(self):
        dual = DualPathDepthwiseConv2d(4, (2, 3))
        x = torch.randn(1, 4, 8, 9)
        a = dual(x, PaddingMode.CAUSAL)
        b = dual(x, PaddingMode.NONCAUSAL)
        assert a.shape == b.shape
        assert not torch.allclose(a, b)

    def test_identical_weights_time_constant_input_interior_equal(self):
        dual = DualPathDepthwiseConv2d(4, (2, 3))
        with torch.no_grad():
            dual.weight_noncausal.copy_(dual.weight_causal)
        frame = torch.randn(1, 4, 1, 9)
        x = frame.repeat(1, 1, 10, 1)  # constant along time
        a = dual(x, PaddingMode.CAUSAL)
        b = dual(x, PaddingMode.NONCAUSAL)
        # only boundary frames feel the padding difference
        assert torch.equal(a[:, :, 1:-1], b[:, :, 1:-1])

    def test_causal_path_prefix(self):
        dual = DualPathDepthwiseConv2d(4, (3, 3), dilation=(2, 2))
        x = torch.randn(1, 4, 12, 9)
        x2 = x.clone()
        x2[:, :, 9:] -= 2.0
        assert torch.equal(dual(x, PaddingMode.CAUSAL)[:, :, :9],
                           dual(x2, PaddingMode.CAUSAL)[:, :, :9])

    def test_unknown_path_rejected(self):
        dual = DualPathDepthwiseConv2d(4, (2, 3))
        with pytest.raises(ValueError):
            dual(torch.randn(1, 4, 8, 9), "sideways")


class TestGru:
    def test_zero_input_zero_bias_fixed_point(self):
        gru = torch.nn.GRU(5, 7, batch_first=True)
        with torch.no_grad():
            gru.bias_ih_l0.zero_()
            gru.bias_hh_l0.zero_()
        out, _ = gru(torch.zeros(2, 6, 5))
        assert torch.equal(out, torch.zeros(2, 6, 7))

    def test_single_step_matches_hand_cell(self):
        gru = torch.nn.GRU(4, 3, batch_first=True)
        x = torch.randn(2, 1, 4)
        out, _ = gru(x)
        # hand-computed cell in numpy from the raw weight matrices
        w_ih = gru.weight_ih_l0.detach().numpy()
        w_hh = gru.weight_hh_l0.detach().numpy()
        b_ih = gru.bias_ih_l0.detach().numpy()
        b_hh = gru.bias_hh_l0.detach().numpy()
        xv = x[:, 0].detach().numpy()
        gi = xv @ w_ih.T + b_ih
        gh = np.zeros((2, 9)) + b_hh
        sig = lambda v: 1.0 / (1.0 + np.exp(-v))
        r = sig(gi[:, :3] + gh[:, :3])
        z = sig(gi[:, 3:6] + gh[:, 3:6])
        n = np.tanh(gi[:, 6:] + r * gh[:, 6:])
        expected = (1 - z) * n
        np.testing.assert_allclose(out[:, 0].detach().numpy(), expected,
                                   rtol=1e-5, atol=1e-6)

    def test_manual_cell_matches_nn_gru_sequence(self):
        gru = torch.nn.GRU(4, 3, batch_first=True)
        x = torch.randn(2, 5, 4)
        ref, _ = gru(x)
        h = torch.zeros(2, 3)
        steps = []
        with torch.no_grad():
            for t in range(5):
                h = gru_cell_step(gru, x[:, t], h)
                steps.append(h)
        np.testing.assert_allclose(torch.stack(steps, 1).numpy(),
                                   ref.detach().numpy(), rtol=1e-5, atol=1e-6)


class TestBatchNorm:
    def test_eval_mode_is_affine(self):
        bn = torch.nn.BatchNorm2d(3)
        bn.eval()
        with torch.no_grad():
            bn.running_mean.copy_(torch.tensor([1.0, -2.0, 0.5]))
            bn.running_var.copy_(torch.tensor([4.0, 1.0, 0.25]))
        x = torch.randn(2, 3, 4, 5)
        y = bn(x)
        scale = bn.weight / torch.sqrt(bn.running_var + bn.eps)
        shift = bn.bias - bn.running_mean * scale
        expected = x * scale.view(1, 3, 1, 1) + shift.view(1, 3, 1, 1)
        assert torch.allclose(y, expected, atol=1e-6)

    def test_train_reduces_to_eval_when_stats_match(self):
        # train mode normalizes with the biased batch variance; eval mode with
        # the stored stats -- equal stats, equal output
        bn = torch.nn.BatchNorm2d(3)
        x = torch.randn(8, 3, 6, 6)
        bn.train()
        y_train = bn(x)
        with torch.no_grad():
            bn.running_mean.copy_(x.mean(dim=(0, 2, 3)))
            bn.running_var.copy_(x.var(dim=(0, 2, 3), unbiased=False))
        bn.eval()
        y_eval = bn(x)
        assert torch.allclose(y_train, y_eval, atol=1e-5)


class TestComplexPacking:
    def test_round_trip(self):
        spec = torch.randn(2, 4, 6) + 1j * torch.randn(2, 4, 6)
        packed = complex_to_channels(spec)
        assert packed.shape == (2, 2, 4, 6)
        assert torch.equal(channels_to_complex(packed), spec)


class TestGradCheck:
    def test_primitive_suite_passes(self):
        for name, tol, result in primitive_suite(seed=0):
            assert result.passed(tol), (
                f"{name}: {result.max_rel_err:.3e} >= {tol} at {result.worst_coord}")

    def test_linear_is_nearly_exact(self):
        results = dict((n, r) for n, _, r in primitive_suite(seed=1))
        assert results["pointwise_linear"].max_rel_err < 1e-6

    def test_detects_wrong_gradient(self):
        # an op whose autograd is deliberately broken must be flagged
        x = torch.randn(10, dtype=torch.float64)

        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, inp):
                ctx.save_for_backward(inp)
                return (inp ** 2).sum()

            @staticmethod
            def backward(ctx, grad):
                (inp,) = ctx.saved_tensors
                return grad * 3.0 * inp  # should be 2x

        res = grad_check(lambda: Bad.apply(x), {"x": x}, name="bad")
        assert res.max_rel_err > 0.1

    def test_nonfinite_gradient_reported(self):
        x = torch.tensor([0.0, 1.0], dtype=torch.float64)
        with pytest.raises(GradCheckError, match="x"):
            grad_check(lambda: torch.sqrt(x).sum(), {"x": x}, name="sqrt0")

    def test_five_seed_sweep(self):
        for seed in range(5):
            for name, tol, result in primitive_suite(seed=seed):
                assert result.passed(tol), f"seed {seed}: {name}"
