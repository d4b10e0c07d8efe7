"""Block-level tests: receptive-field analytics against hand-derived values,
impulse-gradient support checks, parameter parity, and shape contracts."""

from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glottisnet import blocks as B
from glottisnet import tensor as T
from glottisnet.errors import ConfigError
from glottisnet.tensor import Tensor

FIXTURES = Path(__file__).parent / "fixtures"


class TestReceptiveField:
    def test_three_dilated_convs_reach_17(self):
        report = B.compute_receptive_field([(3, 1, 1), (3, 1, 2), (3, 1, 5)])
        assert report.final == 17
        assert [row.receptive_field for row in report.layers] == [3, 7, 17]

    def test_three_standard_convs_reach_7(self):
        report = B.compute_receptive_field([(3, 1, 1), (3, 1, 1), (3, 1, 1)])
        assert report.final == 7

    def test_single_1x1_conv(self):
        assert B.compute_receptive_field([(1, 1, 1)]).final == 1

    def test_strides_multiply_growth(self):
        # second conv sees stride-2 grid: R = 1 + 2 + 2*2 = 7
        assert B.compute_receptive_field([(3, 2, 1), (3, 1, 1)]).final == 7

    def test_monotone_prefixes(self):
        layers = [(3, 1, 1), (3, 1, 2), (3, 1, 5)]
        finals = [B.compute_receptive_field(layers[: i + 1]).final for i in range(3)]
        assert finals == [3, 7, 17]
        assert all(a < b for a, b in zip(finals, finals[1:]))

    def test_empty_layers_rejected(self):
        with pytest.raises(ConfigError):
            B.compute_receptive_field([])

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            B.compute_receptive_field([(4, 1, 1)])


class TestDilationSchedule:
    def test_1_2_5_passes(self):
        check = B.validate_dilation_schedule(B.DilationSchedule((1, 2, 5), 3))
        assert check.passed
        assert check.d_values == (5, 2, 1)

    def test_2_4_8_fails_with_gap_4(self):
        check = B.validate_dilation_schedule(B.DilationSchedule((2, 4, 8), 3))
        assert not check.passed
        assert check.d_values[1] == 4  # D_2 = max(0, 0, 4)

    def test_single_dense_layer_passes(self):
        assert B.validate_dilation_schedule(B.DilationSchedule((1,), 3)).passed

    def test_single_oversized_rate_fails(self):
        assert not B.validate_dilation_schedule(B.DilationSchedule((5,), 3)).passed

    def test_prefixes_of_1_2_5_pass(self):
        for rates in [(1,), (1, 2), (1, 2, 5)]:
            assert B.validate_dilation_schedule(B.DilationSchedule(rates, 3)).passed

    def test_empty_rates_rejected(self):
        with pytest.raises(ConfigError):
            B.DilationSchedule((), 3)

    def test_report_combines_both_tools(self):
        report = B.rf_report_dict(B.DilationSchedule((1, 2, 5), 3))
        assert report["final_receptive_field"] == 17
        assert report["gap_check"] == "PASS"
        text = B.format_rf_report(report)
        assert "17" in text and "PASS" in text


def _force_positive(block, lo=0.05):
    for _, t in block.named_tensors("b"):
        if t.requires_grad:
            t.data = np.abs(t.data) + lo


def _grad_support(block_fn, in_ch, size, center):
    """Boolean HxW map of input pixels with nonzero gradient at `center`."""
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(0.5, 1.5, (1, in_ch, size, size)), requires_grad=True)
    out = block_fn(x)
    mask = np.zeros(out.shape)
    mask[0, :, center, center] = 1.0
    (out * Tensor(mask)).sum().backward()
    return np.abs(x.grad).max(axis=(0, 1)) > 0


def _window(size, center, half):
    expected = np.zeros((size, size), dtype=bool)
    expected[center - half : center + half + 1, center - half : center + half + 1] = True
    return expected


class TestLightSRM:
    def test_shape_contract(self):
        rng = np.random.default_rng(1)
        block = B.LightSRM(rng, B.LightSRMConfig(16, 16))
        x = Tensor(rng.standard_normal((1, 16, 32, 32)).astype(np.float32))
        out = block(x)
        assert out.shape == (1, 16, 32, 32)

    def test_main_path_impulse_support_is_17x17(self):
        rng = np.random.default_rng(2)
        block = B.LightSRM(rng, B.LightSRMConfig(4, 8), dtype=np.float64)
        _force_positive(block)
        support = _grad_support(lambda x: block.main_path(x), 4, 48, 24)
        assert np.array_equal(support, _window(48, 24, 8))

    def test_full_block_support_with_constant_attention(self):
        rng = np.random.default_rng(3)
        block = B.LightSRM(rng, B.LightSRMConfig(4, 8), dtype=np.float64)
        _force_positive(block)
        # Zeroing the squeeze stage freezes the gate at sigmoid(0) and removes
        # the global spatial coupling the pooled statistics would introduce.
        block.attention.reduce.weight.data[:] = 0.0
        support = _grad_support(lambda x: block(x), 4, 48, 24)
        assert np.array_equal(support, _window(48, 24, 8))

    def test_gridding_schedule_leaves_holes(self):
        rng = np.random.default_rng(4)
        block = B.LightSRM(rng, B.LightSRMConfig(2, 4, dilations=(2, 4, 8)), dtype=np.float64)
        _force_positive(block)
        support = _grad_support(lambda x: block.main_path(x), 2, 64, 32)
        inside = _window(64, 32, 14)
        assert support[~inside].sum() == 0
        assert support[inside].sum() < inside.sum()  # holes between taps

    def test_main_path_param_parity_with_standard_convs(self):
        rng = np.random.default_rng(5)
        dilated = B.LightSRM(rng, B.LightSRMConfig(16, 16, dilations=(1, 2, 5)))
        standard = B.LightSRM(rng, B.LightSRMConfig(16, 16, dilations=(1, 1, 1)))
        assert dilated.main_path_param_count() == standard.main_path_param_count()
        assert dilated.param_count() == standard.param_count()

    def test_analytic_main_path_rf(self):
        rng = np.random.default_rng(6)
        block = B.LightSRM(rng, B.LightSRMConfig(4, 8))
        assert block.main_path_receptive_field().final == 17

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_reaches_every_weight(self, seed):
        rng = np.random.default_rng(100 + seed)
        block = B.LightSRM(rng, B.LightSRMConfig(6, 8))
        x = Tensor(rng.standard_normal((2, 6, 12, 12)).astype(np.float32))
        block(x, training=True).sum().backward()
        for name, t in block.named_tensors("block"):
            if t.requires_grad:
                assert t.grad is not None and np.abs(t.grad).max() > 0, name

    def test_odd_out_channels_with_shortcut_rejected(self):
        with pytest.raises(ConfigError):
            B.LightSRMConfig(4, 7)

    def test_no_shortcut_variant(self):
        rng = np.random.default_rng(7)
        block = B.LightSRM(rng, B.LightSRMConfig(4, 8, with_shortcut=False))
        assert block.shortcut is None
        x = Tensor(rng.standard_normal((1, 4, 16, 16)).astype(np.float32))
        assert block(x).shape == (1, 8, 16, 16)

    @settings(max_examples=25, deadline=None)
    @given(
        in_ch=st.integers(2, 8),
        half_out=st.integers(1, 6),
        with_shortcut=st.booleans(),
        size=st.sampled_from([8, 12, 16]),
        batch=st.integers(1, 2),
    )
    def test_output_shape_is_function_of_config(self, in_ch, half_out, with_shortcut, size, batch):
        rng = np.random.default_rng(11)
        cfg = B.LightSRMConfig(in_ch, 2 * half_out, with_shortcut=with_shortcut)
        block = B.LightSRM(rng, cfg)
        x = Tensor(rng.standard_normal((batch, in_ch, size, size)).astype(np.float32))
        assert block(x).shape == (batch, 2 * half_out, size, size)


class TestChannelAttention:
    def test_zero_input_scale_is_half(self):
        rng = np.random.default_rng(20)
        att = B.ChannelAttention(rng, 8)
        # With zero input the gate is sigmoid(bias-only path); zero the biases
        # so the squeeze output is exactly 0 -> scale exactly 0.5.
        att.reduce.bias.data[:] = 0.0
        att.expand.bias.data[:] = 0.0
        x = Tensor(np.zeros((1, 8, 4, 4), dtype=np.float32))
        out = att(x)
        assert np.array_equal(out.data, np.zeros_like(out.data))
        s = T.sigmoid(att.expand(att.reduce(T.global_avg_pool(x))))
        assert np.allclose(s.data, 0.5)

    @pytest.mark.parametrize("seed", range(5))
    def test_scale_strictly_inside_unit_interval(self, seed):
        rng = np.random.default_rng(30 + seed)
        att = B.ChannelAttention(rng, 6, dtype=np.float64)
        x = Tensor(rng.standard_normal((2, 6, 5, 5)) * 3)
        s = T.sigmoid(att.expand(att.reduce(T.global_avg_pool(x))))
        assert np.all(s.data > 0) and np.all(s.data < 1)

    def test_shape_preserved(self):
        rng = np.random.default_rng(31)
        att = B.ChannelAttention(rng, 6)
        x = Tensor(rng.standard_normal((2, 6, 7, 5)).astype(np.float32))
        assert att(x).shape == (2, 6, 7, 5)

    def test_channel_mismatch_rejected(self):
        rng = np.random.default_rng(32)
        att = B.ChannelAttention(rng, 6)
        with pytest.raises(ConfigError):
            att(Tensor(np.zeros((1, 4, 4, 4), dtype=np.float32)))

    def test_golden_fixture(self):
        att_in = T.load_tensor(FIXTURES / "attention_in.gnt")
        expected = T.load_tensor(FIXTURES / "attention_out.gnt")
        rng = np.random.default_rng(4242)
        att = B.ChannelAttention(rng, att_in.shape[1])
        out = att(att_in)
        assert np.allclose(out.data, expected.data, atol=1e-12)


class TestSPPFAndDWCM:
    def test_sppf_cascade_equals_9_and_13(self):
        rng = np.random.default_rng(40)
        x = Tensor(rng.standard_normal((1, 3, 16, 16)))
        p1 = T.maxpool2d(x, 5, 1, 2)
        p2 = T.maxpool2d(p1, 5, 1, 2)
        p3 = T.maxpool2d(p2, 5, 1, 2)
        assert np.array_equal(p2.data, T.maxpool2d(x, 9, 1, 4).data)
        assert np.array_equal(p3.data, T.maxpool2d(x, 13, 1, 6).data)

    def test_sppf_shape(self):
        rng = np.random.default_rng(41)
        sppf = B.SPPF(rng, 16, 16)
        x = Tensor(rng.standard_normal((1, 16, 8, 8)).astype(np.float32))
        assert sppf(x).shape == (1, 16, 8, 8)

    def test_dwcm_output_channels(self):
        rng = np.random.default_rng(42)
        dwcm = B.DWCM(rng, 8, 12)
        x = Tensor(rng.standard_normal((1, 8, 10, 10)).astype(np.float32))
        assert dwcm(x).shape == (1, 12, 10, 10)

    def test_dwcm_strided(self):
        rng = np.random.default_rng(43)
        dwcm = B.DWCM(rng, 8, 8, stride=2)
        x = Tensor(rng.standard_normal((1, 8, 10, 10)).astype(np.float32))
        assert dwcm(x).shape == (1, 8, 5, 5)

    def test_golden_fixture_sppf(self):
        x = T.load_tensor(FIXTURES / "sppf_in.gnt")
        expected = T.load_tensor(FIXTURES / "sppf_out.gnt")
        rng = np.random.default_rng(4343)
        sppf = B.SPPF(rng, x.shape[1], x.shape[1])
        assert np.allclose(sppf(x).data, expected.data, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(
        in_ch=st.sampled_from([4, 8]),
        out_ch=st.sampled_from([4, 6, 10]),
        size=st.sampled_from([8, 12]),
    )
    def test_dwcm_shape_is_function_of_config(self, in_ch, out_ch, size):
        rng = np.random.default_rng(44)
        dwcm = B.DWCM(rng, in_ch, out_ch)
        x = Tensor(rng.standard_normal((1, in_ch, size, size)).astype(np.float32))
        assert dwcm(x).shape == (1, out_ch, size, size)


class TestParamAndFlopAccounting:
    def test_conv_module_param_count(self):
        rng = np.random.default_rng(50)
        cm = B.ConvModule(rng, 16, 8, 1, norm=False, act=None)
        assert cm.param_count() == 16 * 8 + 8

    def test_depthwise_separable_cheaper_than_dense(self):
        rng = np.random.default_rng(51)
        ds = B.DepthwiseSeparable(rng, 16, 16, k=5)
        dense = B.ConvModule(rng, 16, 16, 5)
        assert ds.param_count() < dense.param_count()
        assert ds.flops(32, 32)[0] < dense.flops(32, 32)[0]

    def test_flops_scale_with_area(self):
        rng = np.random.default_rng(52)
        cm = B.ConvModule(rng, 4, 8, 3)
        f1, _ = cm.flops(16, 16)
        f2, _ = cm.flops(32, 32)
        assert f2 == 4 * f1
