import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import SMALL_NET
from weakcount.model import ConvBlock, NetworkConfig, backward, dumps_model, forward, init_params, loads_model
from weakcount.quant import (ACC_LIMIT, FakeQuantizer, QParams, act_names, calibrate, calibrate_and_quantize,
                             choose_qparams, fake_quant_forward, freeze, qforward, qforward_logits_q,
                             quantize_multiplier, requantize, weight_qparams)
from weakcount.train import calibration_slices

M2_LIKE = NetworkConfig(input_len=360, conv=(ConvBlock(9, 64, 2),) * 3, hidden=68)
RAM_REFERENCE = 14 * 1024


class TestQParams:
    def test_constant_weights_exact(self):
        for c in (0.37, -2.5, 0.0):
            w = np.full((4, 3), c)
            qp = weight_qparams(w)
            np.testing.assert_array_equal(qp.dequantize(qp.quantize(w)), w)

    def test_uniform_weights_error_bound(self, rng):
        w = rng.uniform(-1, 1, 10000)
        w[:2] = [-1.0, 1.0]
        qp = weight_qparams(w)
        err = np.max(np.abs(qp.dequantize(qp.quantize(w)) - w))
        assert err <= 1 / 255 + 1e-15

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-50, 0), st.floats(0, 50))
    def test_range_covers_and_contains_zero(self, lo, hi):
        qp = choose_qparams(lo, hi)
        step = qp.scale
        assert qp.lo <= lo + step and qp.hi >= hi - step
        assert qp.dequantize(qp.quantize(0.0)) == 0.0

    def test_fake_mask(self):
        qp = QParams(0.1, 0)
        out, mask = qp.fake(np.array([-20.0, 0.04, 5.0, 20.0]))
        np.testing.assert_array_equal(mask, [False, True, True, False])
        np.testing.assert_allclose(out, [-12.8, 0.0, 5.0, 12.7])

    def test_multiplier(self):
        for m in (0.5, 1e-4, 0.123456, 1.7):
            mant, shift = quantize_multiplier(m)
            assert mant < 2**31
            assert abs(mant * 2.0**-shift - m) <= m * 2**-30

    def test_requantize_rounding(self):
        mant, shift = quantize_multiplier(0.25)
        out = requantize(np.array([6, -6, 1000]), mant, shift, 3, -128, 127)
        np.testing.assert_array_equal(out, [5, 2, 127])


class TestCalibrate:
    def test_empty_calibration(self):
        with pytest.raises(ValueError):
            calibrate(init_params(SMALL_NET, 0), np.zeros((0, 232)))

    def test_relu6_ranges_within_clip(self, rng):
        params = init_params(SMALL_NET, 0)
        fq = calibrate(params, rng.normal(0, 60, (200, 232)))
        for name in act_names(SMALL_NET):
            if name.startswith("conv") or name == "fc0":
                qp = fq.act_qparams[name]
                assert qp.lo >= -1e-12 and qp.hi <= 6.0 + 1e-12

    def test_ceiling_option(self, rng):
        params = init_params(SMALL_NET, 0)
        fq = calibrate(params, rng.normal(0, 60, (200, 232)), relu_ceiling=4.0)
        assert fq.act_qparams["conv0"].hi <= 4.0 + 1e-12

    def test_deterministic(self, rng):
        params = init_params(SMALL_NET, 0)
        x = rng.normal(0, 20, (64, 232))
        a = calibrate_and_quantize(params, x)
        b = calibrate_and_quantize(params, x)
        assert dumps_model(params, a) == dumps_model(params, b)


class TestFakeQuant:
    def test_many_bits_approach_float(self, rng):
        params = init_params(SMALL_NET, 0)
        x = rng.normal(0, 20, (32, 232))
        fq = calibrate(params, x, bits=20)
        assert np.max(np.abs(fake_quant_forward(params, x, fq) - forward(params, x))) < 1e-3

    def test_ste_gradient_matches_float(self, rng):
        net = NetworkConfig(input_len=24, conv=(ConvBlock(3, 3, 2),), hidden=5)
        params = init_params(net, 0)
        for k in params.tensors:
            params.tensors[k] += rng.normal(0, 0.1, params.tensors[k].shape)
        x = rng.normal(0, 1, (4, 24))
        obs = calibrate(params, x, bits=24)
        # widen every activation range so all values sit strictly inside it
        fq = FakeQuantizer({k: choose_qparams(q.lo - 1.0, q.hi + 1.0, 24) for k, q in obs.act_qparams.items()},
                           bits=24)
        fq.refresh_weights(params)
        up = rng.normal(size=(4, 2))
        _, tape = forward(params, x, fq, record=True)
        g, _ = backward(params, tape, grad_probs=up)
        h = 1e-5
        theta = params.flat()
        num = np.empty_like(theta)
        for i in range(len(theta)):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h
            tm[i] -= h
            num[i] = (np.sum(up * forward(params.assign_flat(tp), x)) - np.sum(up * forward(params.assign_flat(tm), x))) / (2 * h)
        ana = g.flat()
        assert np.max(np.abs(ana - num) / np.maximum(np.abs(ana) + np.abs(num), 1e-6)) < 1e-3

    def test_out_of_range_weight_gets_no_gradient(self, rng):
        params = init_params(SMALL_NET, 0)
        x = rng.normal(0, 20, (8, 232))
        fq = calibrate(params, x)
        params.tensors["fc0.w"][3, 2] = 100.0  # outside the frozen weight range
        _, tape = forward(params, x, fq, record=True)
        g, _ = backward(params, tape, grad_probs=rng.normal(size=(8, 2)))
        assert g["fc0.w"][3, 2] == 0.0
        assert np.any(g["fc0.w"] != 0.0)


class TestIntegerPath:
    def test_zero_model_uniform(self):
        params = init_params(SMALL_NET, 0).zeros_like()
        qm = calibrate_and_quantize(params, np.zeros((4, 232)))
        np.testing.assert_allclose(qforward(qm, np.zeros(232)), 0.5, atol=1e-15)

    def test_shape_check(self, trained_member):
        with pytest.raises(ValueError):
            qforward(trained_member.quantized, np.zeros(100))

    def test_int32_logits(self, trained_member, small_data):
        x = calibration_slices(small_data.validation, limit=50)
        assert qforward_logits_q(trained_member.quantized, x).dtype == np.int32

    def test_accumulator_bound(self, trained_member):
        assert 0 < trained_member.quantized.acc_bound <= ACC_LIMIT

    def test_dequantized_weights_within_one_step(self, trained_member):
        qm = trained_member.quantized
        names = [f"conv{i}" for i in range(len(SMALL_NET.conv))] + ["fc0", "fc1"]
        for name, layer in zip(names, qm.layers):
            w = trained_member.params[f"{name}.w"]
            assert np.max(np.abs(layer.w_qp.dequantize(layer.w) - w)) <= layer.w_qp.scale * (1 + 1e-9)

    def test_argmax_agreement_with_fake_quant(self, trained_member, small_bench):
        from weakcount.preprocess import MetricConfig
        from weakcount.train import prepare_bags

        bags = prepare_bags(small_bench, MetricConfig(), warn=False)
        x = calibration_slices(bags, limit=1000, seed=1)
        assert len(x) == 1000
        params = trained_member.params
        fq = calibrate(params, calibration_slices(bags, limit=500, seed=2))
        qm = freeze(params, fq)
        agree = np.mean(qforward(qm, x).argmax(1) == fake_quant_forward(params, x, fq).argmax(1))
        assert agree >= 0.99

    def test_deterministic(self, trained_member, small_data):
        x = calibration_slices(small_data.validation, limit=100)
        a = qforward(trained_member.quantized, x)
        b = qforward(trained_member.quantized, x)
        assert a.tobytes() == b.tobytes()

    def test_serialization_bit_exact(self, trained_member, small_data):
        params, qm = trained_member.params, trained_member.quantized
        data = dumps_model(params, qm)
        _, back, _ = loads_model(data)
        assert dumps_model(params, back) == data
        x = calibration_slices(small_data.validation, limit=100)
        assert qforward(back, x).tobytes() == qforward(qm, x).tobytes()

    def test_m2_like_scratch_within_reference(self, rng):
        qm = calibrate_and_quantize(init_params(M2_LIKE, 0), rng.normal(0, 20, (16, 360)))
        assert qm.scratch_bytes() <= RAM_REFERENCE

    def test_overflow_detected(self, rng):
        params = init_params(SMALL_NET, 0)
        fq = calibrate(params, rng.normal(0, 20, (16, 232)))
        qm = freeze(params, fq)
        layer = qm.layers[-1]
        layer.bias[:] = ACC_LIMIT
        with pytest.raises(OverflowError):
            type(qm)(qm.config, qm.input_qp, qm.layers)


class TestFrozenQuantizer:
    def test_fake_quantizer_round_trip(self, trained_member, small_bench):
        qm = trained_member.quantized
        fq = qm.fake_quantizer()
        again = freeze(trained_member.params, fq)
        for a, b in zip(qm.layers, again.layers):
            np.testing.assert_array_equal(a.w, b.w)
            np.testing.assert_array_equal(a.bias, b.bias)
            assert (a.mant, a.shift) == (b.mant, b.shift)
