import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_tiny_net
from weakcount.model import (ConvBlock, NetworkConfig, backward, dumps_model, forward, init_params, load_model,
                             loads_model, param_count, save_model)
from weakcount.container import ContainerError


class Recorder:
    """Quantizer hook that only records activations."""

    def __init__(self):
        self.acts = {}

    def weight(self, name, w):
        return w, None

    def act(self, name, a):
        self.acts[name] = a.copy()
        return a, None


def _fd_grads(params, x, upstream, h=1e-5):
    """Central differences of sum(upstream * logits-side objective) via log-probs."""
    def obj(p, xx):
        return float(np.sum(upstream * forward(p, xx)))

    theta = params.flat()
    num = np.empty_like(theta)
    for i in range(len(theta)):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        num[i] = (obj(params.assign_flat(tp), x) - obj(params.assign_flat(tm), x)) / (2 * h)
    dx = np.empty_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        dx[idx] = (obj(params, xp) - obj(params, xm)) / (2 * h)
    return num, dx


def _rel(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-6)))


class TestConfig:
    def test_dense_only_count(self):
        cfg = NetworkConfig(input_len=10, conv=(), hidden=5)
        shapes = cfg.shapes()
        assert np.prod(shapes["fc0.w"]) + np.prod(shapes["fc0.b"]) == 55

    def test_single_conv_count(self):
        shapes = NetworkConfig(conv=(ConvBlock(9, 18, 1),)).shapes()
        assert np.prod(shapes["conv0.w"]) + np.prod(shapes["conv0.b"]) == 180

    def test_reference_count(self):
        # documented reference configuration; the published network reports 33242
        assert param_count(NetworkConfig()) == 33182

    def test_too_short_input_rejected(self):
        with pytest.raises(ValueError):
            NetworkConfig(input_len=10, conv=(ConvBlock(9, 4, 2), ConvBlock(9, 4, 2)))

    def test_single_category_rejected(self):
        with pytest.raises(ValueError):
            NetworkConfig(n_categories=1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(20, 300), st.lists(st.tuples(st.integers(1, 9), st.integers(1, 4), st.integers(1, 3)),
                                          min_size=0, max_size=3))
    def test_length_arithmetic_matches_simulation(self, n, blocks):
        # simulate valid convolution and pooling on a concrete array
        sim = np.zeros(n)
        lengths = []
        for k, _, pool in blocks:
            if len(sim) - k + 1 < 1:
                return
            sim = np.convolve(sim, np.ones(k), mode="valid")
            conv_len = len(sim)
            sim = sim[: (conv_len // pool) * pool].reshape(-1, pool).max(axis=1) if conv_len // pool else sim[:0]
            if len(sim) < 1:
                return
            lengths.append((conv_len, len(sim)))
        cfg = NetworkConfig(input_len=n, conv=tuple(ConvBlock(*b) for b in blocks), hidden=3)
        assert cfg.layer_lengths() == lengths
        rec = Recorder()
        forward(init_params(cfg, 0), np.zeros(n), rec)
        for i, (conv_len, _) in enumerate(lengths):
            assert rec.acts[f"conv{i}"].shape[1] == conv_len


class TestInit:
    def test_deterministic(self):
        cfg = NetworkConfig()
        a, b = init_params(cfg, 3), init_params(cfg, 3)
        np.testing.assert_array_equal(a.flat(), b.flat())

    def test_seeds_differ(self):
        cfg = NetworkConfig()
        assert not np.array_equal(init_params(cfg, 1).flat(), init_params(cfg, 2).flat())

    def test_finite_zero_bias_bounded(self):
        p = init_params(NetworkConfig(), 0)
        assert p.is_finite()
        for name, v in p.tensors.items():
            if name.endswith(".b"):
                assert np.all(v == 0)
            else:
                fan_in = v.shape[1] * v.shape[2] if v.ndim == 3 else v.shape[0]
                assert np.max(np.abs(v)) <= np.sqrt(6 / fan_in)


class TestForward:
    def test_normalized(self, rng):
        p = init_params(NetworkConfig(n_categories=3), 0)
        out = forward(p, rng.normal(0, 20, (16, 232)))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert np.all((out >= 0) & (out <= 1))

    def test_single_slice(self, rng):
        p = init_params(NetworkConfig(), 0)
        x = rng.normal(0, 5, 232)
        np.testing.assert_array_equal(forward(p, x), forward(p, x[None])[0])

    def test_zero_weights_uniform(self):
        p = init_params(NetworkConfig(n_categories=3), 0).zeros_like()
        np.testing.assert_allclose(forward(p, np.zeros(232)), 1 / 3, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward(init_params(NetworkConfig(), 0), np.zeros(231))

    def test_continuity(self, rng):
        p = init_params(NetworkConfig(), 0)
        x = rng.normal(0, 5, 232)
        d = rng.standard_normal(232)
        d *= 1e-6 / np.linalg.norm(d)
        assert np.max(np.abs(forward(p, x) - forward(p, x + d))) < 1e-3

    def test_large_inputs_stay_finite(self, rng):
        p = init_params(NetworkConfig(), 0)
        out = forward(p, rng.uniform(-1e4, 1e4, (8, 232)))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_relu6_bounds_activations(self, rng):
        p = init_params(NetworkConfig(), 0)
        rec = Recorder()
        forward(p, rng.normal(0, 40, (8, 232)), rec)
        for name in ("conv0", "conv1", "conv2", "fc0"):
            assert rec.acts[name].min() >= 0.0 and rec.acts[name].max() <= 6.0
        assert rec.acts["conv0"].max() == 6.0  # large inputs saturate


class TestBackward:
    def test_missing_tape(self):
        with pytest.raises(ValueError):
            backward(init_params(NetworkConfig(), 0), None, grad_logits=np.zeros((1, 2)))

    def test_zero_upstream(self, rng):
        p = init_params(NetworkConfig(), 0)
        _, tape = forward(p, rng.normal(0, 5, (3, 232)), record=True)
        g, dx = backward(p, tape, grad_logits=np.zeros((3, 2)))
        assert np.all(g.flat() == 0)
        assert np.all(dx == 0)

    def test_zero_weight_input_gradient(self, rng):
        p = init_params(NetworkConfig(), 0).zeros_like()
        _, tape = forward(p, rng.normal(0, 5, (2, 232)), record=True)
        _, dx = backward(p, tape, grad_logits=rng.normal(size=(2, 2)))
        assert np.all(dx == 0)

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        cfg = random_tiny_net(rng)
        p = init_params(cfg, seed)
        for k in p.tensors:
            p.tensors[k] = p.tensors[k] + rng.normal(0, 0.1, p.tensors[k].shape)
        x = rng.normal(0, 1.5, (2, cfg.input_len))
        up = rng.normal(size=(2, cfg.n_categories))
        _, tape = forward(p, x, record=True)
        g, dx = backward(p, tape, grad_probs=up)
        num, num_dx = _fd_grads(p, x, up)
        assert _rel(g.flat(), num) < 1e-4
        assert _rel(dx, num_dx) < 1e-4


class TestModelFile:
    def test_round_trip(self, tmp_path):
        p = init_params(NetworkConfig(n_categories=3), 4)
        save_model(tmp_path / "m.wcm", p, extra={"note": "x"})
        back, q, extra = load_model(tmp_path / "m.wcm")
        assert back.config == p.config
        assert q is None and extra == {"note": "x"}
        for k in p:
            assert back[k].tobytes() == p[k].tobytes()

    def test_corruption_detected(self):
        data = bytearray(dumps_model(init_params(NetworkConfig(), 0)))
        data[-20] ^= 1
        with pytest.raises(ContainerError):
            loads_model(bytes(data))
