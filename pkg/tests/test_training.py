import math

import numpy as np
import pytest

from complexq2.corpus import encode_bytes, synthetic_text
from complexq2.errors import ConfigurationError
from complexq2.model import PROJECTIONS, model_forward
from complexq2.tensor import ComplexTensor, hermitian_matmul
from complexq2.training import (
    TrainConfig,
    TrainState,
    adamw_step,
    batch_sampler,
    clip_gradients,
    cross_entropy,
    gradient_check,
    loss_and_grads,
    loss_csv,
    lr_at,
    qat_linear_forward,
    train_loop,
)


class TestSchedule:
    cfg = TrainConfig(total_steps=1000)

    def test_warmup_default(self):
        assert self.cfg.warmup_steps == 20

    def test_endpoints(self):
        assert lr_at(0, self.cfg) == 0.0
        assert lr_at(20, self.cfg) == pytest.approx(3e-3)
        assert lr_at(1000, self.cfg) == 0.0
        assert lr_at(501, self.cfg) == pytest.approx(2e-3, rel=0.01)
        assert lr_at(500, self.cfg) == pytest.approx(2e-3)

    def test_stage_one_decays_to_zero(self):
        assert lr_at(499.999, self.cfg) == pytest.approx(0.0, abs=1e-7)
        assert lr_at(10, self.cfg) == pytest.approx(1.5e-3)

    def test_out_of_range(self):
        with pytest.raises(ConfigurationError):
            lr_at(1001, self.cfg)

    def test_state_argument(self):
        assert lr_at(20, TrainState(self.cfg)) == lr_at(20, self.cfg)


class TestOptimizer:
    def test_zero_gradient_weight_decay(self):
        cfg = TrainConfig(total_steps=10, weight_decay_stage1=0.1)
        p = {"w": np.full((2, 2), 3.0)}
        adamw_step(p, {"w": np.zeros((2, 2))}, TrainState(cfg), lr=0.5)
        np.testing.assert_allclose(p["w"], 3.0 * (1 - 0.5 * 0.1))

    def test_gains_are_not_decayed(self):
        cfg = TrainConfig(total_steps=10)
        p = {"g": np.ones(3)}
        adamw_step(p, {"g": np.zeros(3)}, TrainState(cfg), lr=0.5)
        np.testing.assert_array_equal(p["g"], np.ones(3))

    def test_lr_zero_is_noop(self):
        cfg = TrainConfig(total_steps=10)
        rng = np.random.default_rng(0)
        w = rng.standard_normal((3, 3))
        p = {"w": w.copy()}
        adamw_step(p, {"w": rng.standard_normal((3, 3))}, TrainState(cfg), lr=0.0)
        np.testing.assert_array_equal(p["w"], w)

    def test_second_stage_has_no_decay(self):
        cfg = TrainConfig(total_steps=10)
        state = TrainState(cfg, step=6)
        p = {"w": np.ones((2, 2))}
        adamw_step(p, {"w": np.zeros((2, 2))}, state, lr=0.5)
        np.testing.assert_array_equal(p["w"], 1.0)
        assert state.stage == 2

    def test_constant_gradient_steady_state(self):
        # simulate a single scalar parameter by hand
        cfg = TrainConfig(total_steps=1000, weight_decay_stage1=0.0)
        state = TrainState(cfg)
        p = {"w": np.zeros((1, 1))}
        g = 0.37
        m = v = 0.0
        expected = 0.0
        for t in range(1, 201):
            adamw_step(p, {"w": np.full((1, 1), g)}, state, lr=1e-2)
            m = 0.9 * m + 0.1 * g
            v = 0.95 * v + 0.05 * g * g
            expected -= 1e-2 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.95**t)) + 1e-8)
        assert p["w"][0, 0] == pytest.approx(expected, rel=1e-12)
        assert p["w"][0, 0] == pytest.approx(-2.0, rel=1e-6)

    def test_clip_scales_exactly(self):
        grads = {"a": np.array([6.0]), "b": np.array([8.0])}
        clipped, norm = clip_gradients(grads, 1.0)
        assert norm == 10.0
        assert clipped["a"][0] == pytest.approx(0.6) and clipped["b"][0] == pytest.approx(0.8)

    def test_clip_leaves_small_gradients(self):
        grads = {"a": np.array([0.3])}
        assert clip_gradients(grads, 1.0)[0]["a"] is grads["a"]


class TestQatLinear:
    def test_hand_trace(self):
        x = ComplexTensor.from_complex(np.array([[1 + 0.5j, -0.25 + 1j]]))
        w = ComplexTensor.from_complex(np.array([[2 + 0.5j], [-0.2 - 3j]]))
        y = qat_linear_forward(x, w).to_complex()[0, 0]
        assert y == pytest.approx(-1 - 32j / 127, abs=1e-12)

    def test_fixed_point_weights(self):
        rng = np.random.default_rng(1)
        codes = rng.integers(0, 4, size=(6, 4))
        w = ComplexTensor.from_complex(1j ** codes.astype(float)).astype(np.float64)
        w = ComplexTensor(np.round(w.re), np.round(w.im))
        x = ComplexTensor(rng.standard_normal((3, 6)), rng.standard_normal((3, 6)))
        from complexq2.quantize import quantize_dequantize_activation

        expected = hermitian_matmul(quantize_dequantize_activation(x), w)
        np.testing.assert_allclose(qat_linear_forward(x, w).to_complex(), expected.to_complex(), rtol=1e-12)


class TestCrossEntropy:
    def test_uniform_vocab16(self):
        assert cross_entropy(np.zeros((4, 16)), [0, 1, 2, 3]) == pytest.approx(2.7725887, abs=1e-6)


def family(name: str) -> str:
    parts = name.split(".")
    return parts[2] if len(parts) == 4 else parts[-1]


class TestGradients:
    def test_full_model_gradient_check(self, tiny_model):
        rng = np.random.default_rng(5)
        x = rng.integers(0, 16, size=(2, 6))
        y = rng.integers(0, 16, size=(2, 6))
        results = gradient_check(tiny_model, x, y, n_samples=50, seed=1)
        assert len(results) >= 50
        families = {family(r["name"]) for r in results}
        assert set(PROJECTIONS) <= families
        assert {"embed_re", "w_out", "norm_re", "attn_norm_re", "ffn_norm_im"} <= families
        assert max(r["rel_err"] for r in results) < 1e-4

    def test_gradients_cover_every_parameter(self, tiny_model):
        x = np.array([[1, 2, 3, 4]])
        _, grads = loss_and_grads(tiny_model, x, x, "qat")
        names = [n for n, _ in tiny_model.named_parameters()]
        assert set(grads) == set(names)
        for n in names:
            assert np.any(grads[n] != 0), n


class TestData:
    def test_sampler_windows(self):
        tokens = np.arange(50)
        x, y = next(batch_sampler(tokens, 4, 10, seed=0))
        assert x.shape == y.shape == (4, 10)
        np.testing.assert_array_equal(y, x + 1)

    def test_corpus_too_short(self):
        with pytest.raises(ConfigurationError):
            next(batch_sampler(np.arange(5), 1, 10, seed=0))


class TestTrainLoop:
    def test_short_run_deterministic(self, tiny_config):
        tokens = encode_bytes(synthetic_text(4000, seed=2)) % 16
        cfg = TrainConfig(total_steps=12, batch_size=2, seq_len=8, seed=3)
        a = train_loop(tokens, tiny_config, cfg)
        b = train_loop(tokens, tiny_config, cfg)
        assert loss_csv(a.trace) == loss_csv(b.trace)
        assert a.trace[0].lr == 0.0
        assert a.trace[0].loss == pytest.approx(math.log(16), rel=0.1)
        ids = np.arange(8)
        np.testing.assert_array_equal(model_forward(ids, a.model, "qat"), model_forward(ids, b.model, "qat"))

    def test_loss_csv_columns(self, tiny_config):
        tokens = np.arange(200) % 16
        result = train_loop(tokens, tiny_config, TrainConfig(total_steps=2, batch_size=1, seq_len=4, mode="full_precision"))
        lines = loss_csv(result.trace).splitlines()
        assert lines[0] == "step,lr,loss,mode"
        assert lines[1].startswith("0,0.0,") and lines[1].endswith(",full_precision")

    def test_seq_len_beyond_model(self, tiny_config):
        with pytest.raises(ConfigurationError):
            train_loop(np.arange(100) % 16, tiny_config, TrainConfig(total_steps=2, seq_len=32))

    def test_vocab_overflow(self, tiny_config):
        with pytest.raises(ConfigurationError):
            train_loop(np.arange(100), tiny_config, TrainConfig(total_steps=2, seq_len=4))

    def test_bad_config(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(mode="int4")
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict({"lr": 1})
