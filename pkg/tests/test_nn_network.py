"""Network-level behavior: shapes, losses, the composed gradient check, Adam,
training determinism, and the model container."""

import time

import numpy as np
import numpy.testing as npt
import pytest

from lungcad.errors import CorruptModelError, ModeMismatchError
from lungcad.nn import (
    BCE, DETECTOR, REGRESSOR, SQUARED_ERROR, AdamState, ModelParams, Network,
    NetworkSpec, adam_step, load_model, loss_and_gradients, model_forward, save_model,
)


def tiny_spec(mode=DETECTOR):
    # two groups with filters (4, 8), input 8x8x4
    return NetworkSpec(mode=mode, input_dims=(8, 8, 4), width_divisor=16,
                       convs_per_group=(1, 1), dense_units=8, dropout_rate=0.5)


class TestArchitecture:
    def test_full_width_flatten_is_4096(self):
        spec = NetworkSpec(mode=DETECTOR, input_dims=(32, 32, 16), width_divisor=1,
                           convs_per_group=(1, 1, 2, 2))
        assert spec.widths == (64, 128, 256, 512)
        assert spec.feature_len == 2 * 2 * 2 * 512 == 4096

    def test_large_scale_flatten_is_32768(self):
        spec = NetworkSpec(mode=DETECTOR, input_dims=(64, 64, 32), width_divisor=1)
        assert spec.feature_dims == (4, 4, 4)
        assert spec.feature_len == 32768

    def test_desk_scale_widths(self):
        spec = NetworkSpec(mode=DETECTOR, width_divisor=8)
        assert spec.widths == (8, 16, 32, 64)
        assert spec.feature_len == 2 * 2 * 2 * 64

    def test_param_shapes_follow_chain(self):
        spec = tiny_spec()
        shapes = Network(spec).param_shapes()
        assert shapes["g1.conv1.w"] == (3, 3, 3, 1, 4)
        assert shapes["g2.conv1.w"] == (3, 3, 3, 4, 8)
        assert shapes["fc1.w"] == (2 * 2 * 2 * 8, 8)
        assert shapes["out.w"] == (8, 1)

    def test_detector_output_in_open_unit_interval(self, rng):
        model = ModelParams.create(tiny_spec(), seed=0)
        x = rng.uniform(0, 1, size=(3, 8, 8, 4, 1)).astype(np.float32)
        out = model_forward(model, x, "infer")
        assert np.all(out > 0) and np.all(out < 1)

    def test_regressor_has_no_sigmoid(self):
        spec = tiny_spec(REGRESSOR)
        names = [layer.name for layer in Network(spec).layers]
        assert "out.sigmoid" not in names and names[-1] == "out"

    def test_infer_deterministic(self, rng):
        model = ModelParams.create(tiny_spec(), seed=1)
        x = rng.uniform(0, 1, size=(2, 8, 8, 4, 1)).astype(np.float32)
        a = model_forward(model, x, "infer")
        b = model_forward(model, x, "infer")
        npt.assert_array_equal(a, b)

    def test_input_shape_checked(self, rng):
        model = ModelParams.create(tiny_spec(), seed=1)
        with pytest.raises(ValueError):
            model_forward(model, rng.normal(size=(1, 8, 8, 5, 1)))


class TestLosses:
    def test_bce_at_half(self):
        model = ModelParams.create(tiny_spec(), seed=0, dtype=np.float64)
        # force output 0.5 by zeroing the final dense layer
        model.tensors["out.w"][:] = 0.0
        model.tensors["out.b"][:] = 0.0
        x = np.random.default_rng(0).uniform(0, 1, size=(1, 8, 8, 4, 1))
        value, _ = loss_and_gradients(model, x, np.array([1.0]), BCE,
                                      np.random.default_rng(0))
        npt.assert_allclose(value, np.log(2.0), atol=1e-12)

    def test_squared_error_zero_at_match(self):
        # dropout off so the train-mode prediction is reproducible
        spec = NetworkSpec(mode=REGRESSOR, input_dims=(8, 8, 4), width_divisor=16,
                           convs_per_group=(1, 1), dense_units=8, dropout_rate=0.0)
        model = ModelParams.create(spec, seed=0, dtype=np.float64)
        x = np.random.default_rng(0).uniform(0, 1, size=(2, 8, 8, 4, 1))
        out, _ = model.network().forward(model.tensors, x, "train", None)
        value, grads = loss_and_gradients(model, x, out[:, 0], SQUARED_ERROR,
                                          np.random.default_rng(0))
        assert value < 1e-18
        assert abs(grads["out.b"][0]) < 1e-9

    def test_target_shape_mismatch(self):
        model = ModelParams.create(tiny_spec(), seed=0)
        x = np.zeros((2, 8, 8, 4, 1), np.float32)
        with pytest.raises(ValueError):
            loss_and_gradients(model, x, np.zeros(3), BCE, np.random.default_rng(0))


class TestComposedGradientCheck:
    def test_miniature_network_bce(self):
        started = time.perf_counter()
        spec = tiny_spec()
        model = ModelParams.create(spec, seed=20240811, dtype=np.float64)
        rng0 = np.random.default_rng(77)
        x = rng0.uniform(0.1, 0.9, size=(2, 8, 8, 4, 1))
        targets = np.array([1.0, 0.0])
        seed = 4242
        value, grads = loss_and_gradients(model, x, targets, BCE,
                                          np.random.default_rng(seed))

        def loss_only():
            out, _ = model.network().forward(model.tensors, x, "train",
                                             np.random.default_rng(seed))
            p = np.clip(out[:, 0], 1e-7, 1 - 1e-7)
            return float(-np.mean(targets * np.log(p) + (1 - targets) * np.log(1 - p)))

        npt.assert_allclose(loss_only(), value, atol=1e-12)
        h = 1e-5
        worst = 0.0
        for name in sorted(grads):
            tensor = model.tensors[name]
            flat = tensor.reshape(-1)
            gflat = grads[name].reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                fp = loss_only()
                flat[i] = old - h
                fm = loss_only()
                flat[i] = old
                fd = (fp - fm) / (2 * h)
                denom = max(abs(fd), abs(gflat[i]), 1e-6)
                worst = max(worst, abs(fd - gflat[i]) / denom)
        assert worst < 1e-3, f"max relative gradient error {worst:.2e}"
        assert time.perf_counter() - started < 60.0


class TestAdam:
    def test_zero_gradients_no_change(self):
        params = {"w": np.array([1.0, -2.0], np.float32)}
        state = AdamState(lr=1e-4)
        adam_step(params, {"w": np.zeros(2)}, state)
        npt.assert_array_equal(params["w"], [1.0, -2.0])

    def test_first_step_magnitude(self):
        params = {"w": np.array([0.0], np.float64)}
        state = AdamState(lr=1e-4)
        adam_step(params, {"w": np.array([1.0])}, state)
        # bias-corrected first step: -lr * 1 / (1 + eps)
        npt.assert_allclose(params["w"][0], -1e-4 / (1 + 1e-8), rtol=1e-9)
        assert state.step == 1

    def test_sign_symmetry(self):
        params = {"a": np.array([0.0]), "b": np.array([0.0])}
        state = AdamState(lr=1e-3)
        adam_step(params, {"a": np.array([0.7]), "b": np.array([-0.7])}, state)
        npt.assert_allclose(params["a"], -params["b"], atol=1e-15)


class TestTrainingDeterminism:
    def test_bitwise_identical_runs(self):
        def train_once():
            model = ModelParams.create(tiny_spec(), seed=5)
            state = AdamState(lr=1e-3)
            rng = np.random.default_rng(99)
            for _ in range(5):
                x = rng.uniform(0, 1, size=(4, 8, 8, 4, 1)).astype(np.float32)
                t = (rng.random(4) > 0.5).astype(np.float32)
                _, grads = loss_and_gradients(model, x, t, BCE, rng)
                adam_step(model.tensors, grads, state)
            return model

        a, b = train_once(), train_once()
        for name in a.tensors:
            npt.assert_array_equal(a.tensors[name], b.tensors[name])


class TestModelContainer:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = ModelParams.create(tiny_spec(), seed=3)
        path = tmp_path / "m.ncad"
        save_model(model, path)
        back = load_model(path)
        assert back.spec == model.spec
        assert set(back.tensors) == set(model.tensors)
        for name in model.tensors:
            npt.assert_array_equal(back.tensors[name], model.tensors[name])

    def test_truncated_rejected(self, tmp_path):
        model = ModelParams.create(tiny_spec(), seed=3)
        path = tmp_path / "m.ncad"
        save_model(model, path)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(CorruptModelError):
            load_model(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.ncad"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CorruptModelError):
            load_model(path)

    def test_mode_mismatch(self, tmp_path):
        model = ModelParams.create(tiny_spec(DETECTOR), seed=3)
        path = tmp_path / "m.ncad"
        save_model(model, path)
        with pytest.raises(ModeMismatchError):
            load_model(path, expect_mode=REGRESSOR)
