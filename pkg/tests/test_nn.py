import numpy as np
import pytest

from georag.errors import FormatError, UsageError
from georag.nn import (AdamWState, DenseLayer, MlpSpec, StepLrSchedule,
                       adamw_step, init_mlp, load_checkpoint, lr_step,
                       mlp_backward, mlp_forward, save_checkpoint)


def identity_layer(n):
    return DenseLayer(np.eye(n, dtype=np.float32), np.zeros(n, dtype=np.float32))


class TestForward:
    def test_identity(self):
        spec = MlpSpec([3, 3], activations=["none"])
        x = np.array([[1.0, -2.0, 0.5]], dtype=np.float32)
        y, _ = mlp_forward(spec, [identity_layer(3)], x)
        assert np.array_equal(y, x)

    def test_relu_clips_negative(self):
        spec = MlpSpec([1, 1], activations=["relu"])
        y, _ = mlp_forward(spec, [identity_layer(1)],
                           np.array([[-1.0]], dtype=np.float32))
        assert y[0, 0] == 0.0

    def test_two_layer_against_hand_computation(self):
        # independent elementwise oracle for a fixed 3x2 input
        w1 = np.array([[1.0, -1.0], [0.5, 2.0]], dtype=np.float64)
        b1 = np.array([0.1, -0.2], dtype=np.float64)
        w2 = np.array([[2.0, 1.0]], dtype=np.float64)
        b2 = np.array([0.5], dtype=np.float64)
        x = np.array([[1.0, 2.0], [-1.0, 0.5], [0.0, -3.0]], dtype=np.float64)
        spec = MlpSpec([2, 2, 1])
        y, _ = mlp_forward(spec, [DenseLayer(w1, b1), DenseLayer(w2, b2)], x)
        for r in range(3):
            h = [max(0.0, w1[i, 0] * x[r, 0] + w1[i, 1] * x[r, 1] + b1[i])
                 for i in range(2)]
            expected = w2[0, 0] * h[0] + w2[0, 1] * h[1] + b2[0]
            assert y[r, 0] == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch(self):
        spec = MlpSpec([3, 3])
        with pytest.raises(UsageError):
            mlp_forward(spec, [identity_layer(3)], np.zeros((2, 4)))


def finite_diff_check(dims, seed, dtype, step, tol):
    rng = np.random.default_rng(seed)
    spec = MlpSpec(dims)
    layers = init_mlp(spec, rng, dtype=dtype)
    x = rng.normal(size=(4, dims[0])).astype(dtype)
    upstream = rng.normal(size=(4, dims[-1])).astype(dtype)

    def loss():
        y, _ = mlp_forward(spec, layers, x)
        return float((y * upstream).sum())

    _, cache = mlp_forward(spec, layers, x)
    grads, _ = mlp_backward(cache, upstream)
    for li, layer in enumerate(layers):
        for arr, grad in ((layer.weight, grads[li][0]), (layer.bias, grads[li][1])):
            flat = arr.reshape(-1)
            gflat = np.asarray(grad).reshape(-1)
            idx = np.random.default_rng(seed + li).choice(
                flat.size, size=min(4, flat.size), replace=False)
            for ei in idx:
                orig = flat[ei]
                flat[ei] = orig + step
                lp = loss()
                flat[ei] = orig - step
                lm = loss()
                flat[ei] = orig
                num = (lp - lm) / (2 * step)
                rel = abs(num - gflat[ei]) / max(1e-6, abs(num), abs(gflat[ei]))
                assert rel < tol, f"layer {li}, elem {ei}: rel {rel}"


class TestBackward:
    def test_zero_upstream(self):
        rng = np.random.default_rng(0)
        spec = MlpSpec([3, 5, 2])
        layers = init_mlp(spec, rng)
        _, cache = mlp_forward(spec, layers, rng.normal(size=(4, 3)).astype(np.float32))
        grads, dx = mlp_backward(cache, np.zeros((4, 2), dtype=np.float32))
        assert all(np.all(dw == 0) and np.all(db == 0) for dw, db in grads)
        assert np.all(dx == 0)

    def test_finite_difference_float32(self):
        finite_diff_check([3, 6, 2], seed=1, dtype=np.float32, step=1e-3, tol=1e-2)

    def test_finite_difference_float64(self):
        finite_diff_check([3, 6, 2], seed=2, dtype=np.float64, step=1e-5, tol=1e-5)

    def test_linear_layer_closed_form(self):
        rng = np.random.default_rng(3)
        spec = MlpSpec([4, 3], activations=["none"])
        layers = init_mlp(spec, rng, dtype=np.float64)
        x = rng.normal(size=(5, 4))
        upstream = rng.normal(size=(5, 3))
        _, cache = mlp_forward(spec, layers, x)
        grads, dx = mlp_backward(cache, upstream)
        assert np.allclose(grads[0][0], upstream.T @ x)
        assert np.allclose(grads[0][1], upstream.sum(axis=0))
        assert np.allclose(dx, upstream @ layers[0].weight)

    def test_upstream_shape_check(self):
        rng = np.random.default_rng(4)
        spec = MlpSpec([3, 2])
        layers = init_mlp(spec, rng)
        _, cache = mlp_forward(spec, layers, rng.normal(size=(4, 3)).astype(np.float32))
        with pytest.raises(UsageError):
            mlp_backward(cache, np.zeros((4, 3), dtype=np.float32))


class TestAdamW:
    def test_zero_grad_identity(self):
        p = np.array([1.0, -2.0])
        state = AdamWState(lr=0.1, weight_decay=0.0)
        adamw_step(state, [p], [np.zeros(2)])
        assert np.array_equal(p, [1.0, -2.0])

    def test_scalar_hand_recurrence(self):
        # one step, g = 1: m = 0.1, v = 0.001, mhat = 1, vhat = 1
        p = np.array(2.0)
        lr = 0.01
        state = AdamWState(lr=lr, weight_decay=0.0)
        adamw_step(state, [p], [np.array(1.0)])
        expected = 2.0 - lr * 1.0 / (np.sqrt(1.0) + 1e-8)
        assert p == pytest.approx(expected, rel=1e-12)

    def test_weight_decay_only(self):
        p = np.array(5.0)
        state = AdamWState(lr=1.0, weight_decay=0.1)
        adamw_step(state, [p], [np.array(0.0)])
        assert p == pytest.approx(4.5, rel=1e-12)

    def test_lr_zero_is_identity(self):
        rng = np.random.default_rng(5)
        p = rng.normal(size=(3, 3))
        before = p.copy()
        state = AdamWState(lr=0.0, weight_decay=0.01)
        adamw_step(state, [p], [rng.normal(size=(3, 3))])
        assert np.array_equal(p, before)


class TestSchedule:
    def test_epoch_zero(self):
        assert lr_step(StepLrSchedule(3e-5), 0) == 3e-5

    def test_epoch_one(self):
        assert lr_step(StepLrSchedule(3e-5, gamma=0.87), 1) == pytest.approx(3e-5 * 0.87)

    def test_gamma_one_constant(self):
        sched = StepLrSchedule(0.1, gamma=1.0)
        assert lr_step(sched, 17) == 0.1

    def test_bad_gamma(self):
        with pytest.raises(UsageError):
            StepLrSchedule(0.1, gamma=0.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        tensors = {"a/weight": rng.normal(size=(3, 2)).astype(np.float32),
                   "a/bias": rng.normal(size=3).astype(np.float32),
                   "t": np.array(3.99, dtype=np.float32)}
        path = tmp_path / "model.g3nn"
        save_checkpoint(path, tensors, header={"seed": 5})
        loaded, header = load_checkpoint(path)
        assert header == {"seed": 5}
        assert set(loaded) == set(tensors)
        for name in tensors:
            assert np.array_equal(loaded[name], tensors[name])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.g3nn"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "model.g3nn"
        save_checkpoint(path, {"w": np.ones((4, 4), dtype=np.float32)})
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(FormatError):
            load_checkpoint(path)
