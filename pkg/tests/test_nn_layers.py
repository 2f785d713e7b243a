"""Kernel-level checks: brute-force oracles and per-layer gradient checks."""

import numpy as np
import numpy.testing as npt
import pytest

from lungcad.nn.layers import (
    BatchNorm, Conv3d, Dense, Dropout, Flatten, MaxPool3d, Relu, Sigmoid,
)


def conv3d_oracle(x, w, b):
    """Seven nested loops, zero padding; x is (B, X, Y, Z, C), w is (3,3,3,Ci,Co)."""
    bs, nx, ny, nz, ci = x.shape
    co = w.shape[-1]
    out = np.zeros((bs, nx, ny, nz, co), dtype=x.dtype)
    for bi in range(bs):
        for o in range(co):
            for xx in range(nx):
                for yy in range(ny):
                    for zz in range(nz):
                        acc = b[o]
                        for dx in range(3):
                            for dy in range(3):
                                for dz in range(3):
                                    sx, sy, sz = xx + dx - 1, yy + dy - 1, zz + dz - 1
                                    if 0 <= sx < nx and 0 <= sy < ny and 0 <= sz < nz:
                                        for i in range(ci):
                                            acc += w[dx, dy, dz, i, o] * x[bi, sx, sy, sz, i]
                        out[bi, xx, yy, zz, o] = acc
    return out


def run_conv(x, w, b):
    layer = Conv3d("c", x.shape[-1], w.shape[-1])
    params = {"c.w": w, "c.b": b}
    return layer.forward(x, params, "infer", None, {})


class TestConv3d:
    def test_center_only_kernel_is_identity(self, rng):
        x = rng.normal(size=(2, 4, 4, 3, 1))
        w = np.zeros((3, 3, 3, 1, 1))
        w[1, 1, 1, 0, 0] = 1.0
        out = run_conv(x, w, np.zeros(1))
        npt.assert_allclose(out, x, atol=1e-12)

    def test_all_ones_kernel_counts_neighbors(self):
        x = np.ones((1, 5, 5, 5, 1))
        w = np.ones((3, 3, 3, 1, 1))
        out = run_conv(x, w, np.zeros(1))[0, :, :, :, 0]
        assert out[2, 2, 2] == 27.0  # interior
        assert out[0, 0, 0] == 8.0  # corner: 2x2x2 in-bounds neighborhood

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(7)
        for case in range(50):
            bs = int(rng.integers(1, 3))
            ci = int(rng.integers(1, 4))
            co = int(rng.integers(1, 4))
            nx, ny, nz = (int(rng.integers(1, 7)), int(rng.integers(1, 7)),
                          int(rng.integers(1, 5)))
            x = rng.normal(size=(bs, nx, ny, nz, ci))
            w = rng.normal(size=(3, 3, 3, ci, co))
            b = rng.normal(size=co)
            got = run_conv(x, w, b)
            want = conv3d_oracle(x, w, b)
            assert np.max(np.abs(got - want)) < 1e-10

    def test_linearity_in_input(self, rng):
        x1 = rng.normal(size=(1, 4, 4, 2, 2))
        x2 = rng.normal(size=(1, 4, 4, 2, 2))
        w = rng.normal(size=(3, 3, 3, 2, 3))
        b = rng.normal(size=3)
        lhs = run_conv(x1 + x2, w, b)
        rhs = run_conv(x1, w, b) + run_conv(x2, w, b) - b
        npt.assert_allclose(lhs, rhs, atol=1e-9)

    def test_channel_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            run_conv(rng.normal(size=(1, 2, 2, 2, 2)), rng.normal(size=(3, 3, 3, 1, 1)),
                     np.zeros(1))


def pool_oracle(x, pool):
    bs, nx, ny, nz, c = x.shape
    px, py, pz = pool
    out = np.zeros((bs, nx // px, ny // py, nz // pz, c), x.dtype)
    for bi in range(bs):
        for i in range(nx // px):
            for j in range(ny // py):
                for k in range(nz // pz):
                    win = x[bi, i * px:(i + 1) * px, j * py:(j + 1) * py,
                            k * pz:(k + 1) * pz, :]
                    out[bi, i, j, k] = win.reshape(-1, c).max(axis=0)
    return out


class TestMaxPool3d:
    def test_window_max(self):
        x = np.arange(1, 9, dtype=float).reshape(1, 2, 2, 2, 1)
        layer = MaxPool3d("p", (2, 2, 2))
        out = layer.forward(x, {}, "infer", None, {})
        assert out.reshape(-1).tolist() == [8.0]

    def test_first_pool_shape_rule(self, rng):
        x = rng.normal(size=(1, 32, 32, 16, 1))
        out = MaxPool3d("p", (2, 2, 1)).forward(x, {}, "infer", None, {})
        assert out.shape == (1, 16, 16, 16, 1)

    def test_matches_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            pool = (2, 2, int(rng.integers(1, 3)))
            dims = (int(rng.integers(1, 4)) * 2, int(rng.integers(1, 4)) * 2,
                    int(rng.integers(1, 4)) * pool[2])
            x = rng.normal(size=(2, *dims, 3))
            got = MaxPool3d("p", pool).forward(x, {}, "infer", None, {})
            npt.assert_array_equal(got, pool_oracle(x, pool))

    def test_tie_breaks_to_lowest_offset(self):
        x = np.zeros((1, 2, 2, 2, 1))  # all ties
        layer = MaxPool3d("p", (2, 2, 2))
        cache = {}
        layer.forward(x, {}, "train", None, cache)
        idx, _ = cache["p"]
        assert idx.reshape(-1).tolist() == [0]

    def test_nondivisible_rejected(self, rng):
        with pytest.raises(ValueError):
            MaxPool3d("p", (2, 2, 2)).forward(rng.normal(size=(1, 3, 4, 4, 1)),
                                              {}, "infer", None, {})


class TestBatchNorm:
    def test_train_normalizes(self, rng):
        layer = BatchNorm("bn", 3)
        params = {}
        layer.init(rng, params, np.float64)
        x = rng.normal(loc=5.0, scale=2.5, size=(4, 2, 2, 2, 3))
        out = layer.forward(x, params, "train", None, {})
        npt.assert_allclose(out.mean(axis=(0, 1, 2, 3)), 0.0, atol=1e-7)
        npt.assert_allclose(out.var(axis=(0, 1, 2, 3)), 1.0, atol=1e-3)

    def test_affine_applies(self, rng):
        layer = BatchNorm("bn", 2)
        params = {}
        layer.init(rng, params, np.float64)
        params["bn.gamma"] = np.array([2.0, 2.0])
        params["bn.beta"] = np.array([3.0, 3.0])
        x = rng.normal(size=(8, 1, 1, 1, 2))
        out = layer.forward(x, params, "train", None, {})
        mu = x.mean(axis=(0, 1, 2, 3))
        xhat = (x - mu) / np.sqrt(x.var(axis=(0, 1, 2, 3)) + 1e-5)
        npt.assert_allclose(out, 2.0 * xhat + 3.0, atol=1e-10)

    def test_infer_identity_with_unit_stats(self, rng):
        layer = BatchNorm("bn", 2)
        params = {}
        layer.init(rng, params, np.float64)
        x = rng.normal(size=(3, 2, 2, 2, 2))
        out = layer.forward(x, params, "infer", None, {})
        npt.assert_allclose(out, x, atol=1e-4)  # eps shifts the scale slightly

    def test_running_stats_update(self, rng):
        layer = BatchNorm("bn", 1)
        params = {}
        layer.init(rng, params, np.float64)
        x = np.full((2, 1, 1, 1, 1), 10.0)
        layer.forward(x, params, "train", None, {})
        npt.assert_allclose(params["bn.running_mean"], 0.99 * 0.0 + 0.01 * 10.0)


class TestDropout:
    def test_infer_is_identity(self, rng):
        x = rng.normal(size=(4, 8))
        out = Dropout("d", 0.5).forward(x, {}, "infer", None, {})
        npt.assert_array_equal(out, x)

    def test_inverted_scaling(self):
        rng = np.random.default_rng(3)
        x = np.ones((200, 50))
        out = Dropout("d", 0.5).forward(x, {}, "train", rng, {})
        kept = out[out != 0]
        npt.assert_allclose(kept, 2.0)  # 1 / keep_prob
        assert abs((out != 0).mean() - 0.5) < 0.05

    def test_train_requires_rng(self):
        with pytest.raises(ValueError):
            Dropout("d", 0.5).forward(np.ones((2, 2)), {}, "train", None, {})


# --- per-layer gradient checks ----------------------------------------------

def fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_layer_grads(layer, params, x, mode="train", rng_seed=99, grad_params=()):
    cache = {}
    rng = np.random.default_rng(rng_seed)
    y = layer.forward(x, params, mode, rng, cache)
    w_r = np.random.default_rng(5).normal(size=y.shape)

    def loss():
        c = {}
        out = layer.forward(x, params, mode, np.random.default_rng(rng_seed), c)
        return float((out * w_r).sum())

    grads = {}
    dx = layer.backward(w_r.copy(), params, cache, grads)
    assert max_rel_err(dx, fd_grad(loss, x)) < 1e-3
    for name in grad_params:
        assert max_rel_err(grads[name], fd_grad(loss, params[name])) < 1e-3, name


class TestLayerGradients:
    def test_conv(self, rng):
        layer = Conv3d("c", 2, 3)
        params = {}
        layer.init(rng, params, np.float64)
        x = rng.normal(size=(2, 4, 4, 2, 2))
        check_layer_grads(layer, params, x, grad_params=("c.w", "c.b"))

    def test_pool(self, rng):
        x = rng.normal(size=(2, 4, 4, 2, 2))
        check_layer_grads(MaxPool3d("p", (2, 2, 2)), {}, x)

    def test_batchnorm_train(self, rng):
        layer = BatchNorm("bn", 3)
        params = {}
        layer.init(rng, params, np.float64)
        params["bn.gamma"] = rng.normal(size=3) + 1.5
        params["bn.beta"] = rng.normal(size=3)
        x = rng.normal(size=(3, 2, 2, 2, 3))
        check_layer_grads(layer, params, x, grad_params=("bn.gamma", "bn.beta"))

    def test_relu(self, rng):
        x = rng.normal(size=(3, 7)) + 0.05  # keep clear of the kink
        x[np.abs(x) < 1e-3] = 0.1
        check_layer_grads(Relu("r"), {}, x)

    def test_sigmoid(self, rng):
        check_layer_grads(Sigmoid("s"), {}, rng.normal(size=(3, 5)))

    def test_dense(self, rng):
        layer = Dense("fc", 6, 4)
        params = {}
        layer.init(rng, params, np.float64)
        x = rng.normal(size=(3, 6))
        check_layer_grads(layer, params, x, grad_params=("fc.w", "fc.b"))

    def test_dropout_fixed_mask(self, rng):
        x = rng.normal(size=(4, 10))
        check_layer_grads(Dropout("d", 0.5), {}, x, rng_seed=7)

    def test_flatten(self, rng):
        x = rng.normal(size=(2, 3, 2, 2, 2))
        check_layer_grads(Flatten("f"), {}, x)
