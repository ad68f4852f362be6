import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blurnet.graph import (Graph, GraphError, OverflowGraphError, adam_init,
                           adam_step, backprop, forward_primitives)


def conv_loop_oracle(x, w, pad):
    """Direct quadruple-loop cross-correlation (stride 1)."""
    kh, kw, cin, cout = w.shape
    n, h, wd, _ = x.shape
    ph, pw = (kh // 2, kw // 2) if pad == "same" else (0, 0)
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    y = np.zeros((n, ho, wo, cout))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    acc = 0.0
                    for u in range(kh):
                        for v in range(kw):
                            for c in range(cin):
                                acc += xp[b, i + u, j + v, c] * w[u, v, c, o]
                    y[b, i, j, o] = acc
    return y


class TestForwardSemantics:
    def test_relu_definition(self):
        g = Graph()
        x = g.input("x")
        g.apply("relu", x, name="y")
        out = forward_primitives(g, {"x": np.array([-1.0, 0.0, 2.0])})
        assert np.array_equal(out["y"].array, [0.0, 0.0, 2.0])

    def test_xent_uniform_logits_is_log_n(self):
        for n in (2, 5, 18):
            g = Graph()
            z = g.input("z")
            y = g.data("y")
            g.apply("softmax_xent", z, y, reduction="mean", name="loss")
            out = forward_primitives(g, {"z": np.zeros((3, n)),
                                         "y": np.array([0, 1, n - 1])})
            assert out["loss"].array == pytest.approx(np.log(n), rel=1e-12)

    def test_conv_constant_preserved_by_normalized_kernel(self):
        x = np.full((1, 6, 6, 1), 0.7)
        k = np.full((3, 3, 1, 1), 1.0 / 9.0)
        g = Graph()
        xn = g.input("x")
        kn = g.const(k)
        g.apply("conv2d", xn, kn, pad="same_replicate", name="y")
        out = forward_primitives(g, {"x": x})
        assert np.allclose(out["y"].array, 0.7, atol=1e-12)

    def test_conv_1x1_scaling(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 4, 4, 1))
        g = Graph()
        xn = g.input("x")
        kn = g.const(np.array([[[[2.0]]]]))
        g.apply("conv2d", xn, kn, pad="same", name="y")
        out = forward_primitives(g, {"x": x})
        assert np.allclose(out["y"].array, 2.0 * x, atol=1e-14)

    def test_conv_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 5, 5, 2))
        k = np.zeros((3, 3, 2, 2))
        k[1, 1, 0, 0] = 1.0
        k[1, 1, 1, 1] = 1.0
        g = Graph()
        xn = g.input("x")
        g.apply("conv2d", xn, g.const(k), pad="same", name="y")
        out = forward_primitives(g, {"x": x})
        assert np.allclose(out["y"].array, x, atol=1e-14)

    def test_conv_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 5, 5, 1))
        w = rng.normal(size=(3, 3, 1, 1))
        g = Graph()
        xn = g.input("x")
        g.apply("conv2d", xn, g.const(w), pad="same", name="y")
        out = forward_primitives(g, {"x": x})["y"].array
        assert np.max(np.abs(out - conv_loop_oracle(x, w, "same"))) < 1e-12

    def test_conv_loop_oracle_multichannel_small(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 6, 7, 3))
        w = rng.normal(size=(3, 3, 3, 4))
        g = Graph()
        xn = g.input("x")
        g.apply("conv2d", xn, g.const(w), pad="valid", name="y")
        out = forward_primitives(g, {"x": x})["y"].array
        assert np.max(np.abs(out - conv_loop_oracle(x, w, "valid"))) < 1e-12

    def test_depthwise_constant_blur(self):
        x = np.full((1, 5, 5, 3), 0.3)
        k = np.full((3, 3, 3), 1.0 / 9.0)
        g = Graph()
        xn = g.input("x")
        g.apply("depthwise_conv2d", xn, g.const(k), pad="same_replicate", name="y")
        out = forward_primitives(g, {"x": x})
        assert np.allclose(out["y"].array, 0.3, atol=1e-12)

    def test_depthwise_identity(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 4, 4, 2))
        k = np.zeros((3, 3, 2))
        k[1, 1, :] = 1.0
        g = Graph()
        xn = g.input("x")
        g.apply("depthwise_conv2d", xn, g.const(k), pad="same", name="y")
        out = forward_primitives(g, {"x": x})
        assert np.allclose(out["y"].array, x, atol=1e-14)

    def test_depthwise_equals_per_channel_conv2d(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 6, 6, 2))
        k = rng.normal(size=(3, 3, 2))
        g = Graph()
        xn = g.input("x")
        g.apply("depthwise_conv2d", xn, g.const(k), pad="same", name="y")
        got = forward_primitives(g, {"x": x})["y"].array
        for c in range(2):
            g2 = Graph()
            xc = g2.input("x")
            g2.apply("conv2d", xc, g2.const(k[:, :, c][:, :, None, None]),
                     pad="same", name="y")
            ref = forward_primitives(g2, {"x": x[:, :, :, c:c + 1]})["y"].array
            assert np.allclose(got[:, :, :, c], ref[:, :, :, 0], atol=1e-12)

    def test_maxpool(self):
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        g = Graph()
        xn = g.input("x")
        g.apply("maxpool2x2", xn, name="y")
        out = forward_primitives(g, {"x": x})["y"].array
        assert np.array_equal(out[0, :, :, 0], [[5, 7], [13, 15]])

    def test_forward_is_pure(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 8, 8, 3))
        w = rng.normal(size=(3, 3, 3, 4))
        g = Graph()
        xn = g.input("x")
        c = g.apply("conv2d", xn, g.const(w), pad="same")
        g.apply("relu", c, name="y")
        a = forward_primitives(g, {"x": x})["y"].array
        b = forward_primitives(g, {"x": x})["y"].array
        assert a.tobytes() == b.tobytes()

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=15, deadline=None)
    def test_depthwise_uniform_blur_is_convex_combination(self, seed):
        rng = np.random.default_rng(seed)
        k = rng.choice([3, 5])
        x = rng.normal(size=(1, 8, 8, 2))
        kern = np.full((k, k, 2), 1.0 / (k * k))
        g = Graph()
        xn = g.input("x")
        g.apply("depthwise_conv2d", xn, g.const(kern), pad="same_replicate",
                name="y")
        y = forward_primitives(g, {"x": x})["y"].array
        for c in range(2):
            assert y[..., c].max() <= x[..., c].max() + 1e-12
            assert y[..., c].min() >= x[..., c].min() - 1e-12


class TestErrors:
    def test_shape_mismatch_names_node(self):
        g = Graph()
        x = g.input("x")
        w = g.const(np.zeros((3, 3, 5, 4)))
        g.apply("conv2d", x, w, pad="same", name="badconv")
        with pytest.raises(GraphError, match="badconv"):
            g.run({"x": np.zeros((1, 6, 6, 3))})

    def test_nonfinite_intermediate_is_overflow(self):
        g = Graph()
        x = g.input("x")
        e = g.apply("mul", x, x)
        g.apply("mul", e, e, name="big")
        with pytest.raises(OverflowGraphError):
            g.run({"x": np.array([1e200])})

    def test_missing_binding(self):
        g = Graph()
        g.input("x")
        with pytest.raises(GraphError, match="binding"):
            g.run({})

    def test_non_scalar_loss_rejected(self):
        g = Graph()
        x = g.input("x")
        y = g.apply("relu", x, name="y")
        g.set_loss(y)
        vals = g.run({"x": np.ones(3)})
        with pytest.raises(GraphError, match="scalar"):
            g.gradients(vals)


class TestBackprop:
    def test_sum_gradient_ones(self):
        g = Graph()
        x = g.input("x")
        g.set_loss(g.apply("sum", x, name="loss"))
        grads = backprop(g, {"x": np.ones((2, 3))})
        assert np.array_equal(grads["x"].array, np.ones((2, 3)))

    def test_quadratic_gradient(self):
        g = Graph()
        x = g.input("x")
        sq = g.apply("mul", x, x)
        g.set_loss(g.apply("sum", sq, name="loss"))
        grads = backprop(g, {"x": np.array([1.0, 2.0])})
        assert np.allclose(grads["x"].array, [2.0, 4.0])

    def test_abs_subgradient_zero_at_zero(self):
        g = Graph()
        x = g.input("x")
        g.set_loss(g.apply("sum", g.apply("abs", x), name="loss"))
        grads = backprop(g, {"x": np.array([-2.0, 0.0, 3.0])})
        assert np.array_equal(grads["x"].array, [-1.0, 0.0, 1.0])

    def test_max_ties_route_to_first(self):
        g = Graph()
        x = g.input("x")
        g.set_loss(g.apply("max", x, name="loss"))
        grads = backprop(g, {"x": np.array([5.0, 5.0, 1.0])})
        assert np.array_equal(grads["x"].array, [1.0, 0.0, 0.0])


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = {"p": np.array([1.0, -2.0])}
        state = adam_init(params)
        new, _ = adam_step(params, {"p": np.zeros(2)}, state, lr=0.1)
        assert np.array_equal(new["p"], params["p"])

    def test_first_step_is_lr_times_sign(self):
        for gval in (0.3, -7.0):
            params = {"p": np.array([1.0])}
            state = adam_init(params)
            new, _ = adam_step(params, {"p": np.array([gval])}, state, lr=0.05)
            expected = 1.0 - 0.05 * np.sign(gval) * (abs(gval) / (abs(gval) + 1e-8))
            assert abs(new["p"][0] - expected) < 1e-9

    def test_converges_on_quadratic(self):
        # oracle: 100 steps minimizing (p - 3)^2 from 0 with lr 0.1
        params = {"p": np.array([0.0])}
        state = adam_init(params)
        for _ in range(100):
            grad = {"p": 2.0 * (params["p"] - 3.0)}
            params, state = adam_step(params, grad, state, lr=0.1)
        assert abs(params["p"][0] - 3.0) < 0.1

    def test_bad_betas_rejected(self):
        params = {"p": np.zeros(1)}
        with pytest.raises(GraphError):
            adam_step(params, {"p": np.zeros(1)}, adam_init(params), 0.1, beta1=1.0)

    def test_shape_mismatch_rejected(self):
        params = {"p": np.zeros(2)}
        with pytest.raises(GraphError):
            adam_step(params, {"p": np.zeros(3)}, adam_init(params), 0.1)
