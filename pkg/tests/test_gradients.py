"""Central finite-difference checks for every differentiable primitive.

The same machinery backs the acceptance gradient gate; here each primitive
gets a handful of randomized small shapes. Non-differentiable kinks (abs/relu
at 0, max ties, L2 norms at 0) are avoided by nudging inputs off the kinks
and skipping coordinates where the two-sided difference is itself unstable.
"""

import numpy as np
import pytest

from blurnet.graph import Graph
from blurnet.regularizers import RegularizerSpec, attach_penalty

H = 1e-4
REL_TOL = 1e-3


def fd_check(build, arrays, rng, n_coords=6, guard=1e-3):
    """Compare analytic input gradients against central differences.

    build(g, leaf_nodes) must add nodes and set a scalar loss.
    Returns the number of coordinates actually compared.
    """
    g = Graph()
    leaves = [g.input(f"x{i}") for i in range(len(arrays))]
    build(g, leaves)
    bindings = {f"x{i}": a for i, a in enumerate(arrays)}
    vals = g.run(bindings, check="all")
    grads = g.gradients(vals)
    loss_idx = g.loss

    def loss_at(bind):
        return float(g.run(bind, check="loss")[loss_idx])

    checked = 0
    for i, a in enumerate(arrays):
        flat = a.reshape(-1)
        coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for c in coords:
            ap = a.copy().reshape(-1)
            am = a.copy().reshape(-1)
            ap[c] += H
            am[c] -= H
            bp = dict(bindings)
            bm = dict(bindings)
            bp[f"x{i}"] = ap.reshape(a.shape)
            bm[f"x{i}"] = am.reshape(a.shape)
            fd = (loss_at(bp) - loss_at(bm)) / (2 * H)
            an = grads[f"x{i}"].reshape(-1)[c]
            if abs(fd) < guard and abs(an) < guard:
                continue  # too close to a kink / zero to resolve
            assert abs(fd - an) <= REL_TOL * max(abs(fd), abs(an)), \
                (f"input {i} coord {c}: analytic {an} vs fd {fd}")
            checked += 1
    return checked


@pytest.fixture(scope="module")
def rng():
    return np.random.default_rng(2024)


def loss_through(g, node):
    """Square-and-sum so upstream gradients are nontrivial."""
    sq = g.apply("mul", node, node)
    g.set_loss(g.apply("sum", sq, name="loss"))


def test_conv2d_gradients(rng):
    for _ in range(4):
        x = rng.normal(size=(2, 5, 5, 2))
        w = rng.normal(size=(3, 3, 2, 3))

        def build(g, leaves):
            loss_through(g, g.apply("conv2d", leaves[0], leaves[1], pad="same"))

        assert fd_check(build, [x, w], rng) > 0


def test_conv2d_valid_and_replicate(rng):
    x = rng.normal(size=(1, 6, 6, 2))
    w = rng.normal(size=(3, 3, 2, 2))
    for pad in ("valid", "same_replicate"):
        def build(g, leaves, pad=pad):
            loss_through(g, g.apply("conv2d", leaves[0], leaves[1], pad=pad))

        assert fd_check(build, [x, w], rng) > 0


def test_depthwise_gradients(rng):
    for pad in ("same", "same_replicate"):
        x = rng.normal(size=(2, 6, 6, 3))
        k = rng.normal(size=(3, 3, 3))

        def build(g, leaves, pad=pad):
            loss_through(g, g.apply("depthwise_conv2d", leaves[0], leaves[1],
                                    pad=pad))

        assert fd_check(build, [x, k], rng) > 0


def test_maxpool_gradients(rng):
    x = rng.normal(size=(2, 6, 6, 2))

    def build(g, leaves):
        loss_through(g, g.apply("maxpool2x2", leaves[0]))

    assert fd_check(build, [x], rng) > 0


def test_relu_gradients(rng):
    x = rng.normal(size=(3, 7)) + 0.05  # keep off the kink

    def build(g, leaves):
        loss_through(g, g.apply("relu", leaves[0]))

    assert fd_check(build, [x], rng) > 0


def test_clip01_gradients(rng):
    x = rng.uniform(0.05, 0.95, size=(3, 5))

    def build(g, leaves):
        loss_through(g, g.apply("clip01", leaves[0]))

    assert fd_check(build, [x], rng) > 0


def test_dense_gradients(rng):
    x = rng.normal(size=(3, 2, 2, 2))
    w = rng.normal(size=(8, 4))

    def build(g, leaves):
        loss_through(g, g.apply("dense", leaves[0], leaves[1]))

    assert fd_check(build, [x, w], rng) > 0


def test_softmax_xent_gradients(rng):
    for reduction in ("mean", "sum"):
        z = rng.normal(size=(4, 6))
        labels = rng.integers(0, 6, size=4)
        g = Graph()
        x0 = g.input("x0")
        y = g.data("labels")
        g.set_loss(g.apply("softmax_xent", x0, y, reduction=reduction, name="loss"))
        bindings = {"x0": z, "labels": labels}
        vals = g.run(bindings)
        an = g.gradients(vals)["x0"]
        for c in rng.choice(z.size, size=8, replace=False):
            zp = z.reshape(-1).copy()
            zm = z.reshape(-1).copy()
            zp[c] += H
            zm[c] -= H
            lp = float(g.run({"x0": zp.reshape(z.shape), "labels": labels})[g.loss])
            lm = float(g.run({"x0": zm.reshape(z.shape), "labels": labels})[g.loss])
            fd = (lp - lm) / (2 * H)
            assert abs(fd - an.reshape(-1)[c]) <= REL_TOL * max(abs(fd), 1e-6)


def test_elementwise_and_reduction_gradients(rng):
    a = rng.normal(size=(3, 4)) + 0.2
    b = rng.normal(size=(3, 4)) + 0.1

    def build_add(g, leaves):
        loss_through(g, g.apply("add", leaves[0], leaves[1]))

    def build_sub(g, leaves):
        loss_through(g, g.apply("sub", leaves[0], leaves[1]))

    def build_mul(g, leaves):
        loss_through(g, g.apply("mul", leaves[0], leaves[1]))

    def build_abs(g, leaves):
        loss_through(g, g.apply("abs", leaves[0]))

    def build_mean(g, leaves):
        m = g.apply("mean", leaves[0])
        g.set_loss(g.apply("mul", m, m, name="loss"))

    def build_scale(g, leaves):
        loss_through(g, g.apply("scale", leaves[0], c=2.5))

    for build, arrays in ((build_add, [a, b]), (build_sub, [a, b]),
                          (build_mul, [a, b]), (build_abs, [a]),
                          (build_mean, [a]), (build_scale, [a])):
        assert fd_check(build, arrays, rng) > 0


def test_bias_add_gradient(rng):
    x = rng.normal(size=(2, 3, 3, 4))
    b = rng.normal(size=(4,))

    def build(g, leaves):
        loss_through(g, g.apply("add", leaves[0], leaves[1]))

    assert fd_check(build, [x, b], rng) > 0


def test_op_matmul_gradients(rng):
    x = rng.normal(size=(2, 5, 4, 3))
    m = rng.normal(size=(6, 5))

    def build_axis1(g, leaves):
        loss_through(g, g.apply("op_matmul", leaves[0], leaves[1], axis=1))

    assert fd_check(build_axis1, [x, m], rng) > 0
    m2 = rng.normal(size=(6, 4))

    def build_axis2(g, leaves):
        loss_through(g, g.apply("op_matmul", leaves[0], leaves[1], axis=2))

    assert fd_check(build_axis2, [x, m2], rng) > 0

    x2 = rng.normal(size=(4, 3))
    m3 = rng.normal(size=(2, 4))

    def build_2d(g, leaves):
        loss_through(g, g.apply("op_matmul", leaves[0], leaves[1]))

    assert fd_check(build_2d, [x2, m3], rng) > 0


def test_fused_penalty_gradients(rng):
    f = rng.normal(size=(2, 5, 5, 3)) + 0.3

    def build_tv(g, leaves):
        g.set_loss(g.apply("tv_maps", leaves[0], normalize=True, name="loss"))

    def build_norms(g, leaves):
        g.set_loss(g.apply("sum_l2norms", leaves[0], axes=(1, 2),
                           normalize=True, name="loss"))

    w = rng.normal(size=(3, 3, 4))

    def build_linf(g, leaves):
        g.set_loss(g.apply("linf_channels", leaves[0], name="loss"))

    assert fd_check(build_tv, [f], rng) > 0
    assert fd_check(build_norms, [f], rng) > 0
    assert fd_check(build_linf, [w], rng) > 0


def test_full_classifier_parameter_gradients(rng):
    """Every parameter gradient of the stacked net vs central differences."""
    from blurnet.model import ModelSpec, ConvLayer, stack_network, _init_params

    spec = ModelSpec(input_size=8,
                     conv_layers=(ConvLayer(3), ConvLayer(4), ConvLayer(4)),
                     n_classes=5)
    params = _init_params(spec, seed=11)
    x = rng.uniform(0, 1, size=(4, 8, 8, 3))
    labels = rng.integers(0, 5, size=4)

    g = Graph()
    xn = g.input("images")
    yn = g.data("labels")
    nodes = stack_network(g, xn, spec, params, trainable=True)
    g.set_loss(g.apply("softmax_xent", nodes["logits"], yn, reduction="mean",
                       name="loss"))
    bindings = {"images": x, "labels": labels}
    vals = g.run(bindings)
    grads = g.gradients(vals)

    for name in params:
        p = g.param_values[name]
        flat = p.reshape(-1)
        n_checked = 0
        for c in rng.choice(flat.size, size=min(5, flat.size), replace=False):
            orig = flat[c]
            flat[c] = orig + H
            lp = float(g.run(bindings, check="loss")[g.loss])
            flat[c] = orig - H
            lm = float(g.run(bindings, check="loss")[g.loss])
            flat[c] = orig
            fd = (lp - lm) / (2 * H)
            an = grads[name].reshape(-1)[c]
            if abs(fd) < 1e-10 and abs(an) < 1e-10:
                continue
            assert abs(fd - an) <= REL_TOL * max(abs(fd), abs(an), 1e-8), \
                f"{name}[{c}]: analytic {an} vs fd {fd}"
            n_checked += 1
        assert n_checked > 0 or params[name].size <= 1, name


def test_regularized_training_loss_gradients(rng):
    """Penalty terms differentiate correctly through the feature maps."""
    from blurnet.model import ModelSpec, ConvLayer, stack_network, _init_params

    spec = ModelSpec(input_size=8,
                     conv_layers=(ConvLayer(3), ConvLayer(4), ConvLayer(4)),
                     n_classes=4)
    for kind, mode in (("tv", None), ("tik_hf", None), ("tik_pseudo", None),
                       ("tik_pseudo", "matrix_rows")):
        reg = RegularizerSpec(kind=kind, alpha=0.01, tik_mode=mode)
        params = _init_params(spec, seed=3)
        x = rng.uniform(0, 1, size=(2, 8, 8, 3))
        labels = rng.integers(0, 4, size=2)
        g = Graph()
        xn = g.input("images")
        yn = g.data("labels")
        nodes = stack_network(g, xn, spec, params, trainable=True)
        ce = g.apply("softmax_xent", nodes["logits"], yn, reduction="mean")
        pen = attach_penalty(g, reg, features=nodes["features1"],
                             map_hw=spec.feature_hw)
        g.set_loss(g.apply("add", ce, pen, name="loss"))
        bindings = {"images": x, "labels": labels}
        vals = g.run(bindings)
        grads = g.gradients(vals)
        p = g.param_values["conv1_w"]
        flat = p.reshape(-1)
        ok = 0
        for c in rng.choice(flat.size, size=6, replace=False):
            orig = flat[c]
            flat[c] = orig + H
            lp = float(g.run(bindings, check="loss")[g.loss])
            flat[c] = orig - H
            lm = float(g.run(bindings, check="loss")[g.loss])
            flat[c] = orig
            fd = (lp - lm) / (2 * H)
            an = grads["conv1_w"].reshape(-1)[c]
            if abs(fd) < 1e-3 and abs(an) < 1e-3:
                continue
            assert abs(fd - an) <= REL_TOL * max(abs(fd), abs(an)), (kind, mode)
            ok += 1
        assert ok > 0, (kind, mode)
