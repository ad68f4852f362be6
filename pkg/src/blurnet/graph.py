"""Static computation graphs with reverse-mode differentiation.

A :class:`Graph` is an ordered list of primitive nodes (every node's inputs
precede it) over four leaf kinds: trainable ``param`` leaves, differentiable
``input`` leaves, non-differentiable ``data`` leaves (labels, masks, clean
images) and baked-in ``const`` leaves. One scalar node is designated the loss.

The primitive set is deliberately small: the 2-D convolutions, pooling, dense
and softmax-cross-entropy needed by the classifier, elementwise arithmetic,
reductions, products with constant operators, and three fused penalty kernels
(summed per-map L2 norms, total variation, per-channel max-magnitude) whose
subgradient choices are pinned here so training and attacks are deterministic.

Everything runs on float64 numpy; forward passes are pure functions of the
bindings and parameter values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, to_array


class GraphError(ValueError):
    pass


class OverflowGraphError(GraphError):
    """A node produced a non-finite intermediate."""


@dataclass
class Node:
    idx: int
    op: str
    args: tuple
    attrs: dict
    name: str | None = None

    def label(self) -> str:
        return self.name or f"{self.op}#{self.idx}"


# ---------------------------------------------------------------------------
# padding helpers (axes 1,2 of NHWC)

def _pad_hw(x, ph, pw, mode):
    if ph == 0 and pw == 0:
        return x
    pad = ((0, 0), (ph, ph), (pw, pw), (0, 0))
    if mode == "zero":
        return np.pad(x, pad)
    if mode == "replicate":
        return np.pad(x, pad, mode="edge")
    raise GraphError(f"unknown padding fill {mode!r}")


def _pad_hw_backward(g, ph, pw, mode):
    if ph == 0 and pw == 0:
        return g
    if mode == "zero":
        return g[:, ph:g.shape[1] - ph, pw:g.shape[2] - pw, :]
    # replicate: padded rows/cols were copies of the edge, fold them back in
    core = g[:, ph:g.shape[1] - ph, :, :].copy()
    core[:, 0, :, :] += g[:, :ph, :, :].sum(axis=1)
    core[:, -1, :, :] += g[:, g.shape[1] - ph:, :, :].sum(axis=1)
    out = core[:, :, pw:g.shape[2] - pw, :].copy()
    out[:, :, 0, :] += core[:, :, :pw, :].sum(axis=2)
    out[:, :, -1, :] += core[:, :, core.shape[2] - pw:, :].sum(axis=2)
    return out


def _conv_padding(pad, kh, kw):
    if pad in ("same", "same_replicate"):
        fill = "replicate" if pad == "same_replicate" else "zero"
        return kh // 2, kw // 2, fill
    if pad == "valid":
        return 0, 0, "zero"
    raise GraphError(f"unknown padding mode {pad!r}")


def _windows(xp, kh, kw, stride):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    if stride > 1:
        win = win[:, ::stride, ::stride]
    return win  # (N, Ho, Wo, C, kh, kw), a view


# ---------------------------------------------------------------------------
# primitives: fwd(node, xs) -> ndarray; bwd(node, xs, y, g, need) -> grads

def _conv2d_fwd(node, xs):
    x, w = xs
    if x.ndim != 4 or w.ndim != 4:
        raise GraphError(f"{node.label()}: conv2d wants NHWC input and KhKwCinCout kernel")
    kh, kw, cin, _ = w.shape
    if x.shape[3] != cin:
        raise GraphError(
            f"{node.label()}: channel mismatch, input has {x.shape[3]}, kernel expects {cin}")
    stride = node.attrs.get("stride", 1)
    if stride < 1:
        raise GraphError(f"{node.label()}: stride must be >= 1")
    ph, pw, fill = _conv_padding(node.attrs.get("pad", "same"), kh, kw)
    xp = _pad_hw(x, ph, pw, fill)
    win = _windows(xp, kh, kw, stride)
    return np.tensordot(win, w, axes=((4, 5, 3), (0, 1, 2)))


def _conv2d_bwd(node, xs, y, g, need):
    x, w = xs
    kh, kw, cin, cout = w.shape
    stride = node.attrs.get("stride", 1)
    ph, pw, fill = _conv_padding(node.attrs.get("pad", "same"), kh, kw)
    xp = _pad_hw(x, ph, pw, fill)
    n, ho, wo, _ = g.shape
    dx = dw = None
    if need[0]:
        dxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                dxp[:, u:u + stride * ho:stride, v:v + stride * wo:stride, :] += \
                    np.tensordot(g, w[u, v], axes=((3,), (1,)))
        dx = _pad_hw_backward(dxp, ph, pw, fill)
    if need[1]:
        dw = np.empty_like(w)
        for u in range(kh):
            for v in range(kw):
                patch = xp[:, u:u + stride * ho:stride, v:v + stride * wo:stride, :]
                dw[u, v] = np.tensordot(patch, g, axes=((0, 1, 2), (0, 1, 2)))
    return dx, dw


def _depthwise_fwd(node, xs):
    x, k = xs
    if x.ndim != 4 or k.ndim != 3:
        raise GraphError(f"{node.label()}: depthwise_conv2d wants NHWC input and KhKwC kernels")
    kh, kw, c = k.shape
    if x.shape[3] != c:
        raise GraphError(
            f"{node.label()}: channel mismatch, input has {x.shape[3]}, kernels cover {c}")
    ph, pw, fill = _conv_padding(node.attrs.get("pad", "same_replicate"), kh, kw)
    xp = _pad_hw(x, ph, pw, fill)
    win = _windows(xp, kh, kw, 1)
    return np.einsum("nhwcuv,uvc->nhwc", win, k, optimize=True)


def _depthwise_bwd(node, xs, y, g, need):
    x, k = xs
    kh, kw, _ = k.shape
    ph, pw, fill = _conv_padding(node.attrs.get("pad", "same_replicate"), kh, kw)
    xp = _pad_hw(x, ph, pw, fill)
    n, ho, wo, c = g.shape
    dx = dk = None
    if need[0]:
        dxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                dxp[:, u:u + ho, v:v + wo, :] += g * k[u, v]
        dx = _pad_hw_backward(dxp, ph, pw, fill)
    if need[1]:
        dk = np.empty_like(k)
        for u in range(kh):
            for v in range(kw):
                dk[u, v] = (g * xp[:, u:u + ho, v:v + wo, :]).sum(axis=(0, 1, 2))
    return dx, dk


def _maxpool_fwd(node, xs):
    (x,) = xs
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise GraphError(f"{node.label()}: maxpool2x2 needs even spatial dims, got {h}x{w}")
    r = x.reshape(n, h // 2, 2, w // 2, 2, c)
    return r.max(axis=(2, 4))


def _maxpool_bwd(node, xs, y, g, need):
    (x,) = xs
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    r = x.reshape(n, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    idx = r.argmax(axis=-1)  # first max wins ties (lowest flat index in window)
    onehot = np.zeros((n, ho, wo, c, 4))
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    dr = onehot * g[..., None]
    dx = dr.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
    return (dx,)


def _relu_fwd(node, xs):
    return np.maximum(xs[0], 0.0)


def _relu_bwd(node, xs, y, g, need):
    return (g * (xs[0] > 0.0),)


def _clip01_fwd(node, xs):
    return np.clip(xs[0], 0.0, 1.0)


def _clip01_bwd(node, xs, y, g, need):
    x = xs[0]
    return (g * ((x >= 0.0) & (x <= 1.0)),)


def _dense_fwd(node, xs):
    x, w = xs
    xf = x.reshape(x.shape[0], -1)
    if xf.shape[1] != w.shape[0]:
        raise GraphError(
            f"{node.label()}: dense expects {w.shape[0]} features, got {xf.shape[1]}")
    return xf @ w


def _dense_bwd(node, xs, y, g, need):
    x, w = xs
    xf = x.reshape(x.shape[0], -1)
    dx = (g @ w.T).reshape(x.shape) if need[0] else None
    dw = xf.T @ g if need[1] else None
    return dx, dw


def _softmax(z):
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def _xent_fwd(node, xs):
    logits, labels = xs
    labels = labels.astype(np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise GraphError(f"{node.label()}: {n} logit rows but {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() >= c:
        raise GraphError(f"{node.label()}: label out of range for {c} classes")
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
    per = lse - logits[np.arange(n), labels]
    if node.attrs.get("reduction", "mean") == "mean":
        return np.asarray(per.mean())
    return np.asarray(per.sum())


def _xent_bwd(node, xs, y, g, need):
    logits, labels = xs
    labels = labels.astype(np.int64).reshape(-1)
    n = logits.shape[0]
    p = _softmax(logits)
    p[np.arange(n), labels] -= 1.0
    if node.attrs.get("reduction", "mean") == "mean":
        p /= n
    return p * g, None


def _check_same_shape(node, a, b):
    if a.shape != b.shape:
        raise GraphError(f"{node.label()}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if gs != s)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


def _add_fwd(node, xs):
    a, b = xs
    if a.shape == b.shape:
        return a + b
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return a + b  # bias over the trailing channel axis
    raise GraphError(f"{node.label()}: add supports same-shape or trailing bias, "
                     f"got {a.shape} + {b.shape}")


def _add_bwd(node, xs, y, g, need):
    a, b = xs
    da = g if need[0] else None
    db = _unbroadcast(g, b.shape) if need[1] else None
    return da, db


def _sub_fwd(node, xs):
    _check_same_shape(node, *xs)
    return xs[0] - xs[1]


def _sub_bwd(node, xs, y, g, need):
    return g, -g


def _mul_fwd(node, xs):
    a, b = xs
    if a.shape == b.shape or b.size == 1 or a.size == 1:
        return a * b
    if a.ndim == 4 and b.ndim == 2 and a.shape[1:3] == b.shape:
        return a * b[None, :, :, None]  # constant H*W map against NHWK features
    raise GraphError(f"{node.label()}: mul supports same-shape, scalar, or HxW-map "
                     f"against NHWK, got {a.shape} * {b.shape}")


def _mul_bwd(node, xs, y, g, need):
    a, b = xs
    bb = b[None, :, :, None] if (a.ndim == 4 and b.ndim == 2) else b
    aa = a[None, :, :, None] if (b.ndim == 4 and a.ndim == 2) else a
    da = _unbroadcast(g * bb, a.shape) if need[0] else None
    db = _unbroadcast(g * aa, b.shape) if need[1] else None
    return da, db


def _abs_fwd(node, xs):
    return np.abs(xs[0])


def _abs_bwd(node, xs, y, g, need):
    return (g * np.sign(xs[0]),)  # subgradient 0 at 0


def _sum_fwd(node, xs):
    return np.asarray(xs[0].sum(axis=node.attrs.get("axes")))


def _sum_bwd(node, xs, y, g, need):
    x = xs[0]
    axes = node.attrs.get("axes")
    if axes is None:
        return (np.broadcast_to(g, x.shape).copy(),)
    shape = list(x.shape)
    for ax in (axes if isinstance(axes, tuple) else (axes,)):
        shape[ax] = 1
    return (np.broadcast_to(g.reshape(shape), x.shape).copy(),)


def _mean_fwd(node, xs):
    return np.asarray(xs[0].mean())


def _mean_bwd(node, xs, y, g, need):
    x = xs[0]
    return (np.full(x.shape, float(g) / x.size),)


def _max_fwd(node, xs):
    return np.asarray(xs[0].max())


def _max_bwd(node, xs, y, g, need):
    x = xs[0]
    dx = np.zeros_like(x)
    dx.reshape(-1)[x.argmax()] = g  # first max on ties
    return (dx,)


def _scale_fwd(node, xs):
    return xs[0] * node.attrs["c"]


def _scale_bwd(node, xs, y, g, need):
    return (g * node.attrs["c"],)


def _op_matmul_fwd(node, xs):
    x, m = xs
    if x.ndim == 2:
        if m.shape[1] != x.shape[0]:
            raise GraphError(f"{node.label()}: operator wants height {m.shape[1]}, "
                             f"map has {x.shape[0]}")
        return m @ x
    axis = node.attrs.get("axis", 1)
    if x.ndim != 4 or axis not in (1, 2):
        raise GraphError(f"{node.label()}: op_matmul wants a 2-D or NHWK operand")
    if m.shape[1] != x.shape[axis]:
        raise GraphError(f"{node.label()}: operator wants extent {m.shape[1]} on axis "
                         f"{axis}, input has {x.shape[axis]}")
    if axis == 1:
        return np.einsum("rh,nhwk->nrwk", m, x, optimize=True)
    return np.einsum("rw,nhwk->nhrk", m, x, optimize=True)


def _op_matmul_bwd(node, xs, y, g, need):
    x, m = xs
    dx = dm = None
    if x.ndim == 2:
        if need[0]:
            dx = m.T @ g
        if need[1]:
            dm = g @ x.T
        return dx, dm
    axis = node.attrs.get("axis", 1)
    if axis == 1:
        if need[0]:
            dx = np.einsum("rh,nrwk->nhwk", m, g, optimize=True)
        if need[1]:
            dm = np.einsum("nrwk,nhwk->rh", g, x, optimize=True)
    else:
        if need[0]:
            dx = np.einsum("rw,nhrk->nhwk", m, g, optimize=True)
        if need[1]:
            dm = np.einsum("nhrk,nhwk->rw", g, x, optimize=True)
    return dx, dm


def _group_count(shape, axes):
    n = 1
    for i, s in enumerate(shape):
        if i not in axes:
            n *= s
    return n


def _l2norms_fwd(node, xs):
    x = xs[0]
    axes = tuple(node.attrs["axes"])
    n = np.sqrt((x * x).sum(axis=axes, keepdims=True))
    out = n.sum()
    if node.attrs.get("normalize"):
        out /= _group_count(x.shape, axes)
    return np.asarray(out)


def _l2norms_bwd(node, xs, y, g, need):
    x = xs[0]
    axes = tuple(node.attrs["axes"])
    n = np.sqrt((x * x).sum(axis=axes, keepdims=True))
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(n > 0.0, x / np.where(n > 0.0, n, 1.0), 0.0)
    c = float(g)
    if node.attrs.get("normalize"):
        c /= _group_count(x.shape, axes)
    return (d * c,)


def _as_maps(x):
    if x.ndim == 2:
        return x[None, :, :, None]
    if x.ndim == 4:
        return x
    raise GraphError(f"tv_maps wants HxW or NHWK input, got rank {x.ndim}")


def _tv_fwd(node, xs):
    x = _as_maps(xs[0])
    dh = x[:, 1:, :, :] - x[:, :-1, :, :]
    dv = x[:, :, 1:, :] - x[:, :, :-1, :]
    tv = np.abs(dh).sum() + np.abs(dv).sum()
    if node.attrs.get("normalize"):
        tv /= x.shape[0] * x.shape[3]
    return np.asarray(tv)


def _tv_bwd(node, xs, y, g, need):
    x = _as_maps(xs[0])
    c = float(g)
    if node.attrs.get("normalize"):
        c /= x.shape[0] * x.shape[3]
    dh = np.sign(x[:, 1:, :, :] - x[:, :-1, :, :]) * c
    dv = np.sign(x[:, :, 1:, :] - x[:, :, :-1, :]) * c
    dx = np.zeros_like(x)
    dx[:, 1:, :, :] += dh
    dx[:, :-1, :, :] -= dh
    dx[:, :, 1:, :] += dv
    dx[:, :, :-1, :] -= dv
    return (dx.reshape(xs[0].shape),)


def _linf_fwd(node, xs):
    x = xs[0]
    if x.ndim != 3:
        raise GraphError(f"{node.label()}: linf_channels wants KhKwC weights")
    a = np.abs(x).reshape(-1, x.shape[2])
    return np.asarray(a.max(axis=0).sum())


def _linf_bwd(node, xs, y, g, need):
    x = xs[0]
    flat = x.reshape(-1, x.shape[2])
    j = np.abs(flat).argmax(axis=0)  # lowest flat index on ties
    dflat = np.zeros_like(flat)
    cols = np.arange(flat.shape[1])
    dflat[j, cols] = float(g) * np.sign(flat[j, cols])
    return (dflat.reshape(x.shape),)


_PRIMITIVES = {
    "conv2d": (_conv2d_fwd, _conv2d_bwd),
    "depthwise_conv2d": (_depthwise_fwd, _depthwise_bwd),
    "maxpool2x2": (_maxpool_fwd, _maxpool_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "clip01": (_clip01_fwd, _clip01_bwd),
    "dense": (_dense_fwd, _dense_bwd),
    "softmax_xent": (_xent_fwd, _xent_bwd),
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "abs": (_abs_fwd, _abs_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "max": (_max_fwd, _max_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "op_matmul": (_op_matmul_fwd, _op_matmul_bwd),
    "sum_l2norms": (_l2norms_fwd, _l2norms_bwd),
    "tv_maps": (_tv_fwd, _tv_bwd),
    "linf_channels": (_linf_fwd, _linf_bwd),
}

_LEAF_OPS = ("param", "input", "data", "const")


class Graph:
    """Ordered primitive nodes over named parameter/input/data leaves."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.loss: int | None = None
        self.param_values: dict[str, np.ndarray] = {}
        self._consts: dict[int, np.ndarray] = {}
        self._by_name: dict[str, int] = {}
        self._grad_flag: list[bool] = []

    # -- construction -------------------------------------------------

    def _new(self, op, args, attrs, name):
        if name is not None:
            if name in self._by_name:
                raise GraphError(f"duplicate node name {name!r}")
        node = Node(len(self.nodes), op, tuple(a.idx for a in args), attrs, name)
        for a in args:
            if a.idx >= node.idx:
                raise GraphError("graph nodes must be added in topological order")
        self.nodes.append(node)
        if name is not None:
            self._by_name[name] = node.idx
        if op == "param" or op == "input":
            self._grad_flag.append(True)
        elif op in _LEAF_OPS:
            self._grad_flag.append(False)
        else:
            self._grad_flag.append(any(self._grad_flag[a.idx] for a in args))
        return node

    def param(self, name: str, value) -> Node:
        self.param_values[name] = to_array(value)
        return self._new("param", (), {}, name)

    def input(self, name: str) -> Node:
        return self._new("input", (), {}, name)

    def data(self, name: str) -> Node:
        return self._new("data", (), {}, name)

    def const(self, value, name: str | None = None) -> Node:
        node = self._new("const", (), {}, name)
        self._consts[node.idx] = np.asarray(value)
        return node

    def apply(self, op: str, *args: Node, name: str | None = None, **attrs) -> Node:
        if op not in _PRIMITIVES:
            raise GraphError(f"unknown primitive {op!r}")
        return self._new(op, args, attrs, name)

    def set_loss(self, node: Node) -> None:
        self.loss = node.idx

    @property
    def input_names(self) -> list[str]:
        return [n.name for n in self.nodes if n.op == "input"]

    @property
    def data_names(self) -> list[str]:
        return [n.name for n in self.nodes if n.op == "data"]

    # -- execution ----------------------------------------------------

    def _leaf_value(self, node, bindings):
        if node.op == "param":
            return self.param_values[node.name]
        if node.op == "const":
            return self._consts[node.idx]
        if node.name not in bindings:
            raise GraphError(f"binding missing for {node.op} {node.name!r}")
        v = bindings[node.name]
        if isinstance(v, Tensor):
            return v.array
        return np.asarray(v)

    def run(self, bindings, check="all"):
        """Evaluate every node; returns the full value list."""
        vals: list = [None] * len(self.nodes)
        for node in self.nodes:
            if node.op in _LEAF_OPS:
                v = self._leaf_value(node, bindings)
            else:
                fwd, _ = _PRIMITIVES[node.op]
                v = fwd(node, [vals[i] for i in node.args])
                if check == "all" and not np.all(np.isfinite(v)):
                    raise OverflowGraphError(
                        f"non-finite values produced by node {node.label()}")
            vals[node.idx] = v
        if check == "loss" and self.loss is not None:
            lv = vals[self.loss]
            if not np.all(np.isfinite(lv)):
                raise OverflowGraphError("non-finite loss value")
        return vals

    def gradients(self, vals):
        """Reverse pass from the loss; grads for params and inputs."""
        if self.loss is None:
            raise GraphError("no loss node designated")
        if np.ndim(vals[self.loss]) != 0 and np.size(vals[self.loss]) != 1:
            raise GraphError("loss node must be scalar")
        adj: list = [None] * len(self.nodes)
        adj[self.loss] = np.asarray(1.0)
        for node in reversed(self.nodes):
            g = adj[node.idx]
            if g is None or node.op in _LEAF_OPS:
                continue
            if not self._grad_flag[node.idx]:
                continue
            _, bwd = _PRIMITIVES[node.op]
            need = tuple(self._grad_flag[i] for i in node.args)
            grads = bwd(node, [vals[i] for i in node.args], vals[node.idx], g, need)
            for i, gi in zip(node.args, grads):
                if gi is None or not self._grad_flag[i]:
                    continue
                gi = np.asarray(gi, dtype=np.float64)
                adj[i] = gi if adj[i] is None else adj[i] + gi
        out = {}
        for node in self.nodes:
            if node.op in ("param", "input"):
                g = adj[node.idx]
                if g is None:
                    ref = (self.param_values[node.name] if node.op == "param"
                           else None)
                    g = np.zeros_like(ref) if ref is not None else np.asarray(0.0)
                out[node.name] = g
        return out

    def named_values(self, vals) -> dict[str, np.ndarray]:
        return {name: vals[idx] for name, idx in self._by_name.items()}


def forward_primitives(graph: Graph, bindings) -> dict[str, Tensor]:
    """Evaluate the graph; returns every named node's output as a Tensor."""
    vals = graph.run(bindings, check="all")
    return {k: Tensor.wrap(v) for k, v in graph.named_values(vals).items()}


def backprop(graph: Graph, bindings, check="all") -> dict[str, Tensor]:
    """Gradient of the loss w.r.t. every parameter and differentiable input."""
    vals = graph.run(bindings, check=check)
    grads = graph.gradients(vals)
    out = {}
    for name, g in grads.items():
        ref = graph.param_values.get(name)
        if ref is not None and g.shape != ref.shape:
            g = np.broadcast_to(g, ref.shape).copy()
        out[name] = Tensor.wrap(g)
    return out


# ---------------------------------------------------------------------------
# ADAM

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params: dict) -> AdamState:
    st = AdamState()
    for k, p in params.items():
        arr = to_array(p)
        st.m[k] = np.zeros_like(arr)
        st.v[k] = np.zeros_like(arr)
    return st


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected ADAM update; returns (new params, new state)."""
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise GraphError("beta1, beta2 must lie in [0, 1)")
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        p = to_array(p)
        g = to_array(grads[k])
        if g.shape != p.shape:
            raise GraphError(f"gradient shape {g.shape} mismatches param {k!r} {p.shape}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        new_params[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
        new_m[k], new_v[k] = m, v
    return new_params, AdamState(step=t, m=new_m, v=new_v)
