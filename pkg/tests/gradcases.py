"""Randomized finite-difference gradient cases, one generator per primitive.

Each case builder takes an rng and returns ``(f, inputs)`` where ``f()`` is a
scalar Tensor built from float64 leaves. A fixed random readout weight turns
array outputs into scalars so every output element contributes.
"""

from __future__ import annotations

import numpy as np

from segadapt import autograd as ag
from segadapt.autograd import Tensor
from segadapt.autograd.tensor import getitem
from segadapt.networks import (
    DiscriminatorConfig,
    GeneratorConfig,
    SegmenterConfig,
    init_discriminator,
    init_generator,
    init_segmenter,
)

SHAPES_PER_PRIMITIVE = 20
GRAD_TOL = 1e-5


def leaf(rng, *shape, away_from_zero=False):
    v = rng.standard_normal(shape)
    if away_from_zero:
        # keep clear of kinks so a 1e-4 step never crosses one
        v = np.sign(v) * (0.1 + np.abs(v))
    return Tensor(v.astype(np.float64), requires_grad=True)


def readout(rng, out_shape):
    r = Tensor(rng.standard_normal(out_shape))

    def apply(y):
        return ag.tsum(y * r)

    return apply


def _rand_shape(rng, ndim=None, lo=1, hi=5):
    ndim = ndim or int(rng.integers(1, 4))
    return tuple(int(s) for s in rng.integers(lo, hi, size=ndim))


def case_add(rng):
    s = _rand_shape(rng)
    a, b = leaf(rng, *s), leaf(rng, *s[-1:])  # broadcasting on b
    ro = readout(rng, s)
    return (lambda: ro(a + b)), [a, b]


def case_mul(rng):
    s = _rand_shape(rng)
    a, b = leaf(rng, *s), leaf(rng, *s)
    ro = readout(rng, s)
    return (lambda: ro(a * b - a)), [a, b]


def case_div(rng):
    s = _rand_shape(rng)
    a = leaf(rng, *s)
    b = Tensor(rng.uniform(0.5, 2.0, s) * rng.choice([-1, 1], s), requires_grad=True)
    ro = readout(rng, s)
    return (lambda: ro(a / b)), [a, b]


def case_matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 6, 3))
    a, b = leaf(rng, m, k), leaf(rng, k, n)
    ro = readout(rng, (m, n))
    return (lambda: ro(ag.matmul(a, b))), [a, b]


def case_sum_mean(rng):
    s = _rand_shape(rng, ndim=3)
    a = leaf(rng, *s)
    axis = int(rng.integers(0, 3))
    ro = readout(rng, tuple(d for i, d in enumerate(s) if i != axis))
    return (lambda: ro(ag.tsum(a, axis=axis)) + ag.mean(a) * 3.0), [a]


def case_reshape_getitem(rng):
    s = _rand_shape(rng, ndim=2, lo=2, hi=6)
    a = leaf(rng, *s)
    ro = readout(rng, (s[1], s[0] - 1))
    return (lambda: ro(ag.reshape(getitem(a, slice(1, None)), (s[1], s[0] - 1)))), [a]


def case_concat(rng):
    s = _rand_shape(rng, ndim=3)
    extra = int(rng.integers(1, 4))
    a, b = leaf(rng, *s), leaf(rng, s[0], extra, *s[2:])
    ro = readout(rng, (s[0], s[1] + extra, *s[2:]))
    return (lambda: ro(ag.concat([a, b], axis=1))), [a, b]


def case_relu(rng):
    s = _rand_shape(rng)
    a = leaf(rng, *s, away_from_zero=True)
    ro = readout(rng, s)
    return (lambda: ro(ag.relu(a))), [a]


def case_leaky_relu(rng):
    s = _rand_shape(rng)
    a = leaf(rng, *s, away_from_zero=True)
    alpha = float(rng.uniform(0, 0.5))
    ro = readout(rng, s)
    return (lambda: ro(ag.leaky_relu(a, alpha))), [a]


def case_tanh(rng):
    s = _rand_shape(rng)
    a = leaf(rng, *s)
    ro = readout(rng, s)
    return (lambda: ro(ag.tanh(a))), [a]


def case_sigmoid(rng):
    s = _rand_shape(rng)
    a = leaf(rng, *s)
    ro = readout(rng, s)
    return (lambda: ro(ag.sigmoid(a))), [a]


def case_log(rng):
    s = _rand_shape(rng)
    a = Tensor(rng.uniform(0.2, 3.0, s), requires_grad=True)
    ro = readout(rng, s)
    return (lambda: ro(ag.log(a))), [a]


def case_abs(rng):
    s = _rand_shape(rng)
    a = leaf(rng, *s, away_from_zero=True)
    ro = readout(rng, s)
    return (lambda: ro(ag.tabs(a))), [a]


def case_clip(rng):
    s = _rand_shape(rng)
    a = leaf(rng, *s)
    # nudge values away from the clip bounds
    a.data[np.abs(np.abs(a.data) - 0.5) < 0.05] += 0.2
    ro = readout(rng, s)
    return (lambda: ro(ag.clip(a, -0.5, 0.5))), [a]


def case_softmax(rng):
    s = _rand_shape(rng, ndim=int(rng.integers(1, 4)))
    a = leaf(rng, *s)
    axis = int(rng.integers(0, len(s)))
    ro = readout(rng, s)
    return (lambda: ro(ag.softmax(a, axis=axis))), [a]


def case_l1(rng):
    s = _rand_shape(rng)
    a = leaf(rng, *s)
    b = Tensor(a.data + np.sign(rng.standard_normal(s)) * rng.uniform(0.1, 1.0, s), requires_grad=True)
    return (lambda: ag.l1_distance(a, b)), [a, b]


def _conv_shapes(rng):
    n, c, o = (int(v) for v in rng.integers(1, 4, 3))
    k = int(rng.integers(1, 5))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    h, w = (int(v) for v in rng.integers(max(k, 3), 8, 2))
    return n, c, o, k, stride, padding, h, w


def case_conv2d(rng):
    n, c, o, k, stride, padding, h, w = _conv_shapes(rng)
    x, wt, b = leaf(rng, n, c, h, w), leaf(rng, o, c, k, k), leaf(rng, o)
    out = ag.conv2d(x, wt, b, stride, padding)
    ro = readout(rng, out.shape)
    return (lambda: ro(ag.conv2d(x, wt, b, stride, padding))), [x, wt, b]


def case_conv_transpose2d(rng):
    n, c, o, k, stride, padding, h, w = _conv_shapes(rng)
    padding = min(padding, k - 1)
    x, wt, b = leaf(rng, n, c, h, w), leaf(rng, c, o, k, k), leaf(rng, o)
    out = ag.conv_transpose2d(x, wt, b, stride, padding)
    ro = readout(rng, out.shape)
    return (lambda: ro(ag.conv_transpose2d(x, wt, b, stride, padding))), [x, wt, b]


def case_instance_norm(rng):
    n, c = (int(v) for v in rng.integers(1, 4, 2))
    h, w = (int(v) for v in rng.integers(2, 6, 2))
    x, g, b = leaf(rng, n, c, h, w), leaf(rng, c), leaf(rng, c)
    ro = readout(rng, (n, c, h, w))
    return (lambda: ro(ag.instance_norm(x, g, b, eps=1e-5))), [x, g, b]


def case_dropout(rng):
    s = _rand_shape(rng)
    a = leaf(rng, *s)
    p = float(rng.uniform(0.1, 0.8))
    seed = int(rng.integers(1 << 30))
    ro = readout(rng, s)
    return (lambda: ro(ag.dropout(a, p, True, np.random.default_rng(seed)))), [a]


def case_cross_entropy(rng):
    n, c = int(rng.integers(1, 3)), int(rng.integers(2, 6))
    h, w = (int(v) for v in rng.integers(1, 5, 2))
    logits = leaf(rng, n, c, h, w)
    labels = rng.integers(0, c, size=(n, h, w))
    ignore = None
    if rng.random() < 0.5:
        ignore = c  # mark a few pixels as ignored
        labels[rng.random(labels.shape) < 0.3] = ignore
        labels.reshape(-1)[0] = 0
    return (lambda: ag.cross_entropy(logits, labels, ignore)), [logits]


PRIMITIVE_CASES = {
    "add": case_add,
    "mul_sub": case_mul,
    "div": case_div,
    "matmul": case_matmul,
    "sum_mean": case_sum_mean,
    "reshape_getitem": case_reshape_getitem,
    "concat": case_concat,
    "relu": case_relu,
    "leaky_relu": case_leaky_relu,
    "tanh": case_tanh,
    "sigmoid": case_sigmoid,
    "log": case_log,
    "abs": case_abs,
    "clip": case_clip,
    "softmax": case_softmax,
    "l1_distance": case_l1,
    "conv2d": case_conv2d,
    "conv_transpose2d": case_conv_transpose2d,
    "instance_norm": case_instance_norm,
    "dropout": case_dropout,
    "cross_entropy": case_cross_entropy,
}


# --- whole networks (tiny configurations: widths 8 and 16, inputs around 16x16) ---

def _perturb(net, rng):
    """Move parameters off their symmetric init so every path carries signal."""
    for p in net.parameters():
        p.data = p.data + rng.normal(0, 0.3, p.shape)
    return net


def case_generator(rng):
    cfg = GeneratorConfig(widths=(8, 16, 16, 16), dropout_p=0.5)
    net = _perturb(init_generator(cfg, int(rng.integers(1000))).astype(np.float64), rng)
    n = int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.choice([16, 32], 2, p=[0.75, 0.25]))
    x = leaf(rng, n, 3, h, w)
    seed = int(rng.integers(1 << 30))
    ro = readout(rng, (n, 3, h, w))
    return (lambda: ro(net(x, training=True, rng=np.random.default_rng(seed)))), [x] + net.parameters()


def case_discriminator(rng):
    cfg = DiscriminatorConfig(widths=(8, 16, 16, 16, 16), strides=(2, 2, 1, 1, 1))
    net = _perturb(init_discriminator(cfg, int(rng.integers(1000))).astype(np.float64), rng)
    n = int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.choice([16, 24], 2))
    x = leaf(rng, n, 3, h, w)
    return (lambda: ag.mean(ag.log(net(x)[:, 1]))), [x] + net.parameters()


def case_segmenter(rng):
    cfg = SegmenterConfig(widths=(8, 16, 16), num_classes=int(rng.integers(2, 7)))
    net = _perturb(init_segmenter(cfg, int(rng.integers(1000))).astype(np.float64), rng)
    n = int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.choice([8, 12, 16], 2))
    x = leaf(rng, n, 3, h, w)
    labels = rng.integers(0, cfg.num_classes, size=(n, h, w))
    return (lambda: ag.cross_entropy(net(x), labels)), [x] + net.parameters()


NETWORK_CASES = {
    "generator": case_generator,
    "discriminator": case_discriminator,
    "segmenter": case_segmenter,
}
