"""Named gradient checks for every differentiable operation.

Each entry builds a scalar-valued function plus its input tensors from a seed;
``run_all`` compares reverse-mode gradients against float64 central
differences.  Inputs are sampled away from the non-differentiable points of
relu (0) and smooth_l1 (+-1).  The end-to-end loss checks live at the bottom
and subsample coordinates of the big parameter tensors (seeded), so the whole
registry stays inside a one-minute budget.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

TOLERANCE = 1e-3


def _rand(rng, shape, lo=-1.0, hi=1.0):
    return ad.tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _rand_kinkfree(rng, shape, kinks=(0.0,), margin=0.1):
    """Uniform in [-2,2] but at least `margin` away from each kink value (and
    its negative), so finite differences never straddle a corner."""
    x = rng.uniform(-2.0, 2.0, size=shape)
    for k in kinks:
        for kv in {k, -k}:
            near = np.abs(x - kv) < margin
            x[near] = kv + margin * np.where(x[near] >= kv, 1.5, -1.5)
    return ad.tensor(x, requires_grad=True)


def _weighted_sum(t, rng):
    w = ad.const(rng.standard_normal(t.data.shape), like=t)
    return ad.tsum(ad.mul(t, w))


# --- builders: seed -> (f, inputs) -----------------------------------------

def _bld_add(seed):
    rng = np.random.default_rng(seed)
    a, b = _rand(rng, (3, 4)), _rand(rng, (3, 4))
    r = rng.standard_normal((3, 4))
    return (lambda ts: ad.tsum(ad.mul(ad.add(ts[0], ts[1]), ad.const(r, like=ts[0])))), [a, b]


def _bld_mul(seed):
    rng = np.random.default_rng(seed)
    a, b = _rand(rng, (2, 5)), _rand(rng, (2, 5))
    return (lambda ts: ad.tsum(ad.mul(ts[0], ts[1]))), [a, b]


def _bld_scale(seed):
    rng = np.random.default_rng(seed)
    a = _rand(rng, (4, 3))
    return (lambda ts: ad.tsum(ad.scale(ts[0], -1.7))), [a]


def _bld_relu(seed):
    rng = np.random.default_rng(seed)
    a = _rand_kinkfree(rng, (4, 6))
    return (lambda ts: _weighted_sum(ad.relu(ts[0]), np.random.default_rng(seed + 1))), [a]


def _bld_sigmoid(seed):
    rng = np.random.default_rng(seed)
    a = _rand(rng, (3, 7), -3, 3)
    return (lambda ts: _weighted_sum(ad.sigmoid(ts[0]), np.random.default_rng(seed + 1))), [a]


def _bld_softplus(seed):
    rng = np.random.default_rng(seed)
    a = _rand(rng, (5, 4), -3, 3)
    return (lambda ts: _weighted_sum(ad.softplus(ts[0]), np.random.default_rng(seed + 1))), [a]


def _bld_smooth_l1(seed):
    rng = np.random.default_rng(seed)
    a = _rand_kinkfree(rng, (6, 3), kinks=(1.0,))
    return (lambda ts: _weighted_sum(ad.smooth_l1(ts[0]), np.random.default_rng(seed + 1))), [a]


def _conv_builder(shape_x, shape_w, stride, dilation, padding):
    # positive inputs/weights: conv is linear, so signs add no coverage, but
    # mixed signs make small gradient coordinates out of cancelling terms and
    # the float32-vs-float64 mismatch then blows up the relative error
    def bld(seed):
        rng = np.random.default_rng(seed)
        x = _rand(rng, shape_x, 0.1, 1.0)
        w = _rand(rng, shape_w, 0.1, 0.6)
        b = _rand(rng, (shape_w[0],))
        cin, h, ww = shape_x
        cout = shape_w[0]
        eh = dilation * (shape_w[2] - 1) + 1
        ho = (h + 2 * padding - eh) // stride + 1
        wo = (ww + 2 * padding - eh) // stride + 1
        r = np.random.default_rng(seed + 1).uniform(0.2, 1.0, (cout, ho, wo))

        def f(ts):
            y = ad.conv2d(ts[0], ts[1], ts[2], stride=stride, dilation=dilation, padding=padding)
            return ad.tsum(ad.mul(y, ad.const(r, like=y)))
        return f, [x, w, b]
    return bld


def _bld_xcorr(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (3, 9, 9), 0.1, 1.0)
    z = _rand(rng, (3, 4, 4), 0.1, 1.0)
    r = np.random.default_rng(seed + 1).uniform(0.2, 1.0, (3, 6, 6))

    def f(ts):
        y = ad.depthwise_xcorr(ts[0], ts[1])
        return ad.tsum(ad.mul(y, ad.const(r, like=y)))
    return f, [x, z]


def _bld_upsample_nearest(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (2, 5, 4))
    r = np.random.default_rng(seed + 1).standard_normal((2, 10, 8))
    return (lambda ts: ad.tsum(ad.mul(ad.upsample2x(ts[0], "nearest"), ad.const(r, like=ts[0])))), [x]


def _bld_upsample_bilinear(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (2, 6, 5))
    r = np.random.default_rng(seed + 1).standard_normal((2, 12, 10))
    return (lambda ts: ad.tsum(ad.mul(ad.upsample2x(ts[0], "bilinear"), ad.const(r, like=ts[0])))), [x]


def _bld_pad_zero(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (2, 4, 5))
    r = np.random.default_rng(seed + 1).standard_normal((2, 7, 7))
    return (lambda ts: ad.tsum(ad.mul(ad.pad2d(ts[0], (1, 2, 0, 2), "zero"), ad.const(r, like=ts[0])))), [x]


def _bld_pad_replicate(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (2, 4, 5))
    r = np.random.default_rng(seed + 1).standard_normal((2, 7, 7))
    return (lambda ts: ad.tsum(ad.mul(ad.pad2d(ts[0], (1, 2, 0, 2), "replicate"), ad.const(r, like=ts[0])))), [x]


def _bld_slice(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (3, 8, 8))
    r = np.random.default_rng(seed + 1).standard_normal((3, 4, 5))
    return (lambda ts: ad.tsum(ad.mul(ad.slice2d(ts[0], 2, 6, 1, 6), ad.const(r, like=ts[0])))), [x]


def _bld_concat(seed):
    rng = np.random.default_rng(seed)
    a, b = _rand(rng, (2, 3, 4)), _rand(rng, (3, 3, 4))
    r = np.random.default_rng(seed + 1).standard_normal((5, 3, 4))
    return (lambda ts: ad.tsum(ad.mul(ad.concat_channels(ts[0], ts[1]), ad.const(r, like=ts[0])))), [a, b]


def _bld_gather_cells(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (4, 6, 6))
    cells = [(0, 0), (5, 5), (2, 3), (2, 3)]   # duplicate on purpose
    r = np.random.default_rng(seed + 1).standard_normal((4, len(cells)))
    return (lambda ts: ad.tsum(ad.mul(ad.gather_cells(ts[0], cells), ad.const(r, like=ts[0])))), [x]


def _bld_take(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (3, 4, 5))
    idx = np.random.default_rng(seed + 1).integers(0, 60, size=12)
    r = np.random.default_rng(seed + 2).standard_normal(12)
    return (lambda ts: ad.tsum(ad.mul(ad.take(ts[0], idx), ad.const(r, like=ts[0])))), [x]


def _bld_linear(seed):
    rng = np.random.default_rng(seed)
    w, x, b = _rand(rng, (4, 6)), _rand(rng, (6, 3)), _rand(rng, (4,))
    r = np.random.default_rng(seed + 1).standard_normal((4, 3))
    return (lambda ts: ad.tsum(ad.mul(ad.linear(ts[0], ts[1], ts[2]), ad.const(r, like=ts[0])))), [w, x, b]


def _bld_channel_affine(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (3, 5, 5))
    gamma, beta = _rand(rng, (3,), 0.5, 1.5), _rand(rng, (3,))
    mu = np.random.default_rng(seed + 1).uniform(-1, 1, 3)
    sg = np.random.default_rng(seed + 2).uniform(0.5, 2.0, 3)
    r = np.random.default_rng(seed + 3).standard_normal((3, 5, 5))

    def f(ts):
        y = ad.channel_affine(ts[0], ts[1], ts[2], ad.const(mu, like=ts[0]), ad.const(sg, like=ts[0]))
        return ad.tsum(ad.mul(y, ad.const(r, like=y)))
    return f, [x, gamma, beta]


def _bld_instance_norm(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (3, 5, 6))
    r = np.random.default_rng(seed + 1).standard_normal((3, 5, 6))
    return (lambda ts: ad.tsum(ad.mul(ad.instance_norm(ts[0]),
                                      ad.const(r, like=ts[0])))), [x]


def _bld_softmax_ce2(seed):
    rng = np.random.default_rng(seed)
    logits = _rand(rng, (2, 9), -2, 2)
    targets = np.random.default_rng(seed + 1).integers(0, 2, size=9)
    return (lambda ts: ad.softmax_ce2(ts[0], targets)), [logits]


def _bld_reshape_sum(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (2, 3, 4))
    r = np.random.default_rng(seed + 1).standard_normal((6, 4))
    return (lambda ts: ad.tsum(ad.mul(ad.reshape(ts[0], (6, 4)), ad.const(r, like=ts[0])))), [x]


def _bld_mean(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (3, 4))
    return (lambda ts: ad.tmean(ad.mul(ts[0], ts[0]))), [x]


def _bld_sub(seed):
    rng = np.random.default_rng(seed)
    a, b = _rand(rng, (3, 3)), _rand(rng, (3, 3))
    r = np.random.default_rng(seed + 1).standard_normal((3, 3))
    return (lambda ts: ad.tsum(ad.mul(ad.sub(ts[0], ts[1]), ad.const(r, like=ts[0])))), [a, b]


OP_CHECKS = [
    ("add", _bld_add),
    ("sub", _bld_sub),
    ("mul", _bld_mul),
    ("scale", _bld_scale),
    ("relu", _bld_relu),
    ("sigmoid", _bld_sigmoid),
    ("softplus", _bld_softplus),
    ("smooth_l1", _bld_smooth_l1),
    ("conv2d_k3s1", _conv_builder((3, 7, 8), (4, 3, 3, 3), 1, 1, 0)),
    ("conv2d_k3s2", _conv_builder((2, 9, 9), (3, 2, 3, 3), 2, 1, 0)),
    ("conv2d_k3s1d2p2", _conv_builder((2, 8, 8), (3, 2, 3, 3), 1, 2, 2)),
    ("conv2d_k1", _conv_builder((4, 5, 5), (6, 4, 1, 1), 1, 1, 0)),
    ("conv2d_k5s2p1", _conv_builder((1, 11, 10), (2, 1, 5, 5), 2, 1, 1)),
    ("depthwise_xcorr", _bld_xcorr),
    ("upsample2x_nearest", _bld_upsample_nearest),
    ("upsample2x_bilinear", _bld_upsample_bilinear),
    ("pad2d_zero", _bld_pad_zero),
    ("pad2d_replicate", _bld_pad_replicate),
    ("slice2d", _bld_slice),
    ("concat_channels", _bld_concat),
    ("gather_cells", _bld_gather_cells),
    ("take", _bld_take),
    ("linear", _bld_linear),
    ("channel_affine", _bld_channel_affine),
    ("instance_norm", _bld_instance_norm),
    ("softmax_ce2", _bld_softmax_ce2),
    ("reshape", _bld_reshape_sum),
    ("mean", _bld_mean),
]


def end_to_end_checks():
    """Loss-level checks on a tiny full model; imported lazily because the
    model pulls in most of the package."""
    from .gradchecks_e2e import E2E_CHECKS
    return E2E_CHECKS


def run_all(seed=0, include_e2e=True):
    """Run every registered check once.  Returns list of (name, max_rel_err)."""
    results = []
    for name, bld in OP_CHECKS:
        f, inputs = bld(seed)
        results.append((name, ad.grad_check(f, inputs)))
    if include_e2e:
        for name, runner in end_to_end_checks():
            results.append((name, runner(seed)))
    return results
