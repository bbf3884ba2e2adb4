"""End-to-end gradient checks: the full two- and three-branch training
losses on a one-pair batch of a deliberately tiny network, differentiated
with respect to every trainable parameter tensor.

Finite differences at a fixed step straddle rectifier kinks when any
loss-relevant relu input sits within the step's crossing window; on a
randomly initialized network the ~50k relu inputs of the composed loss
make that certain, and the finite-difference quotient then measures an
average of one-sided slopes rather than the derivative.  The op-level
checks handle this by sampling inputs away from the kinks; these
end-to-end fixtures apply the same policy structurally:

  * all weights and biases are positive and the images are non-negative,
    so every backbone and decoder rectifier input is >= the layer's
    minimum bias (0.05, fifty crossing-windows wide) by construction;
  * the head rectifiers sit behind a live standardization whose output is
    centered by definition, so positivity cannot be arranged upstream;
    instead their affine gains are kept small (0.05-0.15) against offsets
    near 1, pinning every preactivation far from zero — audited with
    margin;
  * one backbone channel is driven permanently negative (audited with
    margin) so the rectifier's zero-gradient path is still exercised
    end to end;
  * the smooth-L1 inputs of the box branch are audited to be clear of
    the +-1 corners.

A backward-pass bug would shift analytic gradients at every coordinate;
nothing here can mask that.  Coordinates of the parameter tensors are
subsampled (seeded) so the whole run stays well inside the one-minute
budget of the full check registry.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses, model
from .anchors import AnchorConfig, generate_anchors
from .backbone import BackboneConfig

_SUBSAMPLE = 6
_DEAD_CHANNEL_BIAS = -3.0


def _tiny_config(variant):
    return model.ModelConfig(
        backbone=BackboneConfig(channels=(2, 2, 3, 4), adjust_channels=3),
        variant=variant, k=2, head_hidden=4, mask_hidden=4,
        refine=True, refine_mid=4, skip_proj=(2, 2, 2))


def _positive_params(cfg, seed):
    """Tiny-model parameters engineered so no rectifier input can sit near
    its kink: positive weights scaled by fan-in, biases in [0.3, 0.45]
    (the preactivation floor over the dark image regions), head affine
    offsets above the largest standardized feature magnitude (~3.6
    empirically, audited).  The search-branch adjust is the one
    mixed-sign layer — the correlation has no rectifier, and an all-positive
    kernel would average the search features into a near-constant response
    map whose information-carrying ripple float32 loses to cancellation.
    The decoder seed is scaled small against a raised first-stage bias so
    the signed response cannot push that stage's rectifier near zero.
    Logit-producing layers are scaled down to keep losses moderate."""
    params = model.init_model(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for name in sorted(params):
        t = params[name]
        fan = int(np.prod(t.data.shape[1:]))
        hi = 1.5 / fan
        if name.endswith("gamma"):
            t.data[:] = rng.uniform(0.8, 1.2, t.data.shape).astype(np.float32)
        elif name.endswith("beta"):
            t.data[:] = rng.uniform(5.0, 5.5, t.data.shape).astype(np.float32)
        elif name == "adjust.x.w":
            t.data[:] = rng.uniform(-hi, hi, t.data.shape).astype(np.float32)
        elif name == "adjust.x.b":
            t.data[:] = 0.0  # a bias would re-flood the zero-mean branch
        elif name.endswith(".b"):
            t.data[:] = rng.uniform(0.3, 0.45, t.data.shape).astype(np.float32)
        else:
            t.data[:] = rng.uniform(0.2 * hi, hi, t.data.shape).astype(np.float32)
    # keep the correlation map at O(1): its values are 15x15xC sums of
    # products of the two adjusted embeddings, so scale both branches down
    for name in ("adjust.z.w", "adjust.x.w"):
        params[name].data *= 0.15
    for name in ("score.c6.w", "box.c6.w", "mask.c6.w", "refine.out.w"):
        if name in params:
            params[name].data *= 0.05
    # the decoder seed projects the signed response vector; keep it small
    # against a first-stage bias of 1 so that stage's rectifier stays live
    params["refine.seed.w"].data *= 0.02
    params["refine.conv8.b"].data[:] = 1.0
    # one permanently-off channel: its relu passes exactly zero gradient
    params["backbone.conv2.b"].data[0] = _DEAD_CHANNEL_BIAS
    return params


def _audit_dead_channel(cfg, params, x):
    """The dead channel must be negative with margin everywhere (so the
    finite-difference step cannot wake it) and every live channel of the
    same layer positive with margin."""
    h1 = ad.relu(ad.conv2d(x, params["backbone.conv1.w"],
                           params["backbone.conv1.b"], stride=2))
    pre2 = ad.conv2d(h1, params["backbone.conv2.w"],
                     params["backbone.conv2.b"], stride=2).data
    if pre2[0].max() >= -0.2:
        raise ad.GradCheckError(
            f"dead-channel audit: max input {pre2[0].max():.4f} not <= -0.2")
    if pre2[1:].min() <= 0.02:
        raise ad.GradCheckError(
            f"live-channel audit: min input {pre2[1:].min():.4f} not > 0.02")


def _audit_relu_margins(run_loss, margin=0.25):
    """Every rectifier input anywhere in the loss graph must sit at least
    `margin` from the kink (on either side), or the fixed-step finite
    difference could straddle it.  Observed by temporarily wrapping the
    rectifier for one forward pass."""
    seen = []
    true_relu = ad.relu

    def spy(t):
        seen.append(float(np.abs(t.data).min()))
        return true_relu(t)

    ad.relu = spy
    try:
        run_loss()
    finally:
        ad.relu = true_relu
    worst = min(seen)
    if worst <= margin:
        raise ad.GradCheckError(
            f"rectifier-margin audit: an input sits {worst:.4f} from the "
            f"kink (need > {margin})")


def _audit_smooth_l1_margin(cfg, params, feats, labels):
    """Box-regression errors must sit clear of the smooth-L1 corners."""
    if cfg.variant != "3b":
        return
    deltas = model.box_deltas(cfg, params, feats).data
    k = cfg.k
    pos = np.argwhere(labels.anchor_y == 1)
    errs = []
    for a, i, j in pos:
        errs.extend(deltas[4 * a:4 * a + 4, i, j] - labels.box_targets[a, i, j])
    margin = np.abs(np.abs(np.asarray(errs)) - 1.0).min()
    if margin <= 0.05:
        raise ad.GradCheckError(
            f"smooth-L1 audit: |error| within {margin:.4f} of the corner")


def _fixture(seed, variant):
    """One deterministic training pair plus labels for the tiny model.

    The images are nearly black except for a bright block over the target
    region.  A bright background would be poison here: the all-positive
    weights average everything, so the response map becomes a large
    constant with a tiny ripple, and float32 loses the ripple — the
    information-carrying part — to cancellation in both the standardized
    forward pass and the zero-sum gradient field behind it, inflating the
    comparison against float64 differences by the mean-to-ripple ratio.
    A dark background keeps the response contrast-dominated instead."""
    rng = np.random.default_rng(seed)
    cfg = _tiny_config(variant)
    params = _positive_params(cfg, seed)

    def textured(side, block):
        img = 0.02 * rng.random((3, side, side)).astype(np.float32)
        img[:, block:side - block, block:side - block] += \
            (0.7 + 0.1 * rng.random((3, side - 2 * block,
                                     side - 2 * block))).astype(np.float32)
        return ad.tensor(img)

    z = textured(127, 31)
    x = textured(255, 95)
    gt_mask = np.zeros((255, 255), dtype=bool)
    gt_mask[95:160, 95:160] = True
    if variant == "3b":
        grid = generate_anchors(AnchorConfig(ratios=(0.5, 1.0)))
        labels = losses.label_rows_3b(grid, np.array([127.0, 127.0, 64.0, 64.0]),
                                      gt_mask=gt_mask)
    else:
        labels = losses.label_rows_2b((8, 8), radius=1, gt_mask=gt_mask)
    refine_cell = labels.positive_cells()[0]
    refine_target = losses.build_mask_targets(
        gt_mask, [refine_cell], side=127)[refine_cell]
    _audit_dead_channel(cfg, params, x)
    _audit_relu_margins(
        lambda: _loss_for(cfg, params, z, x, labels, refine_cell,
                          refine_target))
    feats = model.forward_features(cfg, params, z, x)
    _audit_smooth_l1_margin(cfg, params, feats, labels)
    return cfg, params, z, x, labels, refine_cell, refine_target


def _loss_for(cfg, params, z, x, labels, refine_cell, refine_target):
    """The full per-pair training objective for either variant."""
    feats = model.forward_features(cfg, params, z, x)
    cells = labels.positive_cells()
    m63 = losses.mask_loss(model.mask_logits_at(cfg, params, feats, cells), labels)
    r = model.refine_logits_at(cfg, params, feats, refine_cell)
    flat = ad.reshape(r, (127 * 127,))
    tgt = ad.const(-refine_target.reshape(-1).astype(np.float32))
    refine = ad.tmean(ad.softplus(ad.mul(flat, tgt)))
    mask_component = ad.add(m63, refine)
    if cfg.variant == "3b":
        comp = {"mask": mask_component,
                "score": losses.score_loss(model.score_logits(cfg, params, feats), labels),
                "box": losses.box_loss(model.box_deltas(cfg, params, feats), labels)}
    else:
        comp = {"mask": mask_component,
                "sim": losses.sim_loss(model.score_logits(cfg, params, feats), labels)}
    return losses.total_loss(cfg.variant, comp)


def _runner(variant):
    def run(seed):
        cfg, params, z, x, labels, cell, tgt = _fixture(seed, variant)
        names = sorted(k for k, v in params.items() if v.requires_grad)
        frozen = {k: v for k, v in params.items() if not v.requires_grad}

        def f(ts):
            p = dict(frozen)
            p.update(zip(names, ts))
            return _loss_for(cfg, p, z, x, labels, cell, tgt)

        return ad.grad_check(f, [params[n] for n in names],
                             max_coords_per_input=_SUBSAMPLE,
                             rng=np.random.default_rng(seed + 99))
    return run


E2E_CHECKS = [
    ("loss_2b_end_to_end", _runner("2b")),
    ("loss_3b_end_to_end", _runner("3b")),
]
