"""Multi-task model: shared response map feeding score / box / mask heads
plus an optional mask refinement decoder.

Every head is two 1x1 convolutions with, in between: a live per-channel
spatial standardization plus trainable affine, a relu, and a fixed
re-centering of the rectified output (see _center_relu).  The branches
therefore run at comparable activation scales at every step — not just at
initialization — and every output layer sees approximately centered
unit-variance features; both let a single learning rate work across heads.
Because the standardization statistics are recomputed inside the graph,
the trunk cannot lower the loss by shrinking hidden features toward their
mean (the failure mode of a frozen normalization, where the cheapest
descent direction is often to silence the features and let the output
bias predict the dataset average).

The mask head's second convolution maps the hidden vector of one response
cell to a full 63x63 logit grid (4to3969 channels).  Evaluating it as a 1x1
convolution over all 289 cells costs ~100x more than the handful of
positive cells used by the loss, so training gathers the needed cells and
applies the same weights as a plain matrix product; `mask_logits_full`
keeps the convolution form for parity testing.

The refinement decoder upgrades one cell's mask from the 63x63 head to a
sharper 127x127 logit map: a seed projection of the cell's response vector
to a 15x15 grid, then three rounds of [concat the aligned skip-feature
window, 3x3 conv, relu, 2x upsample, replicate-pad to odd size] walking
15->31->63->127 through the stride-8/4/2 skips, closed by concatenating
the raw 127x127 pixel window and a final 1x1 conv.  Response cell (i, j)
slices skip windows [s*i, s*i + side) at matching scale s, the exact
feature footprint of that cell, so the decoder is translation-consistent
across cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import checkpoint


@dataclass(frozen=True)
class ModelConfig:
    backbone: bb.BackboneConfig = field(default_factory=bb.BackboneConfig)
    variant: str = "3b"          # "3b" (score+box+mask) | "2b" (sim+mask)
    k: int = 5                   # anchors per response cell (3b only)
    head_hidden: int = 64
    mask_hidden: int = 96
    mask_side: int = 63
    refine: bool = True
    refine_mid: int = 16
    skip_proj: tuple = (16, 12, 8)   # projected channels at stride 8/4/2

    def validate(self):
        self.backbone.validate()
        if self.variant not in ("3b", "2b"):
            raise ValueError(f"variant must be '3b' or '2b', got {self.variant!r}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.refine and self.backbone.variant != "four_stage":
            raise ValueError("refinement needs the four_stage backbone "
                             "(it consumes the stride-2/4/8 skip features)")
        if self.mask_side != 63:
            raise ValueError("mask head emits 63x63 logits; mask_side is "
                             "fixed at 63")

    @property
    def score_channels(self) -> int:
        return 2 * self.k if self.variant == "3b" else 1


def _affine_params(params, name, c):
    params[name + ".gamma"] = ad.param(np.ones(c, dtype=np.float32))
    params[name + ".beta"] = ad.param(np.zeros(c, dtype=np.float32))


def _normed_affine(params, name, x):
    """Live spatial standardization, then the trainable per-channel affine.
    The live statistics make feature collapse gradient-neutral: no setting
    of upstream weights can silence a channel by shrinking it."""
    c = x.data.shape[0]
    xn = ad.instance_norm(x)
    return ad.channel_affine(xn, params[name + ".gamma"],
                             params[name + ".beta"],
                             ad.const(np.zeros(c, dtype=np.float32)),
                             ad.const(np.ones(c, dtype=np.float32)))


# Mean and standard deviation of relu(N(0, 1)): E = 1/sqrt(2*pi),
# Var = 1/2 - 1/(2*pi).
_RELU_MEAN = 1.0 / math.sqrt(2.0 * math.pi)
_RELU_STD = math.sqrt(0.5 - 1.0 / (2.0 * math.pi))


def _center_relu(h: ad.Tensor) -> ad.Tensor:
    """Standardize rectified activations with the analytic constants for a
    relu'd standard normal.  This is an exact reparametrization of the
    following layer (foldable into its weights and bias), so it changes
    nothing about what the head can express — but it hands SGD centered
    features.  Uncentered rectified features share a large common mean
    component, and a final layer fed them spends its gradient budget
    learning the dataset-average target while target-specific deviations
    crawl at the speed of the small residual variance; centering removes
    that imbalance."""
    shift = ad.const(np.full(h.data.shape, _RELU_MEAN, dtype=np.float32))
    return ad.scale(ad.sub(h, shift), 1.0 / _RELU_STD)


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    """All parameters, keyed 'part.layer.tensor'.  Head output convs start
    near zero (std 0.01) so early training is dominated by the normalized
    hidden layers, not random logits."""
    cfg.validate()
    params = bb.init_backbone(cfg.backbone, rng)
    ca = cfg.backbone.adjust_channels
    for head in head_names(cfg):
        bb.conv_param(params, rng, f"{head}.c5", cfg.head_hidden
                      if head != "mask" else cfg.mask_hidden, ca, 1,
                      bias=False)
        _affine_params(params, f"{head}.norm",
                       cfg.head_hidden if head != "mask" else cfg.mask_hidden)
    bb.conv_param(params, rng, "score.c6", cfg.score_channels,
                  cfg.head_hidden, 1, std=0.01)
    if cfg.variant == "3b":
        bb.conv_param(params, rng, "box.c6", 4 * cfg.k,
                      cfg.head_hidden, 1, std=0.01)
    bb.conv_param(params, rng, "mask.c6", cfg.mask_side ** 2,
                  cfg.mask_hidden, 1, std=0.01)
    if cfg.refine:
        _init_refine(cfg, params, rng)
    return params


def head_names(cfg: ModelConfig):
    return ("score", "box", "mask") if cfg.variant == "3b" else ("score", "mask")


def _init_refine(cfg, params, rng):
    p8, p4, p2 = cfg.skip_proj
    c1, c2, c3, _ = cfg.backbone.channels
    m = cfg.refine_mid
    ca = cfg.backbone.adjust_channels
    bb.conv_param(params, rng, "refine.proj8", p8, c3, 1)
    bb.conv_param(params, rng, "refine.proj4", p4, c2, 1)
    bb.conv_param(params, rng, "refine.proj2", p2, c1, 1)
    seed_w = rng.standard_normal((m * 15 * 15, ca)).astype(np.float32)
    params["refine.seed.w"] = ad.param(seed_w * np.float32(np.sqrt(2.0 / ca)))
    params["refine.seed.b"] = ad.param(np.zeros(m * 15 * 15, dtype=np.float32))
    bb.conv_param(params, rng, "refine.conv8", m, m + p8, 3)
    bb.conv_param(params, rng, "refine.conv4", m, m + p4, 3)
    bb.conv_param(params, rng, "refine.conv2", m, m + p2, 3)
    bb.conv_param(params, rng, "refine.out", 1,
                  m + cfg.backbone.in_channels, 1, std=0.01)


@dataclass
class Feats:
    """One pair's forward state, reused by every head."""
    row: ad.Tensor               # (adjust_c, 17, 17)
    hidden: dict                 # head name -> (hidden_c, 17, 17)
    skips: dict                  # stride -> x-branch feature map
    x_img: ad.Tensor             # (3, 255, 255)


def exemplar_features(cfg: ModelConfig, params: dict,
                      z_img: ad.Tensor) -> ad.Tensor:
    """(adjust_c, 15, 15) adjusted exemplar embedding — the part of the
    forward pass the tracker computes once and reuses every frame."""
    fz, _ = bb.embed(cfg.backbone, params, z_img)
    return bb.adjust(params, fz, "z")


def forward_search(cfg: ModelConfig, params: dict, z_feat: ad.Tensor,
                   x_img: ad.Tensor) -> Feats:
    """Search-branch forward against a precomputed exemplar embedding."""
    fx, skips = bb.embed(cfg.backbone, params, x_img)
    row = ad.depthwise_xcorr(bb.adjust(params, fx, "x"), z_feat)
    hidden = {}
    for head in head_names(cfg):
        h = ad.conv2d(row, params[f"{head}.c5.w"])
        hidden[head] = _center_relu(ad.relu(_normed_affine(params,
                                                           f"{head}.norm", h)))
    return Feats(row=row, hidden=hidden, skips=skips, x_img=x_img)


def forward_features(cfg: ModelConfig, params: dict,
                     z_img: ad.Tensor, x_img: ad.Tensor) -> Feats:
    return forward_search(cfg, params,
                          exemplar_features(cfg, params, z_img), x_img)


def score_logits(cfg: ModelConfig, params: dict, feats: Feats) -> ad.Tensor:
    """(2k, 17, 17) anchor logits (3b) or (1, 17, 17) similarity map (2b)."""
    return ad.conv2d(feats.hidden["score"],
                     params["score.c6.w"], params["score.c6.b"])


def box_deltas(cfg: ModelConfig, params: dict, feats: Feats) -> ad.Tensor:
    """(4k, 17, 17) anchor offsets; three-branch only."""
    if cfg.variant != "3b":
        raise ValueError("box head exists only in the 3b variant")
    return ad.conv2d(feats.hidden["box"],
                     params["box.c6.w"], params["box.c6.b"])


def _mask_w2d(cfg, params):
    return ad.reshape(params["mask.c6.w"], (cfg.mask_side ** 2, cfg.mask_hidden))


def mask_logits_at(cfg: ModelConfig, params: dict, feats: Feats,
                   cells) -> ad.Tensor:
    """(63*63, n) mask logits for the given (row, col) response cells."""
    g = ad.gather_cells(feats.hidden["mask"], cells)
    return ad.linear(_mask_w2d(cfg, params), g, params["mask.c6.b"])


def mask_logits_full(cfg: ModelConfig, params: dict, feats: Feats) -> ad.Tensor:
    """(63*63, 17, 17): the same map as a 1x1 convolution (parity path)."""
    return ad.conv2d(feats.hidden["mask"],
                     params["mask.c6.w"], params["mask.c6.b"])


def refine_logits_at(cfg: ModelConfig, params: dict, feats: Feats,
                     cell) -> ad.Tensor:
    """(127, 127) refined mask logits for one response cell."""
    if not cfg.refine:
        raise ValueError("model was built without the refinement decoder")
    i, j = cell
    if not (0 <= i < bb.RESPONSE and 0 <= j < bb.RESPONSE):
        raise ValueError(f"cell {cell} outside the 17x17 response grid")
    m = cfg.refine_mid
    vec = ad.gather_cells(feats.row, [cell])                    # (ca, 1)
    seed = ad.linear(params["refine.seed.w"], vec, params["refine.seed.b"])
    u = ad.reshape(seed, (m, 15, 15))
    for stride, side in ((8, 15), (4, 31), (2, 63)):
        proj = ad.conv2d(feats.skips[stride],
                         params[f"refine.proj{stride}.w"],
                         params[f"refine.proj{stride}.b"])
        f = 8 // stride
        r0, c0 = f * i, f * j
        win = ad.slice2d(proj, r0, r0 + side, c0, c0 + side)
        u = ad.relu(ad.conv2d(ad.concat_channels(u, win),
                              params[f"refine.conv{stride}.w"],
                              params[f"refine.conv{stride}.b"], padding=1))
        u = ad.pad2d(ad.upsample2x(u), (0, 1, 0, 1), mode="replicate")
    pix = ad.slice2d(feats.x_img, 8 * i, 8 * i + 127, 8 * j, 8 * j + 127)
    out = ad.conv2d(ad.concat_channels(u, pix),
                    params["refine.out.w"], params["refine.out.b"])
    return ad.reshape(out, (127, 127))


def trainable(params: dict) -> dict:
    return {k: v for k, v in params.items() if v.requires_grad}


# ---------------------------------------------------------------------------
# persistence

def save_params(path: str, params: dict) -> None:
    """Write every parameter (trainable and frozen) to a checkpoint file."""
    checkpoint.save(path, params)


def load_params(cfg: ModelConfig, path: str) -> dict:
    """Checkpoint -> parameter dict matching `cfg`'s architecture.

    The file must contain exactly the tensors `init_model` would create,
    with identical shapes; anything else is a corrupt or mismatched
    checkpoint.
    """
    arrays = checkpoint.load(path)
    params = init_model(cfg, np.random.default_rng(0))
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise checkpoint.CheckpointError(
            f"checkpoint {path!r} does not match the configured model: "
            f"missing {missing[:3]}, unexpected {extra[:3]}")
    for name, t in params.items():
        if arrays[name].shape != t.data.shape:
            raise checkpoint.CheckpointError(
                f"checkpoint {path!r}: tensor {name!r} has shape "
                f"{arrays[name].shape}, model expects {t.data.shape}")
        t.data = arrays[name]
    return params
