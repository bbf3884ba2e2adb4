"""Siamese feature extractor and the cross-correlation that fuses the two
branches.

Geometry contract (the rest of the pipeline leans on it):

* exemplar input 127x127 -> 15x15 features; search input 255x255 -> 31x31,
  both at effective stride 8;
* depthwise cross-correlation of the two feature maps gives a 17x17
  multi-channel response; response cell (i, j) is computed from search
  feature window [i, i+15) x [j, j+15), i.e. from input pixels
  [8i, 8i+127) x [8j, 8j+127) (plus a small dilation halo in the
  four-stage variant).

Variants:

* ``four_stage``: three valid 3x3 stride-2 convolutions (127->63->31->15)
  plus one 3x3 dilation-2 stride-1 stage that widens the receptive field
  at constant resolution.  The stride-2/4/8 intermediates come back as
  skip features for mask refinement.  The dilated stage pads by 2, so
  response cells within 2 cells of the border see a halo beyond the
  127-pixel window.
* ``single_stage``: one valid 15x15 stride-8 convolution.  No skips, but
  each response cell depends on *exactly* its 127-pixel window, which is
  what the mask-locality test needs.

Each branch gets its own (unshared) 1x1 adjust convolution before the
correlation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

EXEMPLAR_IN = 127
SEARCH_IN = 255
EXEMPLAR_FEAT = 15
SEARCH_FEAT = 31
RESPONSE = 17
STRIDE = 8

VARIANTS = ("four_stage", "single_stage")


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "four_stage"
    in_channels: int = 3
    channels: tuple = (8, 16, 24, 32)
    adjust_channels: int = 48

    @property
    def feat_channels(self) -> int:
        return self.channels[-1]

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown backbone variant {self.variant!r} "
                             f"(choose from {VARIANTS})")
        if self.variant == "four_stage" and len(self.channels) != 4:
            raise ValueError(f"four_stage wants 4 channel counts, "
                             f"got {self.channels}")
        if min(self.channels) < 1 or self.adjust_channels < 1:
            raise ValueError("channel counts must be positive")


def conv_param(params: dict, rng: np.random.Generator, name: str,
               cout: int, cin: int, k: int, std: float | None = None,
               bias: bool = True) -> None:
    """He-initialized conv weight + zero bias under name.w / name.b.
    bias=False creates only the weight (for convolutions feeding a
    normalization, which would cancel any bias)."""
    if std is None:
        std = math.sqrt(2.0 / (cin * k * k))
    w = rng.standard_normal((cout, cin, k, k)).astype(np.float32) * np.float32(std)
    params[name + ".w"] = ad.param(w)
    if bias:
        params[name + ".b"] = ad.param(np.zeros(cout, dtype=np.float32))


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> dict:
    cfg.validate()
    params: dict = {}
    if cfg.variant == "four_stage":
        c1, c2, c3, c4 = cfg.channels
        conv_param(params, rng, "backbone.conv1", c1, cfg.in_channels, 3)
        conv_param(params, rng, "backbone.conv2", c2, c1, 3)
        conv_param(params, rng, "backbone.conv3", c3, c2, 3)
        conv_param(params, rng, "backbone.conv4", c4, c3, 3)
    else:
        conv_param(params, rng, "backbone.conv1",
                   cfg.feat_channels, cfg.in_channels, 15)
    conv_param(params, rng, "adjust.z",
               cfg.adjust_channels, cfg.feat_channels, 1)
    conv_param(params, rng, "adjust.x",
               cfg.adjust_channels, cfg.feat_channels, 1)
    return params


def _conv(params, name, x, **kw):
    return ad.conv2d(x, params[name + ".w"], params[name + ".b"], **kw)


def embed(cfg: BackboneConfig, params: dict, img: ad.Tensor):
    """img (C, 127, 127) or (C, 255, 255) -> (features, skips).

    skips (four_stage only, keyed by stride): {2: (c1, S/2, S/2),
    4: (c2, S/4, S/4), 8: (c3, S/8, S/8)} with the valid-conv sizes
    63/31/15 for the exemplar and 127/63/31 for the search branch.
    """
    c, h, w = img.data.shape
    if c != cfg.in_channels or h != w or h not in (EXEMPLAR_IN, SEARCH_IN):
        raise ad.ShapeError(
            f"embed: want ({cfg.in_channels}, 127, 127) or "
            f"({cfg.in_channels}, 255, 255), got {img.data.shape}")
    if cfg.variant == "single_stage":
        feat = ad.relu(_conv(params, "backbone.conv1", img, stride=STRIDE))
        return feat, {}
    h1 = ad.relu(_conv(params, "backbone.conv1", img, stride=2))
    h2 = ad.relu(_conv(params, "backbone.conv2", h1, stride=2))
    h3 = ad.relu(_conv(params, "backbone.conv3", h2, stride=2))
    h4 = ad.relu(_conv(params, "backbone.conv4", h3,
                       stride=1, dilation=2, padding=2))
    return h4, {2: h1, 4: h2, 8: h3}


def adjust(params: dict, feat: ad.Tensor, branch: str) -> ad.Tensor:
    if branch not in ("z", "x"):
        raise ValueError(f"branch must be 'z' or 'x', got {branch!r}")
    return _conv(params, f"adjust.{branch}", feat)


def forward_pair(cfg: BackboneConfig, params: dict,
                 z_img: ad.Tensor, x_img: ad.Tensor):
    """-> (response (adjust_channels, 17, 17), x-branch skips)."""
    fz, _ = embed(cfg, params, z_img)
    fx, skips = embed(cfg, params, x_img)
    az = adjust(params, fz, "z")
    ax = adjust(params, fx, "x")
    row = ad.depthwise_xcorr(ax, az)
    return row, skips
