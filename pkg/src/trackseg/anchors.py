"""Anchor grid for the box-regression branch.

Each response cell (i, j) of the 17x17 correlation map corresponds to the
127x127 search-patch window starting at pixel (8i, 8j); its k anchors all
sit at that window's center, patch pixel (cx, cy) = (8j + 63, 8i + 63).
Anchors share one nominal side length and vary by aspect ratio r = w/h at
constant area.  Boxes are (cx, cy, w, h) arrays; deltas use the standard
(dx, dy, log dw, log dh) encoding relative to the anchor.
"""

from dataclasses import dataclass

import numpy as np

RESPONSE = 17
STRIDE = 8
CENTER_OFFSET = 63  # window [8c, 8c+127) has its center at 8c + 63


@dataclass(frozen=True)
class AnchorConfig:
    side: float = 64.0
    ratios: tuple = (1.0 / 3.0, 0.5, 1.0, 2.0, 3.0)

    @property
    def k(self):
        return len(self.ratios)

    def validate(self):
        if self.side <= 0:
            raise ValueError(f"anchor side must be positive, got {self.side}")
        if not self.ratios or any(r <= 0 for r in self.ratios):
            raise ValueError(f"aspect ratios must be positive, got {self.ratios}")
        return self


def generate_anchors(cfg=AnchorConfig(), grid=RESPONSE, stride=STRIDE):
    """All anchors as a (k, grid, grid, 4) float64 array of (cx, cy, w, h).

    Deterministic; anchor [a, i, j] is ratio cfg.ratios[a] at cell (i, j).
    For ratio r the box is side*sqrt(r) wide by side/sqrt(r) tall, so
    w/h == r and the area stays side**2.
    """
    cfg.validate()
    k = cfg.k
    out = np.zeros((k, grid, grid, 4), dtype=np.float64)
    cells = np.arange(grid, dtype=np.float64) * stride + CENTER_OFFSET
    out[..., 0] = cells[None, None, :]  # cx follows the column index
    out[..., 1] = cells[None, :, None]  # cy follows the row index
    for a, r in enumerate(cfg.ratios):
        out[a, ..., 2] = cfg.side * np.sqrt(r)
        out[a, ..., 3] = cfg.side / np.sqrt(r)
    return out


def axis_to_cwh(box):
    """geometry.AxisBox -> (cx, cy, w, h) float64 array."""
    cx, cy = box.center
    return np.array([cx, cy, box.width, box.height], dtype=np.float64)


def encode_boxes(anchors, box):
    """Regression targets of `box` (4,) against each anchor (..., 4)."""
    b = np.asarray(box, dtype=np.float64)
    if b[2] <= 0 or b[3] <= 0:
        raise ValueError(f"cannot encode degenerate box with size {b[2]}x{b[3]}")
    t = np.empty(anchors.shape, dtype=np.float64)
    t[..., 0] = (b[0] - anchors[..., 0]) / anchors[..., 2]
    t[..., 1] = (b[1] - anchors[..., 1]) / anchors[..., 3]
    t[..., 2] = np.log(b[2] / anchors[..., 2])
    t[..., 3] = np.log(b[3] / anchors[..., 3])
    return t


def decode_box(anchor, deltas):
    """Inverse of encode_boxes for matching-shaped (..., 4) arrays."""
    anchor = np.asarray(anchor, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(anchor.shape, deltas.shape), dtype=np.float64)
    out[..., 0] = anchor[..., 0] + deltas[..., 0] * anchor[..., 2]
    out[..., 1] = anchor[..., 1] + deltas[..., 1] * anchor[..., 3]
    out[..., 2] = anchor[..., 2] * np.exp(deltas[..., 2])
    out[..., 3] = anchor[..., 3] * np.exp(deltas[..., 3])
    return out


def aligned_iou(anchors, box):
    """Axis-aligned IoU of each anchor (..., 4) with one box (4,), both as
    (cx, cy, w, h) footprints."""
    b = np.asarray(box, dtype=np.float64)
    ax0 = anchors[..., 0] - 0.5 * anchors[..., 2]
    ax1 = anchors[..., 0] + 0.5 * anchors[..., 2]
    ay0 = anchors[..., 1] - 0.5 * anchors[..., 3]
    ay1 = anchors[..., 1] + 0.5 * anchors[..., 3]
    ix = np.clip(np.minimum(ax1, b[0] + 0.5 * b[2]) - np.maximum(ax0, b[0] - 0.5 * b[2]), 0.0, None)
    iy = np.clip(np.minimum(ay1, b[1] + 0.5 * b[3]) - np.maximum(ay0, b[1] - 0.5 * b[3]), 0.0, None)
    inter = ix * iy
    union = anchors[..., 2] * anchors[..., 3] + b[2] * b[3] - inter
    return inter / union
