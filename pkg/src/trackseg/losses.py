"""Response-cell labeling and the multi-task training losses.

Cells of the 17x17 response grid are labeled +1/-1.  The two-branch
variant labels a cell positive when it lies within an L2 radius (in grid
cells) of the target's cell; the three-branch variant labels each of the
k anchors at a cell by axis-aligned IoU against the ground-truth box, and
a cell is positive when any of its anchors is.

Positive cells additionally carry a per-cell ground-truth mask: the
ground-truth patch mask cropped to that cell's 127x127 candidate window
and nearest-resampled to the mask head's output side.

Loss terms (all scalars on the autodiff tape):
  mask_loss   binary logistic loss over the pixels of positive cells;
              negative cells contribute exactly zero (their logits are
              never touched, so their gradients are exactly zero too).
              "strict" mode sums over positive cells; "normalized" mode
              (the training default) divides by the positive count so the
              scale does not depend on how many cells matched.
  sim_loss    mean logistic loss of the single-channel score map against
              the +1/-1 cell labels (two-branch).
  score_loss  mean 2-class cross-entropy over all anchors (three-branch).
  box_loss    smooth-L1 of (dx, dy, log dw, log dh) regression errors,
              summed per anchor and averaged over positive anchors only;
              zero when nothing is positive.
  total_loss  weighted sums: two-branch  l1*mask + l2*sim,
              three-branch  l1*mask + l2*score + l3*box.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .anchors import RESPONSE, STRIDE, aligned_iou, axis_to_cwh, encode_boxes
from .geometry import AxisBox

WINDOW = 127   # candidate-window side in search-patch pixels
MASK_SIDE = 63  # mask head output side


@dataclass
class RowLabels:
    """Labels for one training pair.

    row_y: (grid, grid) int8 of {+1, -1}.
    anchor_y / box_targets: per-anchor labels (k, grid, grid) and encoded
        regression targets (k, grid, grid, 4); three-branch only.
    mask_targets: {(i, j) -> (side, side) int8 of {+1, -1}}, present for
        every positive cell when the labeler was given the ground-truth
        mask (and only for positive cells).
    """
    row_y: np.ndarray
    anchor_y: np.ndarray = None
    box_targets: np.ndarray = None
    mask_targets: dict = field(default_factory=dict)

    def positive_cells(self):
        """Positive cells in row-major order."""
        return [(int(i), int(j)) for i, j in np.argwhere(self.row_y == 1)]


def nearest_resample_bits(bits, out_side):
    """Nearest-neighbor resample of a square boolean raster."""
    n = bits.shape[0]
    if bits.shape != (n, n):
        raise ValueError(f"need a square raster, got {bits.shape}")
    if out_side == n:
        return bits.copy()
    src = np.rint((np.arange(out_side) + 0.5) * (n / out_side) - 0.5).astype(np.intp)
    src = np.clip(src, 0, n - 1)
    return bits[np.ix_(src, src)]


def build_mask_targets(patch_mask_bits, cells, side=MASK_SIDE, stride=STRIDE,
                       window=WINDOW):
    """Per-cell {+1, -1} mask targets from the full patch mask.

    Cell (i, j) owns the window rows/cols [stride*i, stride*i + window); the
    window is resampled to (side, side) and thresholded to +1 (inside) /
    -1 (outside).
    """
    bits = np.asarray(patch_mask_bits, dtype=bool)
    out = {}
    for i, j in cells:
        r0, c0 = stride * i, stride * j
        if r0 + window > bits.shape[0] or c0 + window > bits.shape[1]:
            raise ValueError(f"cell ({i}, {j}) window exceeds patch {bits.shape}")
        win = nearest_resample_bits(bits[r0:r0 + window, c0:c0 + window], side)
        out[(i, j)] = np.where(win, 1, -1).astype(np.int8)
    return out


def label_rows_3b(anchors, gt_box, gt_mask=None, pos_thresh=0.6,
                  mask_side=MASK_SIDE):
    """Per-anchor IoU labeling: +1 at IoU >= pos_thresh, else -1.

    A cell is positive when any of its anchors is.  Regression targets are
    encoded against every anchor (they are only ever read at positives).
    gt_box: AxisBox or (cx, cy, w, h) array in search-patch pixels.
    """
    gt = axis_to_cwh(gt_box) if isinstance(gt_box, AxisBox) else np.asarray(gt_box, np.float64)
    if gt[2] <= 0 or gt[3] <= 0:
        raise ValueError(f"degenerate ground-truth box with size {gt[2]}x{gt[3]}")
    iou = aligned_iou(anchors, gt)
    anchor_y = np.where(iou >= pos_thresh, 1, -1).astype(np.int8)
    row_y = np.where((anchor_y == 1).any(axis=0), 1, -1).astype(np.int8)
    labels = RowLabels(row_y=row_y, anchor_y=anchor_y,
                       box_targets=encode_boxes(anchors, gt))
    if gt_mask is not None:
        labels.mask_targets = build_mask_targets(gt_mask, labels.positive_cells(),
                                                 side=mask_side)
    return labels


def label_rows_2b(center_cell, radius=2.0, grid=RESPONSE, gt_mask=None,
                  mask_side=MASK_SIDE):
    """Distance labeling: +1 within `radius` grid cells (L2) of center_cell.

    center_cell may be fractional (the target center rarely sits exactly on
    the grid); it must lie within the grid.
    """
    ci, cj = float(center_cell[0]), float(center_cell[1])
    if not (0 <= ci <= grid - 1 and 0 <= cj <= grid - 1):
        raise ValueError(f"center cell ({ci}, {cj}) outside {grid}x{grid} grid")
    ii, jj = np.mgrid[:grid, :grid]
    d2 = (ii - ci) ** 2 + (jj - cj) ** 2
    row_y = np.where(d2 <= radius * radius, 1, -1).astype(np.int8)
    labels = RowLabels(row_y=row_y)
    if gt_mask is not None:
        labels.mask_targets = build_mask_targets(gt_mask, labels.positive_cells(),
                                                 side=mask_side)
    return labels


def mask_loss(mask_logits, labels, mode="normalized"):
    """Binary logistic mask loss over positive cells.

    mask_logits: (side*side, P) tensor whose columns are the mask-head
    outputs at labels.positive_cells(), in that order.  Per positive cell
    the loss is mean_pixels log(1 + exp(-c*m)); "strict" sums the cells,
    "normalized" averages them.  No positive cells -> exactly 0.
    """
    if mode not in ("strict", "normalized"):
        raise ValueError(f"mask_loss mode must be 'strict' or 'normalized', got {mode!r}")
    cells = labels.positive_cells()
    if not cells:
        return ad.const(np.float32(0.0))
    for cell in cells:
        if cell not in labels.mask_targets:
            raise ValueError(f"positive cell {cell} has no ground-truth mask")
    targets = np.stack([labels.mask_targets[c].reshape(-1) for c in cells], axis=1)
    wh = targets.shape[0]
    if mask_logits.data.shape != targets.shape:
        raise ad.ShapeError(
            f"mask_loss: logits {mask_logits.data.shape} vs targets {targets.shape}")
    per_pixel = ad.softplus(ad.mul(mask_logits, ad.const(-targets.astype(np.float32))))
    denom = wh if mode == "strict" else wh * len(cells)
    return ad.scale(ad.tsum(per_pixel), 1.0 / denom)


def sim_loss(score_logits, labels):
    """Mean logistic loss of the (1, grid, grid) score map against row_y."""
    y = labels.row_y.astype(np.float32)
    if score_logits.data.shape != (1,) + y.shape:
        raise ad.ShapeError(
            f"sim_loss: logits {score_logits.data.shape} vs grid {y.shape}")
    flat = ad.reshape(score_logits, (y.size,))
    return ad.tmean(ad.softplus(ad.mul(flat, ad.const(-y.reshape(-1)))))


def score_loss(score_logits, labels):
    """Mean 2-class cross-entropy over all anchors.

    score_logits: (2k, grid, grid) with channels [0, k) holding the
    negative-class logits and [k, 2k) the positive-class logits, so a
    row-major reshape to (2, k*grid*grid) pairs them up.
    """
    if labels.anchor_y is None:
        raise ValueError("score_loss needs per-anchor labels (three-branch)")
    k, g, _ = labels.anchor_y.shape
    if score_logits.data.shape != (2 * k, g, g):
        raise ad.ShapeError(
            f"score_loss: logits {score_logits.data.shape} vs {k} anchors on {g}x{g}")
    two_class = ad.reshape(score_logits, (2, k * g * g))
    targets = (labels.anchor_y.reshape(-1) == 1).astype(np.int64)
    return ad.softmax_ce2(two_class, targets)


def box_loss(box_deltas, labels):
    """Smooth-L1 regression loss, averaged over positive anchors.

    box_deltas: (4k, grid, grid) with channel 4a+d holding component d of
    anchor a.  Exactly 0 (constant) when no anchor is positive.
    """
    if labels.anchor_y is None or labels.box_targets is None:
        raise ValueError("box_loss needs per-anchor labels and targets (three-branch)")
    k, g, _ = labels.anchor_y.shape
    if box_deltas.data.shape != (4 * k, g, g):
        raise ad.ShapeError(
            f"box_loss: deltas {box_deltas.data.shape} vs {k} anchors on {g}x{g}")
    pos = np.argwhere(labels.anchor_y == 1)
    if len(pos) == 0:
        return ad.const(np.float32(0.0))
    a, i, j = pos[:, 0], pos[:, 1], pos[:, 2]
    comp = np.arange(4)
    flat = ((4 * a[:, None] + comp[None, :]) * g + i[:, None]) * g + j[:, None]
    picked = ad.take(box_deltas, flat.reshape(-1))
    tgt = labels.box_targets[a, i, j, :].reshape(-1).astype(np.float32)
    err = ad.smooth_l1(ad.sub(picked, ad.const(tgt)))
    return ad.scale(ad.tsum(err), 1.0 / len(pos))


@dataclass(frozen=True)
class LossWeights:
    l1: float = 32.0
    l2: float = 1.0
    l3: float = 1.0

    def validate(self):
        if self.l1 < 0 or self.l2 < 0 or self.l3 < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")
        return self


_COMPONENTS = {"2b": ("mask", "sim"), "3b": ("mask", "score", "box")}


def total_loss(variant, components, weights=LossWeights()):
    """Weighted multi-task objective.

    2b: l1*mask + l2*sim.   3b: l1*mask + l2*score + l3*box.
    components: {name -> scalar tensor}; missing or unexpected names are
    rejected.
    """
    weights.validate()
    if variant not in _COMPONENTS:
        raise ValueError(f"variant must be one of {sorted(_COMPONENTS)}, got {variant!r}")
    names = _COMPONENTS[variant]
    for name in names:
        if name not in components:
            raise ValueError(f"missing component {name!r} for variant {variant!r}")
    extra = set(components) - set(names)
    if extra:
        raise ValueError(f"unexpected components {sorted(extra)} for variant {variant!r}")
    ws = (weights.l1, weights.l2, weights.l3)
    out = ad.scale(components[names[0]], ws[0])
    for name, w in zip(names[1:], ws[1:]):
        out = ad.add(out, ad.scale(components[name], w))
    return out
