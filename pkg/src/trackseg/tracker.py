"""Online tracking loop: crop, forward, select, decode, update.

Per frame: crop a 255x255 search patch around the previous reference box
(side = 2x the exemplar context side), run the search branch against the
cached exemplar features, pick the response cell with the highest score
(ties break to the lowest row-major index), decode that cell's refined
mask, binarize at probability 0.5, and map it back to frame coordinates.

The reported box is fit to the mask with a configurable strategy
(min-max / rotated MBR / optimized rotated box; default MBR).  The next
reference comes from the box branch's decoded anchor offset at the argmax
cell (three-branch) or the min-max fit of the mask (two-branch).  An empty
mask keeps the previous reference and re-emits the previous box.

The exemplar is embedded once at init and never updated, so a sequence's
result at frame t depends only on frames 0..t (strict causality).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import anchors as anch
from . import autodiff as ad
from . import config as cfgmod
from . import geometry, model, synth
from .crops import PatchMap, crop_image, resample_to_frame
from .fileio import frame_to_float

SEARCH = 255
EXEMPLAR = 127
REFINE_SIDE = 127
STRATEGIES = ("minmax", "mbr", "opt")
MIN_REF_SIDE = 4.0         # reference-box size floor in frame pixels
CENTER_CELL = (anch.RESPONSE // 2, anch.RESPONSE // 2)


@dataclass(frozen=True)
class TrackerParams:
    """Everything `step` needs besides the state: network + policy."""
    model: model.ModelConfig
    weights: dict                       # parameter name -> Tensor
    anchor_grid: np.ndarray | None      # (k, 17, 17, 4); three-branch only
    box_strategy: str = "mbr"
    cosine_window: float = 0.0          # selection bias weight, 0 = off


def build(cfg: dict, params: dict, box_strategy: str = "mbr") -> TrackerParams:
    if box_strategy not in STRATEGIES:
        raise ValueError(f"unknown box strategy {box_strategy!r}; "
                         f"expected one of {STRATEGIES}")
    mcfg = cfgmod.model_config(cfg)
    grid = None
    if mcfg.variant == "3b":
        grid = anch.generate_anchors(cfgmod.anchor_config(cfg),
                                     anch.RESPONSE, anch.STRIDE)
    return TrackerParams(model=mcfg, weights=params, anchor_grid=grid,
                         box_strategy=box_strategy,
                         cosine_window=cfg["cosine_window"])


@dataclass
class TrackState:
    reference: geometry.AxisBox        # frame coordinates
    exemplar: ad.Tensor                # adjusted features, frozen at init
    frame_index: int
    last_score: float
    last_box: geometry.RotatedBox      # emitted again on empty-mask fallback


@dataclass(frozen=True)
class FrameResult:
    mask: np.ndarray                   # (H, W) bool, frame coordinates
    box: geometry.RotatedBox
    score: float
    row_cell: tuple


# ---------------------------------------------------------------------------
# helpers

def _as_chw(frame: np.ndarray) -> np.ndarray:
    """Accept (H, W, 3) uint8 or (3, H, W) float32 in [0, 1]."""
    if frame.ndim == 3 and frame.shape[2] == 3 and frame.dtype == np.uint8:
        return frame_to_float(frame)
    if frame.ndim == 3 and frame.shape[0] == 3:
        return np.asarray(frame, dtype=np.float32)
    raise ValueError(f"frame must be (H, W, 3) uint8 or (3, H, W) float, "
                     f"got shape {frame.shape} dtype {frame.dtype}")


def _sigmoid(v: float) -> float:
    return 1.0 / (1.0 + math.exp(-v)) if v >= 0 else \
        math.exp(v) / (1.0 + math.exp(v))


def _cell_margins(tp: TrackerParams, score_data: np.ndarray):
    """(per-cell selection margin (17, 17), per-anchor margins or None)."""
    if tp.model.variant == "3b":
        k = tp.model.k
        margins = score_data[k:] - score_data[:k]
        return margins.max(axis=0), margins
    return score_data[0], None


_WINDOW_CACHE: dict = {}


def _cosine_window(side: int) -> np.ndarray:
    if side not in _WINDOW_CACHE:
        w = np.hanning(side + 2)[1:-1]
        _WINDOW_CACHE[side] = np.outer(w, w)
    return _WINDOW_CACHE[side]


def _report_box(mask_bits: np.ndarray, strategy: str) -> geometry.RotatedBox:
    """Fit the reported box; degenerate masks (too thin for a rotated
    rectangle) fall back to the axis-aligned min-max fit."""
    bm = geometry.BinaryMask(mask_bits)
    mm = geometry.min_max_box(bm)
    axis = geometry.RotatedBox(*mm.center, mm.width, mm.height, 0.0)
    if strategy == "minmax":
        return axis
    try:
        return geometry.mbr_box(bm) if strategy == "mbr" \
            else geometry.opt_box(bm)
    except ValueError:
        return axis


def _rasterize_axis_box(box: geometry.AxisBox, height: int,
                        width: int) -> np.ndarray:
    rb = geometry.RotatedBox(*box.center, box.width, box.height, 0.0)
    return geometry.rasterize_box(rb, height, width)


def _clamped_reference(cx, cy, w, h, height, width) -> geometry.AxisBox:
    w = min(max(float(w), MIN_REF_SIDE), 2.0 * width)
    h = min(max(float(h), MIN_REF_SIDE), 2.0 * height)
    cx = min(max(float(cx), 0.0), width - 1.0)
    cy = min(max(float(cy), 0.0), height - 1.0)
    return geometry.AxisBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


# ---------------------------------------------------------------------------
# the loop

def init(frame: np.ndarray, init_box: geometry.AxisBox,
         tp: TrackerParams) -> tuple:
    """-> (TrackState, FrameResult for frame 0).

    The frame-0 result is derived from the init box itself (its rectangle
    as mask and box, score 1.0): the tracker is given, not asked, where
    the target is.
    """
    frame_f = _as_chw(frame)
    _, height, width = frame_f.shape
    b = init_box
    if not (-0.5 <= b.x0 and b.x1 <= width - 0.5 and
            -0.5 <= b.y0 and b.y1 <= height - 0.5):
        raise ValueError(f"init box {b} outside the {width}x{height} frame")

    side_z = synth.context_side(b.width, b.height)
    cx, cy = b.center
    pm = PatchMap(cx=cx, cy=cy, scale=side_z / EXEMPLAR, out=EXEMPLAR)
    z = crop_image(frame_f, pm)
    exemplar = model.exemplar_features(tp.model, tp.weights, ad.tensor(z))

    box0 = geometry.RotatedBox(cx, cy, b.width, b.height, 0.0)
    result = FrameResult(mask=_rasterize_axis_box(b, height, width),
                         box=box0, score=1.0, row_cell=CENTER_CELL)
    state = TrackState(reference=b, exemplar=exemplar, frame_index=0,
                       last_score=1.0, last_box=box0)
    return state, result


def step(state: TrackState, frame: np.ndarray,
         tp: TrackerParams) -> tuple:
    """-> (next TrackState, FrameResult). One causal tracking step."""
    frame_f = _as_chw(frame)
    _, height, width = frame_f.shape
    ref = state.reference
    cx, cy = ref.center
    side_x = 2.0 * synth.context_side(ref.width, ref.height)
    pm = PatchMap(cx=cx, cy=cy, scale=side_x / SEARCH, out=SEARCH)

    x = crop_image(frame_f, pm)
    feats = model.forward_search(tp.model, tp.weights, state.exemplar,
                                 ad.tensor(x))
    cell_map, anchor_margins = _cell_margins(
        tp, model.score_logits(tp.model, tp.weights, feats).data)

    selection = cell_map
    if tp.cosine_window > 0.0:
        probs = 1.0 / (1.0 + np.exp(-cell_map))
        selection = (1.0 - tp.cosine_window) * probs \
            + tp.cosine_window * _cosine_window(cell_map.shape[0])
    flat = int(np.argmax(selection))
    i, j = flat // cell_map.shape[1], flat % cell_map.shape[1]
    score = _sigmoid(float(cell_map[i, j]))

    logits = model.refine_logits_at(tp.model, tp.weights, feats, (i, j)).data
    canvas = np.zeros((SEARCH, SEARCH), dtype=np.float32)
    window = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    canvas[anch.STRIDE * i:anch.STRIDE * i + REFINE_SIDE,
           anch.STRIDE * j:anch.STRIDE * j + REFINE_SIDE] = window
    mask_bits = resample_to_frame(canvas, pm, height, width) > 0.5

    if mask_bits.any():
        box = _report_box(mask_bits, tp.box_strategy)
        if tp.model.variant == "3b":
            a = int(np.argmax(anchor_margins[:, i, j]))
            deltas = model.box_deltas(tp.model, tp.weights, feats).data
            pcx, pcy, pw, ph = anch.decode_box(
                tp.anchor_grid[a, i, j], deltas[4 * a:4 * a + 4, i, j])
            fx, fy = pm.to_frame(pcx, pcy)
            reference = _clamped_reference(fx, fy, pw * pm.scale,
                                           ph * pm.scale, height, width)
        else:
            mm = geometry.min_max_box(geometry.BinaryMask(mask_bits))
            reference = _clamped_reference(*mm.center, mm.width, mm.height,
                                           height, width)
    else:
        box = state.last_box
        reference = ref

    next_state = TrackState(reference=reference, exemplar=state.exemplar,
                            frame_index=state.frame_index + 1,
                            last_score=score, last_box=box)
    return next_state, FrameResult(mask=mask_bits, box=box, score=score,
                                   row_cell=(i, j))


def track_sequence(frames, init_box: geometry.AxisBox,
                   tp: TrackerParams) -> tuple:
    """-> (frame-0 FrameResult, [FrameResult for each later frame]).

    Strictly causal: each result is produced before the next frame is
    read, so results are independent of any frames appended afterwards.
    """
    if len(frames) < 1:
        raise ValueError("need at least one frame")
    state, first = init(frames[0], init_box, tp)
    results = []
    for frame in frames[1:]:
        state, res = step(state, frame, tp)
        results.append(res)
    return first, results


def track_objects(frames, init_boxes, tp: TrackerParams) -> list:
    """Multi-object tracking = independent single-object inferences."""
    return [track_sequence(frames, box, tp) for box in init_boxes]
