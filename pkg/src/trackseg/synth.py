"""Synthetic moving-shape video with exact ground truth.

A scene is one textured background plus a target shape (rectangle, ellipse,
or convex polygon) and optional distractor shapes.  All object state is an
analytic function of the frame index — linear motion folded at the frame
borders (an exact bounce), constant angular velocity, exponential scale
drift, and an area-preserving aspect oscillation — so the ground-truth
mask is the exact center-in-shape rasterization of the continuous shape
and the ground-truth rotated box is the shape's analytic minimum-area
bounding rectangle.  Everything derives from the config's single seed.

Training pairs crop an exemplar and a search patch around the target with
the usual context rule (square side sqrt((w+p)(h+p)), p=(w+h)/2; the
search square is twice that side).  Jitter shifts content by up to +-8
patch pixels and rescales by 2^+-1/8 (exemplar) / 2^+-1/4 (search).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import geometry
from .crops import PatchMap, crop_image, crop_mask
from .fileio import Sequence, frame_to_float

SHAPES = ("rectangle", "ellipse", "polygon")

# Exemplar/search patch geometry shared with the tracker.
EXEMPLAR_SIZE = 127
SEARCH_SIZE = 255
MAX_SHIFT_PX = 8.0
EXEMPLAR_LOG2_SCALE = 1.0 / 8.0
SEARCH_LOG2_SCALE = 1.0 / 4.0


@dataclass(frozen=True)
class SceneConfig:
    seed: int
    height: int = 448
    width: int = 448
    shape: str = "rectangle"
    # target start state (continuous frame coordinates)
    cx: float = 224.0
    cy: float = 224.0
    w: float = 180.0
    h: float = 120.0
    angle: float = 0.0
    # motion
    vx: float = 0.0           # px / frame
    vy: float = 0.0
    omega: float = 0.0        # rad / frame
    scale_rate: float = 0.0   # log2 units / frame
    deform_amp: float = 0.0   # log2 units; aspect oscillation amplitude
    deform_period: float = 60.0
    n_vertices: int = 6       # polygon family only
    distractors: int = 0
    noise_cells: int = 12     # background value-noise grid resolution

MIN_OBJECT_PX = 8.0


def _max_log2_extent(cfg: SceneConfig, length: int) -> float:
    return abs(cfg.scale_rate) * max(length - 1, 0) + abs(cfg.deform_amp)


def validate_config(cfg: SceneConfig, length: int) -> None:
    if cfg.shape not in SHAPES:
        raise ValueError(f"unknown shape family {cfg.shape!r} "
                         f"(choose from {SHAPES})")
    if length < 1:
        raise ValueError(f"sequence length must be >= 1, got {length}")
    if cfg.height < 64 or cfg.width < 64:
        raise ValueError(f"frame size {cfg.width}x{cfg.height} too small "
                         f"(minimum 64)")
    if not 3 <= cfg.n_vertices <= 16:
        raise ValueError(f"n_vertices {cfg.n_vertices} out of range [3, 16]")
    if cfg.distractors < 0:
        raise ValueError("distractor count must be >= 0")
    if cfg.deform_period <= 0:
        raise ValueError("deform_period must be positive")
    ex = _max_log2_extent(cfg, length)
    lo = min(cfg.w, cfg.h) * 2.0 ** (-ex)
    if lo < MIN_OBJECT_PX:
        raise ValueError(
            f"object shrinks to {lo:.1f} px (< {MIN_OBJECT_PX} px) within "
            f"{length} frames; increase size or reduce scale/deform rates")
    # The folding margin uses the bounding-circle radius at maximum scale;
    # the whole object must stay strictly inside the frame.
    r = 0.5 * math.hypot(cfg.w, cfg.h) * 2.0 ** ex
    if 2 * (r + 2.0) >= min(cfg.height, cfg.width) - 1:
        raise ValueError(
            f"object diagonal {2 * r:.0f} px cannot bounce inside a "
            f"{cfg.width}x{cfg.height} frame")


def _fold(u: float, lo: float, hi: float) -> float:
    """Reflect an unbounded coordinate into [lo, hi] (triangle wave); linear
    motion through _fold is an exact bounce off the interval ends."""
    span = hi - lo
    if span <= 0:
        return lo
    d = math.fmod(u - lo, 2.0 * span)
    if d < 0:
        d += 2.0 * span
    return lo + (d if d <= span else 2.0 * span - d)


def _margin(w: float, h: float, max_log2: float) -> float:
    return 0.5 * math.hypot(w, h) * 2.0 ** max_log2 + 2.0


def target_state(cfg: SceneConfig, t: int, length: int):
    """(cx, cy, w, h, angle) of the target at frame t."""
    l2 = cfg.scale_rate * t
    d = cfg.deform_amp * math.sin(2.0 * math.pi * t / cfg.deform_period)
    w = cfg.w * 2.0 ** (l2 + d)
    h = cfg.h * 2.0 ** (l2 - d)
    ang = cfg.angle + cfg.omega * t
    m = _margin(cfg.w, cfg.h, _max_log2_extent(cfg, length))
    cx = _fold(cfg.cx + cfg.vx * t, m, cfg.width - 1.0 - m)
    cy = _fold(cfg.cy + cfg.vy * t, m, cfg.height - 1.0 - m)
    return cx, cy, w, h, ang


def _polygon_unit_angles(rng: np.random.Generator, k: int) -> np.ndarray:
    # One vertex per angular sector, jittered: sorted angles on a closed
    # curve always give a convex polygon once scaled/rotated.
    return (np.arange(k) + rng.uniform(0.15, 0.85, size=k)) * (2.0 * np.pi / k)


def _shape_vertices(state, unit_angles: np.ndarray) -> np.ndarray:
    cx, cy, w, h, ang = state
    ux = 0.5 * w * np.cos(unit_angles)
    uy = 0.5 * h * np.sin(unit_angles)
    ca, sa = math.cos(ang), math.sin(ang)
    return np.stack([cx + ca * ux - sa * uy, cy + sa * ux + ca * uy], axis=1)


def _raster_shape(shape: str, state, unit_angles, height, width) -> np.ndarray:
    """Exact center-in-shape rasterization onto the full frame."""
    cx, cy, w, h, ang = state
    if shape == "rectangle":
        return geometry.rasterize_box(
            geometry.RotatedBox(cx, cy, w, h, ang), height, width).bits
    bits = np.zeros((height, width), dtype=bool)
    r = 0.5 * math.hypot(w, h) + 1.0
    y0, y1 = max(int(math.floor(cy - r)), 0), min(int(math.ceil(cy + r)), height - 1)
    x0, x1 = max(int(math.floor(cx - r)), 0), min(int(math.ceil(cx + r)), width - 1)
    if y0 > y1 or x0 > x1:
        return bits
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    px = xs[None, :] - cx
    py = ys[:, None] - cy
    if shape == "ellipse":
        ca, sa = math.cos(ang), math.sin(ang)
        u = ca * px + sa * py
        v = -sa * px + ca * py
        inside = (2.0 * u / w) ** 2 + (2.0 * v / h) ** 2 <= 1.0
    elif shape == "polygon":
        verts = _shape_vertices(state, unit_angles)
        inside = np.ones((len(ys), len(xs)), dtype=bool)
        for i in range(len(verts)):
            ax, ay = verts[i]
            ex, ey = verts[(i + 1) % len(verts)] - verts[i]
            # CCW polygon: interior is the non-negative side of each edge.
            inside &= ex * (py + cy - ay) - ey * (px + cx - ax) >= 0.0
    else:
        raise ValueError(f"unknown shape family {shape!r}")
    bits[y0:y1 + 1, x0:x1 + 1] = inside
    return bits


def _analytic_box(shape, state, unit_angles) -> geometry.RotatedBox:
    cx, cy, w, h, ang = state
    if shape in ("rectangle", "ellipse"):
        # An ellipse's minimum-area bounding rectangle is aligned with its
        # axes, so both families share the analytic form.
        return geometry.RotatedBox(cx, cy, w, h, ang)
    return geometry.min_area_rect(_shape_vertices(state, unit_angles))


def _value_noise(rng: np.random.Generator, height, width, cells) -> np.ndarray:
    """(H, W, 3) float background: a coarse random grid upsampled bilinearly."""
    grid = rng.uniform(0.05, 0.50, size=(cells + 1, cells + 1, 3))
    gy = np.linspace(0.0, cells, height)
    gx = np.linspace(0.0, cells, width)
    iy = np.minimum(gy.astype(np.int64), cells - 1)
    ix = np.minimum(gx.astype(np.int64), cells - 1)
    fy = (gy - iy)[:, None, None]
    fx = (gx - ix)[None, :, None]
    g = grid
    top = g[iy][:, ix] * (1 - fx) + g[iy][:, ix + 1] * fx
    bot = g[iy + 1][:, ix] * (1 - fx) + g[iy + 1][:, ix + 1] * fx
    return top * (1 - fy) + bot * fy


@dataclass(frozen=True)
class _Actor:
    cfg: SceneConfig          # geometry reused for distractors
    color: np.ndarray         # (3,) float
    unit_angles: np.ndarray | None


def _make_distractor(rng: np.random.Generator, cfg: SceneConfig,
                     length: int) -> _Actor:
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    size = rng.uniform(0.35, 0.75) * min(cfg.w, cfg.h)
    w = size * 2.0 ** rng.uniform(-0.4, 0.4)
    h = size * 2.0 ** rng.uniform(-0.4, 0.4)
    m = _margin(w, h, 0.0)
    dcfg = replace(
        cfg, shape=shape, w=w, h=h,
        cx=rng.uniform(m, cfg.width - 1 - m),
        cy=rng.uniform(m, cfg.height - 1 - m),
        angle=rng.uniform(-np.pi / 2, np.pi / 2),
        vx=rng.uniform(-2.5, 2.5), vy=rng.uniform(-2.5, 2.5),
        omega=rng.uniform(-0.05, 0.05), scale_rate=0.0, deform_amp=0.0,
        n_vertices=int(rng.integers(4, 8)))
    ua = _polygon_unit_angles(rng, dcfg.n_vertices) if shape == "polygon" else None
    return _Actor(dcfg, rng.uniform(0.45, 0.95, size=3), ua)


def gen_sequence(cfg: SceneConfig, length: int) -> Sequence:
    """Render a sequence with exact per-frame gt masks and rotated boxes."""
    validate_config(cfg, length)
    rng = np.random.default_rng(np.uint64(cfg.seed))
    background = _value_noise(rng, cfg.height, cfg.width, cfg.noise_cells)
    target_color = rng.uniform(0.55, 0.95, size=3)
    unit_angles = (_polygon_unit_angles(rng, cfg.n_vertices)
                   if cfg.shape == "polygon" else None)
    distractors = [_make_distractor(rng, cfg, length)
                   for _ in range(cfg.distractors)]

    frames, masks, boxes = [], [], []
    for t in range(length):
        img = background.copy()
        for actor in distractors:
            st = target_state(actor.cfg, t, length)
            bits = _raster_shape(actor.cfg.shape, st, actor.unit_angles,
                                 cfg.height, cfg.width)
            img[bits] = actor.color
        st = target_state(cfg, t, length)
        bits = _raster_shape(cfg.shape, st, unit_angles, cfg.height, cfg.width)
        if not bits.any():
            raise ValueError(f"target rasterized to an empty mask at frame {t}")
        img[bits] = target_color
        frames.append(np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8))
        masks.append(bits)
        boxes.append(_analytic_box(cfg.shape, st, unit_angles))
    meta = {"seed": str(cfg.seed), "length": str(length),
            "height": str(cfg.height), "width": str(cfg.width),
            "shape": cfg.shape}
    return Sequence(frames=frames, masks=masks, boxes=boxes, meta=meta)


# Shapes inscribe their (w, h) ellipse, so polygon/ellipse rasters span less
# than (w, h); scale them up so the mask's rotated-box extents stay in the
# regime where the +-1 px raster pad keeps mbr-vs-analytic IoU above 0.98.
_SIZE_FACTOR = {"rectangle": 1.0, "ellipse": 1.1, "polygon": 1.3}


def random_scene_config(rng: np.random.Generator, length: int,
                        height: int = 448, width: int = 448,
                        shapes=SHAPES, short_side=(120.0, 140.0),
                        aspect=(1.35, 1.8),
                        max_omega: float = 0.02, max_deform: float = 0.08,
                        max_speed: float = 3.0,
                        max_distractors: int = 2) -> SceneConfig:
    """Draw a renderable scene; all scene randomness re-derives from the
    config's own 64-bit seed so the draw only fixes parameters.

    Aspect ratio is kept away from 1: a near-square object has an
    ill-conditioned minimum-area rectangle (every angle gives almost the
    same area), which makes rotated-box ground truth meaningless."""
    h = rng.uniform(*short_side)
    a = rng.uniform(*aspect)
    shape = shapes[int(rng.integers(len(shapes)))]
    f = _SIZE_FACTOR[shape]
    # Total log2 scale drift is capped so the aspect never collapses below
    # aspect_min * 2^(-2*deform) ~ 1.2 and renderability bounds stay easy.
    scale_rate = rng.uniform(-1.0, 1.0) * min(0.04 / max(length - 1, 1), 0.002)
    deform = rng.uniform(0.0, min(max_deform, 0.5 * math.log2(a / 1.2)))
    cfg = SceneConfig(
        seed=int(rng.integers(0, 2 ** 63)), height=height, width=width,
        shape=shape,
        w=a * h * f, h=h * f, angle=rng.uniform(-np.pi / 2, np.pi / 2),
        vx=rng.uniform(-max_speed, max_speed),
        vy=rng.uniform(-max_speed, max_speed),
        omega=rng.uniform(-max_omega, max_omega),
        scale_rate=scale_rate, deform_amp=deform,
        deform_period=rng.uniform(40.0, 90.0),
        n_vertices=int(rng.integers(6, 10)),
        distractors=int(rng.integers(0, max_distractors + 1)),
        cx=0.0, cy=0.0)
    m = _margin(cfg.w, cfg.h, _max_log2_extent(cfg, length))
    return replace(cfg,
                   cx=rng.uniform(m, width - 1.0 - m),
                   cy=rng.uniform(m, height - 1.0 - m))


# ---------------------------------------------------------------------------
# training pairs

def context_side(w: float, h: float) -> float:
    """Square crop side with the standard context margin p = (w + h) / 2."""
    p = 0.5 * (w + h)
    return math.sqrt((w + p) * (h + p))


@dataclass(frozen=True)
class TrainingPair:
    z: np.ndarray                 # (3, 127, 127) float32
    x: np.ndarray                 # (3, 255, 255) float32
    box: geometry.AxisBox         # gt axis box in search-patch coordinates
    mask: np.ndarray              # (255, 255) bool, gt mask in x
    frame_z: int
    frame_x: int
    jitter_z: tuple               # (shift_x, shift_y, log2_scale)
    jitter_x: tuple


def _patch_for(mask_bits: np.ndarray, out: int, side_scale: float,
               shift=(0.0, 0.0), log2_scale: float = 0.0) -> PatchMap:
    bb = geometry.min_max_box(geometry.BinaryMask(mask_bits))
    side = context_side(bb.width, bb.height) * side_scale * 2.0 ** log2_scale
    cx, cy = bb.center
    return PatchMap(cx=cx, cy=cy, scale=side / out, out=out,
                    shift_x=shift[0], shift_y=shift[1])


def sample_pair(seq: Sequence, jitter: bool,
                rng: np.random.Generator) -> TrainingPair:
    n = len(seq)
    if n < 2:
        raise ValueError(f"need a sequence of length >= 2, got {n}")
    iz = int(rng.integers(n))
    ix = int(rng.integers(n - 1))
    if ix >= iz:
        ix += 1

    if jitter:
        jz = (float(rng.uniform(-MAX_SHIFT_PX, MAX_SHIFT_PX)),
              float(rng.uniform(-MAX_SHIFT_PX, MAX_SHIFT_PX)),
              float(rng.uniform(-EXEMPLAR_LOG2_SCALE, EXEMPLAR_LOG2_SCALE)))
        jx = (float(rng.uniform(-MAX_SHIFT_PX, MAX_SHIFT_PX)),
              float(rng.uniform(-MAX_SHIFT_PX, MAX_SHIFT_PX)),
              float(rng.uniform(-SEARCH_LOG2_SCALE, SEARCH_LOG2_SCALE)))
    else:
        jz = jx = (0.0, 0.0, 0.0)

    pm_z = _patch_for(seq.masks[iz], EXEMPLAR_SIZE, 1.0,
                      shift=jz[:2], log2_scale=jz[2])
    pm_x = _patch_for(seq.masks[ix], SEARCH_SIZE, 2.0,
                      shift=jx[:2], log2_scale=jx[2])

    z = crop_image(frame_to_float(seq.frames[iz]), pm_z)
    x = crop_image(frame_to_float(seq.frames[ix]), pm_x)
    mask = crop_mask(seq.masks[ix], pm_x)
    if not mask.any():
        raise ValueError(
            f"gt mask empty after cropping frame {ix}; jitter bounds and "
            f"config renderability should prevent this")

    bb = geometry.min_max_box(geometry.BinaryMask(seq.masks[ix]))
    qx0, qy0 = pm_x.to_patch(bb.x0, bb.y0)
    qx1, qy1 = pm_x.to_patch(bb.x1, bb.y1)
    box = geometry.AxisBox(float(qx0), float(qy0), float(qx1), float(qy1))
    return TrainingPair(z=z, x=x, box=box, mask=mask, frame_z=iz, frame_x=ix,
                        jitter_z=jz, jitter_x=jx)
