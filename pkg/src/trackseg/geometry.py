"""Binary masks, axis-aligned and rotated boxes, and the three mask-to-box
strategies (min_max, mbr, opt) plus rotated-box IoU.

Coordinate conventions, used consistently everywhere:

* x = column index, y = row index, both increasing right/down.
* A set pixel (r, c) occupies the unit square [c-0.5, c+0.5] x [r-0.5, r+0.5]
  (its *footprint*); its center sits at integer coordinates (c, r).
* min_max_box returns the footprint box of the set pixels.  mbr_box runs
  rotating calipers over the convex hull of the pixel *centers* and then grows
  both extents by 1 (half a pixel per side along the box axes), so an
  axis-aligned filled rectangle comes back exactly as its footprint box and a
  single pixel as a unit box.  Degenerate (collinear) masks therefore get the
  thin dimension clamped to one pixel automatically.
* The caliper candidate set is every hull edge direction plus angle 0; the
  angle-0 candidate is what makes area(mbr) <= area(min_max) hold exactly.
* RotatedBox angles are radians from the +x axis toward +y, normalized to
  [-pi/2, pi/2); corners materialize counter-clockwise in the (x, y) plane
  (positive shoelace area).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "EmptyMaskError", "BinaryMask", "AxisBox", "RotatedBox",
    "binarize", "mask_iou", "min_max_box", "mbr_box", "opt_box",
    "convex_hull", "min_area_rect", "rotated_iou", "corners",
    "box_from_corners", "rasterize_box", "opt_objective",
]


class EmptyMaskError(ValueError):
    """Raised by box strategies when the mask has no set pixels."""


@dataclass
class BinaryMask:
    bits: np.ndarray        # bool (H, W)

    def __post_init__(self):
        self.bits = np.asarray(self.bits)
        if self.bits.ndim != 2:
            raise ValueError(f"BinaryMask needs a 2-d array, got shape {self.bits.shape}")
        if self.bits.dtype != bool:
            self.bits = self.bits.astype(bool)

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]

    def count(self):
        return int(self.bits.sum())

    def is_empty(self):
        return not self.bits.any()


@dataclass
class AxisBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"AxisBox needs x0<x1 and y0<y1, got ({self.x0}, {self.y0}, {self.x1}, {self.y1})")

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    @property
    def center(self):
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def area(self):
        return self.width * self.height

    def as_rotated(self):
        cx, cy = self.center
        return RotatedBox(cx, cy, self.width, self.height, 0.0)


def _norm_angle(theta):
    # rectangles repeat every pi; fold into [-pi/2, pi/2)
    return (theta + np.pi / 2) % np.pi - np.pi / 2


@dataclass
class RotatedBox:
    cx: float
    cy: float
    w: float
    h: float
    angle: float        # radians, [-pi/2, pi/2)

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"RotatedBox needs positive extents, got w={self.w}, h={self.h}")
        self.angle = float(_norm_angle(self.angle))

    def area(self):
        return self.w * self.h


def binarize(prob, threshold=0.5):
    """Probability map -> BinaryMask via prob > threshold."""
    prob = np.asarray(prob)
    if prob.ndim == 3 and prob.shape[0] == 1:
        prob = prob[0]
    return BinaryMask(prob > threshold)


def mask_iou(a, b):
    """IoU of two same-shape masks; both empty -> 1.0 (documented convention)."""
    if a.bits.shape != b.bits.shape:
        raise ValueError(f"mask_iou: shapes differ {a.bits.shape} vs {b.bits.shape}")
    inter = int(np.logical_and(a.bits, b.bits).sum())
    union = int(np.logical_or(a.bits, b.bits).sum())
    if union == 0:
        return 1.0
    return inter / union


# ---------------------------------------------------------------------------
# box strategies

def min_max_box(mask):
    if mask.is_empty():
        raise EmptyMaskError("min_max_box: mask has no set pixels")
    rows, cols = np.nonzero(mask.bits)
    return AxisBox(float(cols.min()) - 0.5, float(rows.min()) - 0.5,
                   float(cols.max()) + 0.5, float(rows.max()) + 0.5)


def convex_hull(points):
    """Monotone chain; returns hull vertices counter-clockwise (positive
    shoelace orientation in the x/y plane).  Collinear interior points are
    dropped.  points: (n, 2) array of (x, y)."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) <= 2:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1])


def min_area_rect(points, pad=0.0):
    """Minimum-area enclosing rectangle of a point set via rotating calipers.

    Minimizes (extent_x + pad) * (extent_y + pad) over hull edge directions
    plus angle 0.  pad=1.0 accounts for pixel footprints when the points are
    pixel centers; pad=0 is the classic geometric rectangle.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise EmptyMaskError("min_area_rect: no points")
    hull = convex_hull(pts)
    if len(hull) == 1:
        w = h = max(pad, 1e-6)
        return RotatedBox(hull[0, 0], hull[0, 1], w, h, 0.0)
    if len(hull) == 2:
        d = hull[1] - hull[0]
        theta = float(np.arctan2(d[1], d[0]))
        c = 0.5 * (hull[0] + hull[1])
        return RotatedBox(c[0], c[1], float(np.hypot(*d)) + pad, max(pad, 1e-6), theta)

    edges = np.diff(np.vstack([hull, hull[:1]]), axis=0)
    angles = np.arctan2(edges[:, 1], edges[:, 0])
    angles = np.concatenate([angles, [0.0]])        # always consider axis-aligned
    cos, sin = np.cos(angles), np.sin(angles)
    # rotate hull by -angle: x' = x cos + y sin, y' = -x sin + y cos
    xs = hull[:, 0][None, :] * cos[:, None] + hull[:, 1][None, :] * sin[:, None]
    ys = -hull[:, 0][None, :] * sin[:, None] + hull[:, 1][None, :] * cos[:, None]
    ex = xs.max(axis=1) - xs.min(axis=1)
    ey = ys.max(axis=1) - ys.min(axis=1)
    areas = (ex + pad) * (ey + pad)
    k = int(np.argmin(areas))
    mx = 0.5 * (xs[k].max() + xs[k].min())
    my = 0.5 * (ys[k].max() + ys[k].min())
    cx = mx * cos[k] - my * sin[k]
    cy = mx * sin[k] + my * cos[k]
    return RotatedBox(float(cx), float(cy), float(ex[k] + pad) if ex[k] + pad > 0 else 1e-6,
                      float(ey[k] + pad) if ey[k] + pad > 0 else 1e-6, float(angles[k]))


def mbr_box(mask):
    """Minimum-area rotated rectangle of the mask's pixel footprints."""
    if mask.is_empty():
        raise EmptyMaskError("mbr_box: mask has no set pixels")
    # Only the leftmost/rightmost set pixel of each row can be a hull
    # vertex, so reduce the point set to <= 2 per row before hulling.
    bits = mask.bits
    rows = np.flatnonzero(bits.any(axis=1))
    first = np.argmax(bits[rows], axis=1)
    last = bits.shape[1] - 1 - np.argmax(bits[rows, ::-1], axis=1)
    ys = np.concatenate([rows, rows]).astype(np.float64)
    xs = np.concatenate([first, last]).astype(np.float64)
    return min_area_rect(np.stack([xs, ys], axis=1), pad=1.0)


def opt_objective(box, xs, ys, n_set, alpha=4.0):
    """score(rect) = |mask inside rect| / (w*h + alpha * |mask outside rect|).

    xs/ys: coordinates of the set pixel centers.  Rewards rectangles that
    cover the mask tightly; alpha penalizes leaving mask pixels out."""
    dx = xs - box.cx
    dy = ys - box.cy
    c, s = np.cos(box.angle), np.sin(box.angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    inside = (np.abs(u) <= box.w / 2) & (np.abs(v) <= box.h / 2)
    n_in = int(inside.sum())
    return n_in / (box.w * box.h + alpha * (n_set - n_in))


def _extent_rect_at_angle(xs, ys, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = xs * c + ys * s
    v = -xs * s + ys * c
    w = u.max() - u.min() + 1.0
    h = v.max() - v.min() + 1.0
    mu, mv = 0.5 * (u.max() + u.min()), 0.5 * (v.max() + v.min())
    return RotatedBox(mu * c - mv * s, mu * s + mv * c, w, h, theta)


def opt_box(mask, alpha=4.0, angle_step_deg=2.0, min_improvement=1e-4):
    """Best-effort optimal rotated box: maximize `opt_objective`.

    Deterministic search: extent-fitted candidates on a coarse angle grid,
    seeded additionally with mbr_box and min_max_box, then coordinate descent
    with halving steps until a full round improves by less than
    `min_improvement`.
    """
    if mask.is_empty():
        raise EmptyMaskError("opt_box: mask has no set pixels")
    rows, cols = np.nonzero(mask.bits)
    xs = cols.astype(np.float64)
    ys = rows.astype(np.float64)
    n_set = len(xs)

    cands = [mbr_box(mask), min_max_box(mask).as_rotated()]
    for deg in np.arange(0.0, 180.0, angle_step_deg):
        cands.append(_extent_rect_at_angle(xs, ys, np.deg2rad(deg)))
    best = max(cands, key=lambda b: opt_objective(b, xs, ys, n_set, alpha))
    best_score = opt_objective(best, xs, ys, n_set, alpha)

    steps = np.array([1.0, 1.0, 1.0, 1.0, np.deg2rad(1.0)])
    for _round in range(200):
        improved = 0.0
        for k in range(5):
            for sign in (+1.0, -1.0):
                p = [best.cx, best.cy, best.w, best.h, best.angle]
                p[k] += sign * steps[k]
                if p[2] <= 0.5 or p[3] <= 0.5:
                    continue
                cand = RotatedBox(*p)
                sc = opt_objective(cand, xs, ys, n_set, alpha)
                if sc > best_score + 1e-12:
                    improved += sc - best_score
                    best, best_score = cand, sc
        if improved < min_improvement:
            steps = steps / 2.0
            if steps[0] < 0.2:
                break
    return best


# ---------------------------------------------------------------------------
# rotated boxes: corners, reconstruction, IoU

def corners(box):
    """4x2 corner array, counter-clockwise (positive shoelace)."""
    c, s = np.cos(box.angle), np.sin(box.angle)
    ux, uy = c * box.w / 2, s * box.w / 2          # half extent along box x
    vx, vy = -s * box.h / 2, c * box.h / 2         # half extent along box y
    return np.array([
        [box.cx - ux - vx, box.cy - uy - vy],
        [box.cx + ux - vx, box.cy + uy - vy],
        [box.cx + ux + vx, box.cy + uy + vy],
        [box.cx - ux + vx, box.cy - uy + vy],
    ])


def box_from_corners(pts):
    """Inverse of `corners` for (approximate) rectangles: averages opposite
    edges, so mild float noise in the corner list is tolerated."""
    p = np.asarray(pts, dtype=np.float64).reshape(4, 2)
    cx, cy = p.mean(axis=0)
    e01, e32 = p[1] - p[0], p[2] - p[3]
    e03, e12 = p[3] - p[0], p[2] - p[1]
    w = 0.5 * (np.hypot(*e01) + np.hypot(*e32))
    h = 0.5 * (np.hypot(*e03) + np.hypot(*e12))
    d = 0.5 * (e01 + e32)
    return RotatedBox(float(cx), float(cy), float(w), float(h), float(np.arctan2(d[1], d[0])))


def _shoelace(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_poly(subject, clipper):
    """Sutherland-Hodgman; clipper must be convex and counter-clockwise."""
    out = list(subject)
    m = len(clipper)
    for i in range(m):
        if not out:
            return np.zeros((0, 2))
        a, b = clipper[i], clipper[(i + 1) % m]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inp = out
        out = []

        def inside(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0]) >= -1e-12

        def intersect(p, q):
            dx, dy = q[0] - p[0], q[1] - p[1]
            denom = ex * dy - ey * dx
            if abs(denom) < 1e-300:
                return q
            t = (ex * (a[1] - p[1]) - ey * (a[0] - p[0])) / denom
            return (p[0] + t * dx, p[1] + t * dy)

        for j in range(len(inp)):
            cur, nxt = inp[j], inp[(j + 1) % len(inp)]
            if inside(cur):
                out.append(cur)
                if not inside(nxt):
                    out.append(intersect(cur, nxt))
            elif inside(nxt):
                out.append(intersect(cur, nxt))
    return np.asarray(out) if out else np.zeros((0, 2))


def rotated_iou(a, b):
    """IoU of two rotated boxes via convex polygon clipping.

    Operands are ordered canonically first, so iou(a, b) == iou(b, a)
    bit-exactly.  Result clamped to [0, 1]."""
    ka = (a.cx, a.cy, a.w, a.h, a.angle)
    kb = (b.cx, b.cy, b.w, b.h, b.angle)
    if kb < ka:
        a, b = b, a
    ca, cb = corners(a), corners(b)
    inter_poly = _clip_poly([tuple(p) for p in ca], cb)
    inter = _shoelace(inter_poly) if len(inter_poly) >= 3 else 0.0
    union = a.area() + b.area() - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def rasterize_box(box, height, width):
    """Pixels whose centers fall inside the rotated box (inclusive edges)."""
    cs = corners(box)
    r0 = max(0, int(np.floor(cs[:, 1].min())))
    r1 = min(height - 1, int(np.ceil(cs[:, 1].max())))
    c0 = max(0, int(np.floor(cs[:, 0].min())))
    c1 = min(width - 1, int(np.ceil(cs[:, 0].max())))
    bits = np.zeros((height, width), dtype=bool)
    if r1 < r0 or c1 < c0:
        return BinaryMask(bits)
    yy, xx = np.mgrid[r0:r1 + 1, c0:c1 + 1]
    dx = xx - box.cx
    dy = yy - box.cy
    c, s = np.cos(box.angle), np.sin(box.angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    bits[r0:r1 + 1, c0:c1 + 1] = (np.abs(u) <= box.w / 2) & (np.abs(v) <= box.h / 2)
    return BinaryMask(bits)
