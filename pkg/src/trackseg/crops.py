"""Axis-aligned patch extraction and paste-back.

A PatchMap is the similarity transform between frame coordinates and the
coordinates of a square resampled patch: per axis,

    frame = center + (patch - mid - shift) * scale,    mid = (out - 1) / 2

so the anchor point lands at patch coordinate mid + shift.  `shift` is the
content translation in patch pixels (the training-time jitter).  Images are
resampled bilinearly; out-of-frame samples take the image's per-channel
mean (masks take False).  Because the transform is axis-aligned the warp
separates into one sampling matrix per axis, applied as two matmuls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PatchMap:
    cx: float
    cy: float
    scale: float   # frame pixels per patch pixel
    out: int       # patch side length
    shift_x: float = 0.0
    shift_y: float = 0.0

    @property
    def mid(self) -> float:
        return (self.out - 1) / 2.0

    def to_frame(self, qx, qy):
        return (self.cx + (np.asarray(qx) - self.mid - self.shift_x) * self.scale,
                self.cy + (np.asarray(qy) - self.mid - self.shift_y) * self.scale)

    def to_patch(self, px, py):
        return (self.mid + self.shift_x + (np.asarray(px) - self.cx) / self.scale,
                self.mid + self.shift_y + (np.asarray(py) - self.cy) / self.scale)

    def source_coords(self):
        """Frame coordinates sampled by each patch row/column: (xs, ys)."""
        q = np.arange(self.out, dtype=np.float64)
        return self.to_frame(q, q)


def _bilinear_matrix(coords: np.ndarray, n_src: int):
    """(len(coords), n_src) float32 sampling matrix plus an in-bounds flag
    per row.  Valid samples are those inside the source footprint
    [-0.5, n_src - 0.5); coordinates in the half-pixel rim clamp to the
    edge sample (replication)."""
    m = len(coords)
    mat = np.zeros((m, n_src), dtype=np.float32)
    valid = (coords >= -0.5) & (coords < n_src - 0.5)
    c = np.clip(coords, 0.0, float(n_src - 1))
    i0 = np.clip(np.floor(c).astype(np.int64), 0, max(n_src - 2, 0))
    frac = (c - i0).astype(np.float32)
    rows = np.arange(m)
    np.add.at(mat, (rows, i0), (1.0 - frac) * valid)
    np.add.at(mat, (rows, np.minimum(i0 + 1, n_src - 1)), frac * valid)
    return mat, valid


def _nearest_indices(coords: np.ndarray, n_src: int):
    valid = (coords >= -0.5) & (coords < n_src - 0.5)
    idx = np.clip(np.rint(coords).astype(np.int64), 0, n_src - 1)
    return idx, valid


def crop_image(img: np.ndarray, pm: PatchMap) -> np.ndarray:
    """img: (C, H, W) float32 -> (C, out, out) float32, mean-padded."""
    if img.ndim != 3:
        raise ValueError(f"crop_image wants (C, H, W), got {img.shape}")
    _, h, w = img.shape
    xs, ys = pm.source_coords()
    mx, vx = _bilinear_matrix(xs, w)
    my, vy = _bilinear_matrix(ys, h)
    out = my @ (img @ mx.T)                      # (C, out, out)
    mean = img.mean(axis=(1, 2), dtype=np.float64).astype(np.float32)
    inb = np.outer(vy, vx)
    return np.where(inb[None], out, mean[:, None, None]).astype(np.float32)


def crop_mask(bits: np.ndarray, pm: PatchMap) -> np.ndarray:
    """bits: (H, W) bool -> (out, out) bool, nearest-neighbor, False-padded."""
    if bits.ndim != 2:
        raise ValueError(f"crop_mask wants (H, W), got {bits.shape}")
    h, w = bits.shape
    xs, ys = pm.source_coords()
    ix, vx = _nearest_indices(xs, w)
    iy, vy = _nearest_indices(ys, h)
    out = bits[np.ix_(iy, ix)]
    return out & np.outer(vy, vx)


def resample_to_frame(patch: np.ndarray, pm: PatchMap, height: int,
                      width: int, fill: float = 0.0) -> np.ndarray:
    """Inverse warp of a (out, out) float patch back onto the full frame:
    every frame pixel samples the patch bilinearly; pixels that map outside
    the patch take `fill`."""
    if patch.shape != (pm.out, pm.out):
        raise ValueError(f"patch shape {patch.shape} != ({pm.out}, {pm.out})")
    qx, _ = pm.to_patch(np.arange(width, dtype=np.float64), 0.0)
    _, qy = pm.to_patch(0.0, np.arange(height, dtype=np.float64))
    mx, vx = _bilinear_matrix(qx, pm.out)
    my, vy = _bilinear_matrix(qy, pm.out)
    out = my @ patch.astype(np.float32) @ mx.T
    inb = np.outer(vy, vx)
    return np.where(inb, out, np.float32(fill)).astype(np.float32)
