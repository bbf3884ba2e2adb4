"""Portable on-disk formats for synthetic sequences.

Formats (all written by this module, all bit-exact on round-trip):

* frames: binary pixmap (P6), 8-bit RGB, maxval 255
* masks: binary graymap (P5), values restricted to {0, 255}
* boxes.txt: one line per frame, the rotated box's four corners as eight
  comma-separated floats "x0,y0,x1,y1,x2,y2,x3,y3" (counter-clockwise in
  image coordinates).  Floats are written with repr() so parsing them back
  and re-writing reproduces the file byte for byte.
* meta.txt: one "key=value" per line, order preserved.

Sequence directory layout::

    seq/frames/000000.ppm ...
    seq/masks/000001.pgm ...   (mask 000000 exists too; frame 0 is the init)
    seq/boxes.txt
    seq/meta.txt

Malformed input is rejected with FileFormatError; messages cite the path
and the byte offset (binary formats) or line number (text formats) of the
first problem.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import geometry


class FileFormatError(ValueError):
    pass


_WS = b" \t\r\n\x0b\x0c"


class _Scanner:
    """Tokenizer over a netpbm header: whitespace-separated tokens with
    '#'-to-end-of-line comments allowed between them."""

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def _skip_ws(self):
        d = self.data
        while self.pos < len(d):
            b = d[self.pos]
            if b in _WS:
                self.pos += 1
            elif b == 0x23:  # '#'
                nl = d.find(b"\n", self.pos)
                self.pos = len(d) if nl < 0 else nl + 1
            else:
                break

    def token(self, what: str) -> tuple[bytes, int]:
        self._skip_ws()
        if self.pos >= len(self.data):
            raise FileFormatError(
                f"{self.path}: unexpected end of file at byte {self.pos} "
                f"while reading {what}")
        start = self.pos
        d = self.data
        while self.pos < len(d) and d[self.pos] not in _WS and d[self.pos] != 0x23:
            self.pos += 1
        return d[start:self.pos], start

    def int_token(self, what: str, lo: int, hi: int) -> int:
        tok, start = self.token(what)
        if not tok.isdigit():
            raise FileFormatError(
                f"{self.path}: invalid {what} {tok!r} at byte {start} "
                f"(expected an unsigned integer)")
        v = int(tok)
        if not lo <= v <= hi:
            raise FileFormatError(
                f"{self.path}: {what} {v} at byte {start} out of range "
                f"[{lo}, {hi}]")
        return v


def _read_pnm(path: str, magic: bytes, channels: int) -> tuple[np.ndarray, int]:
    """Returns (array, payload byte offset)."""
    with open(path, "rb") as f:
        data = f.read()
    sc = _Scanner(data, path)
    tok, start = sc.token("magic")
    if tok != magic:
        raise FileFormatError(
            f"{path}: bad magic {tok!r} at byte {start} (expected {magic!r})")
    width = sc.int_token("width", 1, 65535)
    height = sc.int_token("height", 1, 65535)
    maxval = sc.int_token("maxval", 1, 65535)
    if maxval != 255:
        raise FileFormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    # Exactly one whitespace byte separates the maxval from the raster.
    if sc.pos >= len(data):
        raise FileFormatError(
            f"{path}: unexpected end of file at byte {sc.pos} before pixel data")
    if data[sc.pos] not in _WS:
        raise FileFormatError(
            f"{path}: expected one whitespace byte after maxval at byte {sc.pos}")
    payload_at = sc.pos + 1
    need = width * height * channels
    have = len(data) - payload_at
    if have < need:
        raise FileFormatError(
            f"{path}: truncated pixel data at byte {payload_at}: "
            f"declared {need} bytes, found {have}")
    if have > need:
        raise FileFormatError(
            f"{path}: {have - need} trailing bytes after pixel data "
            f"at byte {payload_at + need}")
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=payload_at)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return arr.reshape(shape).copy(), payload_at


def read_ppm(path: str) -> np.ndarray:
    """(H, W, 3) uint8."""
    return _read_pnm(path, b"P6", 3)[0]


def write_ppm(path: str, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"write_ppm wants (H, W, 3) uint8, got "
                         f"{img.dtype} {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def read_pgm(path: str) -> np.ndarray:
    """(H, W) uint8."""
    return _read_pnm(path, b"P5", 1)[0]


def write_pgm(path: str, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError(f"write_pgm wants (H, W) uint8, got "
                         f"{img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def read_mask(path: str) -> np.ndarray:
    """(H, W) bool.  The graymap must contain only 0 and 255."""
    arr, payload_at = _read_pnm(path, b"P5", 1)
    bad = (arr != 0) & (arr != 255)
    if bad.any():
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise FileFormatError(
            f"{path}: mask graymap has value {int(arr.ravel()[idx])} at byte "
            f"{payload_at + idx} (only 0 and 255 are allowed)")
    return arr == 255


def write_mask(path: str, bits: np.ndarray) -> None:
    bits = np.asarray(bits)
    if bits.dtype != np.bool_ or bits.ndim != 2:
        raise ValueError(f"write_mask wants (H, W) bool, got "
                         f"{bits.dtype} {bits.shape}")
    write_pgm(path, np.where(bits, np.uint8(255), np.uint8(0)))


# ---------------------------------------------------------------------------
# box corner lines

def save_boxes(path: str, boxes) -> None:
    """boxes: iterable of RotatedBox or (4, 2) corner arrays."""
    lines = []
    for b in boxes:
        pts = np.asarray(b, dtype=np.float64) if isinstance(b, np.ndarray) \
            else geometry.corners(b)
        if pts.shape != (4, 2):
            raise ValueError(f"box entry has shape {pts.shape}, want (4, 2)")
        lines.append(",".join(repr(float(v)) for v in pts.ravel()))
    with open(path, "w") as f:
        for line in lines:
            f.write(line + "\n")


def load_box_corners(path: str) -> list[np.ndarray]:
    """List of (4, 2) float64 corner arrays, exactly as written."""
    out = []
    with open(path, "r") as f:
        for lineno, line in enumerate(f.read().splitlines(), start=1):
            fields = line.split(",")
            if len(fields) != 8:
                raise FileFormatError(
                    f"{path}:{lineno}: expected 8 comma-separated numbers, "
                    f"got {len(fields)}")
            try:
                vals = [float(s) for s in fields]
            except ValueError:
                bad = next(s for s in fields if not _is_float(s))
                raise FileFormatError(
                    f"{path}:{lineno}: invalid number {bad!r}") from None
            out.append(np.array(vals, dtype=np.float64).reshape(4, 2))
    return out


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def load_boxes(path: str) -> list[geometry.RotatedBox]:
    return [geometry.box_from_corners(c) for c in load_box_corners(path)]


# ---------------------------------------------------------------------------
# metadata

def save_meta(path: str, meta: dict) -> None:
    with open(path, "w") as f:
        for k, v in meta.items():
            k, v = str(k), str(v)
            if "=" in k or "\n" in k or "\n" in v or not k:
                raise ValueError(f"bad meta entry {k!r}={v!r}")
            f.write(f"{k}={v}\n")


def load_meta(path: str) -> dict:
    meta = {}
    with open(path, "r") as f:
        for lineno, line in enumerate(f.read().splitlines(), start=1):
            if "=" not in line:
                raise FileFormatError(
                    f"{path}:{lineno}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            meta[k] = v
    return meta


# ---------------------------------------------------------------------------
# sequence directories

@dataclass
class Sequence:
    """A video with exact ground truth.

    frames: (H, W, 3) uint8 per frame; masks: (H, W) bool per frame;
    boxes: analytic gt RotatedBox per frame.  box_corners preserves the
    corner floats exactly as read from disk so a load/save cycle is
    byte-identical; it is None for freshly generated sequences.
    """
    frames: list
    masks: list
    boxes: list
    meta: dict = field(default_factory=dict)
    box_corners: list | None = None

    def __len__(self):
        return len(self.frames)


def frame_to_float(frame: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
    return np.ascontiguousarray(
        frame.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def save_sequence(root: str, seq: Sequence) -> None:
    n = len(seq.frames)
    if not (len(seq.masks) == len(seq.boxes) == n):
        raise ValueError(
            f"sequence has {n} frames, {len(seq.masks)} masks, "
            f"{len(seq.boxes)} boxes")
    os.makedirs(os.path.join(root, "frames"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    for i in range(n):
        write_ppm(os.path.join(root, "frames", "%06d.ppm" % i), seq.frames[i])
        write_mask(os.path.join(root, "masks", "%06d.pgm" % i), seq.masks[i])
    entries = seq.box_corners if seq.box_corners is not None else seq.boxes
    save_boxes(os.path.join(root, "boxes.txt"), entries)
    save_meta(os.path.join(root, "meta.txt"), seq.meta)


def load_sequence(root: str) -> Sequence:
    frames_dir = os.path.join(root, "frames")
    masks_dir = os.path.join(root, "masks")
    for d in (frames_dir, masks_dir):
        if not os.path.isdir(d):
            raise FileFormatError(f"{root}: missing directory {d}")
    names = sorted(os.listdir(frames_dir))
    if not names:
        raise FileFormatError(f"{frames_dir}: no frames")
    n = len(names)
    expect = ["%06d.ppm" % i for i in range(n)]
    if names != expect:
        bad = next(a for a, b in zip(names, expect) if a != b)
        raise FileFormatError(
            f"{frames_dir}: unexpected entry {bad!r} (frames must be "
            f"000000.ppm .. {expect[-1]})")
    mask_names = sorted(os.listdir(masks_dir))
    if mask_names != ["%06d.pgm" % i for i in range(n)]:
        raise FileFormatError(
            f"{masks_dir}: expected {n} masks 000000.pgm .. %06d.pgm, "
            f"found {len(mask_names)} entries" % (n - 1))
    frames = [read_ppm(os.path.join(frames_dir, nm)) for nm in expect]
    masks = [read_mask(os.path.join(masks_dir, "%06d.pgm" % i))
             for i in range(n)]
    corners = load_box_corners(os.path.join(root, "boxes.txt"))
    if len(corners) != n:
        raise FileFormatError(
            f"{root}/boxes.txt: {len(corners)} lines for {n} frames")
    boxes = [geometry.box_from_corners(c) for c in corners]
    meta = load_meta(os.path.join(root, "meta.txt"))
    return Sequence(frames=frames, masks=masks, boxes=boxes, meta=meta,
                    box_corners=corners)
