"""File format tests: bit-exact round-trips and strict rejection of
malformed input with position information."""

import numpy as np
import pytest

from trackseg import fileio, geometry, synth


def test_ppm_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(17, 23, 3), dtype=np.uint8)
    p = str(tmp_path / "a.ppm")
    fileio.write_ppm(p, img)
    back = fileio.read_ppm(p)
    assert back.dtype == np.uint8 and back.shape == (17, 23, 3)
    assert np.array_equal(back, img)
    p2 = str(tmp_path / "b.ppm")
    fileio.write_ppm(p2, back)
    assert open(p, "rb").read() == open(p2, "rb").read()


def test_pgm_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(9, 4), dtype=np.uint8)
    p = str(tmp_path / "a.pgm")
    fileio.write_pgm(p, img)
    assert np.array_equal(fileio.read_pgm(p), img)


def test_mask_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    bits = rng.random((31, 18)) < 0.4
    p = str(tmp_path / "m.pgm")
    fileio.write_mask(p, bits)
    assert np.array_equal(fileio.read_mask(p), bits)


def test_mask_rejects_gray_values(tmp_path):
    img = np.zeros((3, 3), dtype=np.uint8)
    img[1, 2] = 128  # flat index 5
    p = str(tmp_path / "m.pgm")
    fileio.write_pgm(p, img)
    with pytest.raises(fileio.FileFormatError, match=r"value 128 at byte"):
        fileio.read_mask(p)
    assert np.array_equal(fileio.read_pgm(p), img)  # plain graymap still loads


def test_truncated_payload_rejected(tmp_path):
    # Declares 2x5 = 10 pixels but carries 9.
    p = str(tmp_path / "t.pgm")
    with open(p, "wb") as f:
        f.write(b"P5\n5 2\n255\n" + bytes(9))
    with pytest.raises(fileio.FileFormatError,
                       match=r"truncated.*declared 10 bytes, found 9"):
        fileio.read_pgm(p)


def test_trailing_bytes_rejected(tmp_path):
    p = str(tmp_path / "t.pgm")
    with open(p, "wb") as f:
        f.write(b"P5\n2 2\n255\n" + bytes(5))
    with pytest.raises(fileio.FileFormatError, match=r"1 trailing byte"):
        fileio.read_pgm(p)


def test_bad_magic_rejected(tmp_path):
    p = str(tmp_path / "t.ppm")
    with open(p, "wb") as f:
        f.write(b"P7\n2 2\n255\n" + bytes(12))
    with pytest.raises(fileio.FileFormatError, match=r"magic.*byte 0"):
        fileio.read_ppm(p)


def test_header_comments_accepted(tmp_path):
    p = str(tmp_path / "c.pgm")
    with open(p, "wb") as f:
        f.write(b"P5 # a comment\n# another\n2 2\n255\n" + bytes([0, 255, 0, 255]))
    assert np.array_equal(fileio.read_pgm(p),
                          np.array([[0, 255], [0, 255]], dtype=np.uint8))


def test_bad_maxval_and_width_rejected(tmp_path):
    p = str(tmp_path / "t.pgm")
    with open(p, "wb") as f:
        f.write(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(fileio.FileFormatError, match="maxval"):
        fileio.read_pgm(p)
    with open(p, "wb") as f:
        f.write(b"P5\nxx 2\n255\n" + bytes(4))
    with pytest.raises(fileio.FileFormatError, match=r"invalid width b'xx'"):
        fileio.read_pgm(p)
    with open(p, "wb") as f:
        f.write(b"P5\n2 2")
    with pytest.raises(fileio.FileFormatError, match="end of file"):
        fileio.read_pgm(p)


def test_box_line_axis_aligned_example(tmp_path):
    p = str(tmp_path / "boxes.txt")
    with open(p, "w") as f:
        f.write("0,0,10,0,10,5,0,5\n")
    (box,) = fileio.load_boxes(p)
    assert box.cx == pytest.approx(5.0)
    assert box.cy == pytest.approx(2.5)
    assert box.w == pytest.approx(10.0)
    assert box.h == pytest.approx(5.0)
    assert box.angle == pytest.approx(0.0)


def test_boxes_round_trip_byte_identical(tmp_path):
    rng = np.random.default_rng(3)
    boxes = [geometry.RotatedBox(rng.uniform(5, 50), rng.uniform(5, 50),
                                 rng.uniform(2, 20), rng.uniform(2, 20),
                                 rng.uniform(-1.5, 1.5)) for _ in range(12)]
    p1 = str(tmp_path / "a.txt")
    p2 = str(tmp_path / "b.txt")
    fileio.save_boxes(p1, boxes)
    corners = fileio.load_box_corners(p1)
    fileio.save_boxes(p2, corners)
    assert open(p1).read() == open(p2).read()
    # Geometric round-trip: boxes reconstructed from corners match.
    for b, r in zip(boxes, fileio.load_boxes(p1)):
        assert geometry.rotated_iou(b, r) > 1.0 - 1e-9


def test_boxes_malformed_rejected(tmp_path):
    p = str(tmp_path / "boxes.txt")
    with open(p, "w") as f:
        f.write("0,0,10,0,10,5,0,5\n1,2,3,4,5,6,7\n")
    with pytest.raises(fileio.FileFormatError, match=r"boxes\.txt:2: expected 8"):
        fileio.load_boxes(p)
    with open(p, "w") as f:
        f.write("0,0,zz,0,10,5,0,5\n")
    with pytest.raises(fileio.FileFormatError, match=r":1: invalid number 'zz'"):
        fileio.load_boxes(p)


def test_meta_round_trip_and_rejection(tmp_path):
    p = str(tmp_path / "meta.txt")
    meta = {"seed": "42", "shape": "ellipse", "note": "a=b, c"}
    fileio.save_meta(p, meta)
    assert fileio.load_meta(p) == meta
    p2 = str(tmp_path / "meta2.txt")
    fileio.save_meta(p2, fileio.load_meta(p))
    assert open(p).read() == open(p2).read()
    with open(p, "w") as f:
        f.write("seed=1\nnot a pair\n")
    with pytest.raises(fileio.FileFormatError, match=r"meta\.txt:2: expected key=value"):
        fileio.load_meta(p)


def _tiny_sequence():
    cfg = synth.SceneConfig(seed=9, height=96, width=96, shape="ellipse",
                            cx=48, cy=48, w=30, h=20, angle=0.4,
                            vx=1.0, vy=-0.5, omega=0.05)
    return synth.gen_sequence(cfg, 4)


def test_sequence_round_trip_byte_identical(tmp_path):
    seq = _tiny_sequence()
    d1 = str(tmp_path / "s1")
    d2 = str(tmp_path / "s2")
    fileio.save_sequence(d1, seq)
    loaded = fileio.load_sequence(d1)
    assert len(loaded) == len(seq)
    for a, b in zip(seq.frames, loaded.frames):
        assert np.array_equal(a, b)
    for a, b in zip(seq.masks, loaded.masks):
        assert np.array_equal(a, b)
    fileio.save_sequence(d2, loaded)
    for name in ("frames/000000.ppm", "frames/000003.ppm",
                 "masks/000002.pgm", "boxes.txt", "meta.txt"):
        b1 = open(f"{d1}/{name}", "rb").read()
        b2 = open(f"{d2}/{name}", "rb").read()
        assert b1 == b2, name


def test_sequence_count_mismatch_rejected(tmp_path):
    import os
    seq = _tiny_sequence()
    d = str(tmp_path / "s")
    fileio.save_sequence(d, seq)
    os.remove(f"{d}/masks/000003.pgm")
    with pytest.raises(fileio.FileFormatError, match="masks"):
        fileio.load_sequence(d)


def test_sequence_boxes_mismatch_rejected(tmp_path):
    seq = _tiny_sequence()
    d = str(tmp_path / "s")
    fileio.save_sequence(d, seq)
    with open(f"{d}/boxes.txt") as f:
        lines = f.read().splitlines()
    with open(f"{d}/boxes.txt", "w") as f:
        f.write("\n".join(lines[:-1]) + "\n")
    with pytest.raises(fileio.FileFormatError, match="3 lines for 4 frames"):
        fileio.load_sequence(d)


def test_frame_to_float():
    img = np.zeros((2, 3, 3), dtype=np.uint8)
    img[0, 0] = (255, 0, 128)
    f = fileio.frame_to_float(img)
    assert f.shape == (3, 2, 3) and f.dtype == np.float32
    assert f[0, 0, 0] == 1.0 and f[1, 0, 0] == 0.0
    assert f[2, 0, 0] == pytest.approx(128 / 255)
