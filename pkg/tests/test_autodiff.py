"""Tensor/tape core: oracle comparisons, gradient checks, tape invariants."""

import threading

import numpy as np
import pytest

import trackseg.autodiff as ad
from trackseg import checkpoint
from trackseg.gradchecks import OP_CHECKS, TOLERANCE


# ---------------------------------------------------------------------------
# conv2d vs nested-loop oracle

def conv2d_oracle(x, w, b, stride, dilation, padding):
    """Straight quadruple loop in float64.  Deliberately shares nothing with
    the implementation."""
    cin, H, W = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((cin, H + 2 * padding, W + 2 * padding), dtype=np.float64)
    xp[:, padding:padding + H, padding:padding + W] = x
    eh, ew = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    Ho = (H + 2 * padding - eh) // stride + 1
    Wo = (W + 2 * padding - ew) // stride + 1
    out = np.zeros((cout, Ho, Wo))
    for co in range(cout):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for ci in range(cin):
                    for ki in range(kh):
                        for kj in range(kw):
                            acc += xp[ci, i * stride + ki * dilation, j * stride + kj * dilation] \
                                   * float(w[co, ci, ki, kj])
                out[co, i, j] = acc + (float(b[co]) if b is not None else 0.0)
    return out


def test_conv2d_matches_nested_loop_oracle():
    rng = np.random.default_rng(7)
    for trial in range(50):
        cin = int(rng.integers(1, 4))
        cout = int(rng.integers(1, 5))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 4))
        dilation = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 3))
        ext = dilation * (k - 1) + 1
        H = int(rng.integers(max(1, ext - 2 * padding), 13))
        W = int(rng.integers(max(1, ext - 2 * padding), 13))
        if H + 2 * padding < ext or W + 2 * padding < ext:
            continue
        x = rng.uniform(-1, 1, (cin, H, W)).astype(np.float32)
        w = rng.uniform(-1, 1, (cout, cin, k, k)).astype(np.float32)
        b = rng.uniform(-1, 1, cout).astype(np.float32)
        got = ad.conv2d(ad.tensor(x), ad.tensor(w), ad.tensor(b),
                        stride=stride, dilation=dilation, padding=padding).data
        want = conv2d_oracle(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64),
                             stride, dilation, padding)
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) < 1e-5


def test_conv2d_output_size_formula():
    x = ad.tensor(np.zeros((1, 127, 127), np.float32))
    w = ad.tensor(np.zeros((2, 1, 3, 3), np.float32))
    assert ad.conv2d(x, w, stride=2).data.shape == (2, 63, 63)
    x2 = ad.tensor(np.zeros((1, 15, 15), np.float32))
    assert ad.conv2d(x2, w, stride=1, dilation=2, padding=2).data.shape == (2, 15, 15)


def test_conv2d_shape_errors_name_both_shapes():
    x = ad.tensor(np.zeros((3, 8, 8), np.float32))
    w = ad.tensor(np.zeros((4, 2, 3, 3), np.float32))
    with pytest.raises(ad.ShapeError) as e:
        ad.conv2d(x, w)
    assert "(3, 8, 8)" in str(e.value) and "(4, 2, 3, 3)" in str(e.value)
    wbig = ad.tensor(np.zeros((1, 3, 11, 11), np.float32))
    with pytest.raises(ad.ShapeError):
        ad.conv2d(x, wbig)


# ---------------------------------------------------------------------------
# depthwise cross-correlation oracles

def test_depthwise_xcorr_matches_nested_loop():
    rng = np.random.default_rng(3)
    for _ in range(10):
        c, hx, hz = 3, 8, 3
        x = rng.uniform(-1, 1, (c, hx, hx)).astype(np.float32)
        z = rng.uniform(-1, 1, (c, hz, hz)).astype(np.float32)
        got = ad.depthwise_xcorr(ad.tensor(x), ad.tensor(z)).data
        ho = hx - hz + 1
        want = np.zeros((c, ho, ho))
        for ci in range(c):
            for i in range(ho):
                for j in range(ho):
                    want[ci, i, j] = np.sum(x[ci, i:i + hz, j:j + hz].astype(np.float64)
                                            * z[ci].astype(np.float64))
        assert np.max(np.abs(got - want)) < 1e-5


def test_depthwise_xcorr_full_scale_shape_and_position_major_oracle():
    # 256x31x31 search against 256x15x15 exemplar -> 256x17x17
    rng = np.random.default_rng(11)
    x = rng.standard_normal((256, 31, 31)).astype(np.float32)
    z = rng.standard_normal((256, 15, 15)).astype(np.float32)
    out = ad.depthwise_xcorr(ad.tensor(x), ad.tensor(z)).data
    assert out.shape == (256, 17, 17)
    # independent position-major evaluation
    want = np.empty_like(out)
    for i in range(17):
        for j in range(17):
            want[:, i, j] = (x[:, i:i + 15, j:j + 15] * z).sum(axis=(1, 2))
    assert np.max(np.abs(out - want)) < 1e-3


def test_depthwise_xcorr_rejects_bad_shapes():
    with pytest.raises(ad.ShapeError):
        ad.depthwise_xcorr(ad.tensor(np.zeros((2, 5, 5), np.float32)),
                           ad.tensor(np.zeros((3, 3, 3), np.float32)))
    with pytest.raises(ad.ShapeError):
        ad.depthwise_xcorr(ad.tensor(np.zeros((2, 3, 3), np.float32)),
                           ad.tensor(np.zeros((2, 5, 5), np.float32)))


# ---------------------------------------------------------------------------
# pointwise behavior

def test_sigmoid_extreme_logits_stay_finite():
    x = ad.tensor(np.array([1e4, -1e4, 0.0, -100.0, 100.0], np.float32))
    with np.errstate(over="raise"):
        s = ad.sigmoid(x).data
    assert np.all(np.isfinite(s))
    assert s[0] == 1.0 or s[0] > 1 - 1e-6
    assert 0.0 < s[3] <= 1e-40          # subnormal but strictly positive
    assert s[2] == 0.5


def test_softplus_extremes():
    x = ad.tensor(np.array([800.0, -800.0, 0.0], np.float32))
    with np.errstate(over="raise"):
        y = ad.softplus(x).data
    assert np.all(np.isfinite(y))
    assert y[0] == pytest.approx(800.0)
    assert y[1] == 0.0
    assert y[2] == pytest.approx(np.log(2.0), abs=1e-7)


def test_pointwise_dispatch():
    a = ad.tensor([1.0, -2.0])
    assert np.array_equal(ad.pointwise("relu", a).data, [1.0, 0.0])
    with pytest.raises(ValueError, match="unknown pointwise"):
        ad.pointwise("tanh", a)


def test_no_broadcasting_beyond_scalar():
    a = ad.tensor(np.zeros((3, 4), np.float32))
    b = ad.tensor(np.zeros((4, 3), np.float32))
    with pytest.raises(ad.ShapeError):
        ad.add(a, b)
    with pytest.raises(ad.ShapeError):
        ad.mul(a, b)
    # scalar tensor mixes fine
    s = ad.tensor(2.5)
    assert ad.add(a, s).data.shape == (3, 4)


# ---------------------------------------------------------------------------
# resampling

def test_upsample_nearest_replicates():
    x = ad.tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]], np.float32))
    y = ad.upsample2x(x, "nearest").data
    assert np.array_equal(y[0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_upsample_bilinear_formula_and_constants():
    # hand values from the align-corners-false rule: src = (i+0.5)/2 - 0.5
    x = ad.tensor(np.array([[[0.0], [1.0]]], np.float32).reshape(1, 2, 1))
    y = ad.upsample2x(x, "bilinear").data[:, :, 0]
    assert np.allclose(y[0], [0.0, 0.25, 0.75, 1.0])
    c = ad.tensor(np.full((2, 5, 7), 3.25, np.float32))
    assert np.allclose(ad.upsample2x(c, "bilinear").data, 3.25)


def test_upsample_rejects_bad_mode_and_rank():
    with pytest.raises(ValueError):
        ad.upsample2x(ad.tensor(np.zeros((1, 2, 2), np.float32)), "cubic")
    with pytest.raises(ad.ShapeError):
        ad.upsample2x(ad.tensor(np.zeros((2, 2), np.float32)))


# ---------------------------------------------------------------------------
# gradient checks

@pytest.mark.parametrize("name,builder", OP_CHECKS, ids=[n for n, _ in OP_CHECKS])
def test_grad_matches_finite_differences(name, builder):
    for seed in range(10):
        f, inputs = builder(seed)
        err = ad.grad_check(f, inputs)
        assert err < TOLERANCE, f"{name}: max rel err {err} at seed {seed}"


def test_grad_check_rejects_nondeterministic_f():
    state = {"n": 0}

    def f(ts):
        state["n"] += 1
        return ad.scale(ad.tsum(ts[0]), 1.0 + 0.1 * state["n"])

    with pytest.raises(ad.GradCheckError, match="not deterministic"):
        ad.grad_check(f, [ad.tensor(np.ones(3, np.float32), requires_grad=True)])


def test_grad_check_rejects_nonscalar_f():
    with pytest.raises(ad.GradCheckError, match="scalar"):
        ad.grad_check(lambda ts: ad.mul(ts[0], ts[0]),
                      [ad.tensor(np.ones(3, np.float32), requires_grad=True)])


def test_grad_check_flags_corrupted_derivative():
    # forward x -> sum(x*x), backward deliberately wrong by a factor 1.5
    def bad_square_sum(x):
        out = ad.Tensor(np.asarray((x.data * x.data).sum(), dtype=x.data.dtype))

        def fn(g):
            if x.requires_grad:
                x.accumulate(g * 3.0 * x.data)   # should be 2x
        return ad._register(out, fn, (x,))

    err = ad.grad_check(lambda ts: bad_square_sum(ts[0]),
                        [ad.tensor(np.array([0.7, -1.3], np.float32), requires_grad=True)])
    assert err > TOLERANCE


# ---------------------------------------------------------------------------
# tape mechanics

def test_tape_records_in_topological_order():
    x = ad.param(np.ones((2, 2), np.float32))
    with ad.record() as tape:
        a = ad.mul(x, x)
        b = ad.add(a, x)
        c = ad.tsum(b)
        ad.backward(c)
    pos = {}
    for idx, (out, _fn, input_ids) in enumerate(tape.nodes):
        for iid in input_ids:
            if iid in pos:
                assert pos[iid] < idx
        pos[id(out)] = idx
    assert len(tape.nodes) == 3


def test_fanout_gradient_correct():
    # y = x*x + x: one backward, intermediate feeding two consumers
    x = ad.param(np.array([1.5, -0.5], np.float32))
    with ad.record():
        y = ad.tsum(ad.add(ad.mul(x, x), x))
        ad.backward(y)
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_grads_accumulate_across_tapes_until_cleared():
    x = ad.param(np.array([2.0], np.float32))
    for _ in range(2):
        with ad.record():
            ad.backward(ad.tsum(ad.mul(x, x)))
    assert np.allclose(x.grad, 2 * (2 * x.data))   # two accumulated passes
    x.zero_grad()
    assert x.grad is None


def test_double_backward_same_tape_doubles_leaf_grads():
    x = ad.param(np.array([3.0], np.float32))
    with ad.record():
        y = ad.tsum(ad.mul(x, x))
        ad.backward(y)
        ad.backward(y)
    assert np.allclose(x.grad, 2 * (2 * x.data))


def test_backward_errors():
    x = ad.param(np.ones(3, np.float32))
    with pytest.raises(RuntimeError, match="no active tape"):
        ad.backward(ad.tsum(x))
    with ad.record():
        y = ad.mul(x, x)
        with pytest.raises(ad.ShapeError, match="scalar"):
            ad.backward(y)
    with ad.record():
        with pytest.raises(RuntimeError, match="not produced on the current tape"):
            ad.backward(ad.tensor(1.0))


def test_inference_outside_record_is_gradfree():
    x = ad.param(np.ones((2, 2), np.float32))
    y = ad.mul(x, x)
    assert not y.requires_grad
    assert ad._tape() is None


def test_thread_local_tapes_do_not_interfere():
    errors = []

    def work(seed):
        try:
            rng = np.random.default_rng(seed)
            x = ad.param(rng.standard_normal((4, 4)).astype(np.float32))
            for _ in range(20):
                with ad.record():
                    ad.backward(ad.tsum(ad.mul(x, x)))
                got, x.grad = x.grad, None
                if not np.allclose(got, 2 * x.data, atol=1e-5):
                    errors.append(f"bad grad in thread {seed}")
        except Exception as e:          # noqa: BLE001 - surface to main thread
            errors.append(repr(e))

    threads = [threading.Thread(target=work, args=(s,)) for s in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


def test_forward_deterministic_bit_exact():
    rng = np.random.default_rng(5)
    x = ad.tensor(rng.standard_normal((4, 16, 16)).astype(np.float32))
    w = ad.tensor(rng.standard_normal((8, 4, 3, 3)).astype(np.float32))
    a = ad.conv2d(x, w, stride=2).data
    b = ad.conv2d(x, w, stride=2).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# checkpoint container

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    state = {
        "backbone.stage1.w": ad.param(rng.standard_normal((4, 3, 3, 3)).astype(np.float32)),
        "score.h.gamma": ad.param(rng.standard_normal(4).astype(np.float32)),
        "a.scalar": ad.param(np.float32(1.25)),
    }
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    checkpoint.save(p1, state)
    loaded = checkpoint.load(p1)
    assert set(loaded) == set(state)
    for k in state:
        assert loaded[k].tobytes() == np.ascontiguousarray(state[k].data, "<f4").tobytes()
        assert loaded[k].shape == state[k].data.shape
    checkpoint.save(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_corruption_rejected(tmp_path):
    p = tmp_path / "x.ckpt"
    checkpoint.save(p, {"w": ad.param(np.ones((2, 2), np.float32))})
    raw = p.read_bytes()

    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(raw[:-5])
    with pytest.raises(checkpoint.CheckpointError, match="byte"):
        checkpoint.load(trunc)

    bad = tmp_path / "magic.ckpt"
    bad.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.load(bad)

    trail = tmp_path / "trail.ckpt"
    trail.write_bytes(raw + b"\x00")
    with pytest.raises(checkpoint.CheckpointError, match="trailing"):
        checkpoint.load(trail)


# ---------------------------------------------------------------------------
# misc ops

def test_slice_pad_shapes_and_errors():
    x = ad.tensor(np.arange(2 * 4 * 4, dtype=np.float32).reshape(2, 4, 4))
    y = ad.slice2d(x, 1, 3, 0, 2)
    assert np.array_equal(y.data, x.data[:, 1:3, 0:2])
    with pytest.raises(ad.ShapeError):
        ad.slice2d(x, 0, 5, 0, 2)
    z = ad.pad2d(x, (0, 1, 0, 1), "replicate")
    assert z.data.shape == (2, 5, 5)
    assert np.array_equal(z.data[:, 4, :4], x.data[:, 3, :])   # replicated row
    assert z.data[0, 4, 4] == x.data[0, 3, 3]


def test_gather_cells_and_take():
    x = ad.tensor(np.arange(2 * 3 * 3, dtype=np.float32).reshape(2, 3, 3))
    g = ad.gather_cells(x, [(0, 0), (2, 2)])
    assert np.array_equal(g.data, [[0, 8], [9, 17]])
    t = ad.take(x, [0, 17, 17])
    assert np.array_equal(t.data, [0, 17, 17])
    with pytest.raises(ad.ShapeError):
        ad.take(x, [18])


def test_softmax_ce2_hand_value():
    logits = ad.tensor(np.zeros((2, 4), np.float32))
    loss = ad.softmax_ce2(logits, np.array([0, 1, 0, 1]))
    assert loss.data == pytest.approx(np.log(2.0), abs=1e-7)


def test_end_to_end_loss_gradients_match_finite_differences():
    # Both composed training losses, every trainable parameter tensor,
    # against float64 central differences at the production step size.
    from trackseg.gradchecks import end_to_end_checks
    for name, run in end_to_end_checks():
        err = run(0)
        assert err < TOLERANCE, f"{name}: max rel err {err}"
