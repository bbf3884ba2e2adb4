"""Tape-based reverse-mode autodiff on numpy arrays.

Tensors are thin wrappers around float32 (or float64, for the finite-difference
oracles) ndarrays.  Operations record closures on a thread-local tape while a
``record()`` context is active; ``backward`` replays the tape in reverse
execution order, which is a valid topological order because every op appends
its node after its inputs were produced.  Gradients accumulate into ``.grad``
until cleared, so parameter tensors can live across many tapes.

There is no broadcasting beyond scalar-vs-tensor; shape mismatches raise
``ShapeError`` naming both shapes.  Forward passes are deterministic: identical
inputs give bit-identical outputs.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "GradCheckError", "record", "backward",
    "tensor", "const", "param", "zero_grads",
    "add", "sub", "mul", "scale", "relu", "sigmoid", "softplus", "smooth_l1",
    "pointwise", "conv2d", "depthwise_xcorr", "upsample2x", "pad2d", "slice2d",
    "concat_channels", "gather_cells", "take", "linear", "channel_affine",
    "softmax_ce2", "reshape", "tsum", "tmean", "grad_check",
]


class ShapeError(ValueError):
    pass


class GradCheckError(RuntimeError):
    pass


class Tensor:
    """ndarray + grad buffer.  Data is treated as immutable while a tape that
    references the tensor is alive; optimizers may rewrite ``.data`` in place
    between tapes."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def const(data, like=None):
    """Constant tensor, dtype matched to `like` so float64 oracle runs stay float64."""
    dt = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(data, dtype=dt), requires_grad=False)


def param(data):
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


def zero_grads(params):
    for p in (params.values() if isinstance(params, dict) else params):
        p.zero_grad()


# ---------------------------------------------------------------------------
# tape

class Tape:
    """Ordered list of recorded nodes.  Node k's inputs were all produced by
    nodes < k (execution order is a topological order)."""

    def __init__(self):
        self.nodes = []          # (out, backward_fn, input_ids)
        self.produced = set()    # id() of tensors created on this tape

    def push(self, out, fn, inputs):
        self.nodes.append((out, fn, tuple(id(t) for t in inputs)))
        self.produced.add(id(out))


_LOCAL = threading.local()


def _tape():
    stack = getattr(_LOCAL, "stack", None)
    return stack[-1] if stack else None


class record:
    """Context manager opening a fresh tape on this thread."""

    def __enter__(self):
        if not hasattr(_LOCAL, "stack"):
            _LOCAL.stack = []
        self.tape = Tape()
        _LOCAL.stack.append(self.tape)
        return self.tape

    def __exit__(self, *exc):
        popped = _LOCAL.stack.pop()
        assert popped is self.tape
        return False


def _register(out, fn, inputs):
    """Mark `out` as requiring grad and record the node if a tape is live and
    some input wants gradients.  Inference outside record() costs nothing."""
    tape = _tape()
    if tape is None:
        return out
    if any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.push(out, fn, [t for t in inputs if isinstance(t, Tensor)])
    return out


def backward(loss):
    """Reverse sweep over the current tape seeding d(loss)/d(loss)=1.

    loss must be a scalar produced on the currently active tape.  Gradients
    accumulate into ``.grad`` of every tensor on the path; leaves keep theirs
    until ``zero_grad``.
    """
    tape = _tape()
    if tape is None:
        raise RuntimeError("backward() called with no active tape; wrap the forward pass in record()")
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if id(loss) not in tape.produced:
        raise RuntimeError("loss was not produced on the current tape")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for out, fn, _ids in reversed(tape.nodes):
        if out.grad is not None:
            fn(out.grad)
    # drop intermediate grads so a second backward on this tape accumulates
    # exactly one more copy into the leaves
    for out, _fn, _ids in tape.nodes:
        out.grad = None


# ---------------------------------------------------------------------------
# pointwise ops

def _same_shape(a, b, opname):
    if a.data.shape != b.data.shape and a.data.shape != () and b.data.shape != ():
        raise ShapeError(f"{opname}: shapes {a.data.shape} and {b.data.shape} differ (only scalar-tensor mixing is allowed)")


def add(a, b):
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def fn(g):
        if a.requires_grad:
            a.accumulate(g if a.data.shape == out.data.shape else g.sum())
        if b.requires_grad:
            b.accumulate(g if b.data.shape == out.data.shape else g.sum())
    return _register(out, fn, (a, b))


def sub(a, b):
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def fn(g):
        if a.requires_grad:
            a.accumulate(g if a.data.shape == out.data.shape else g.sum())
        if b.requires_grad:
            b.accumulate(-g if b.data.shape == out.data.shape else -g.sum())
    return _register(out, fn, (a, b))


def mul(a, b):
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)

    def fn(g):
        if a.requires_grad:
            ga = g * b.data
            a.accumulate(ga if a.data.shape == out.data.shape else ga.sum())
        if b.requires_grad:
            gb = g * a.data
            b.accumulate(gb if b.data.shape == out.data.shape else gb.sum())
    return _register(out, fn, (a, b))


def scale(a, s):
    s = float(s)
    out = Tensor(a.data * a.data.dtype.type(s))

    def fn(g):
        if a.requires_grad:
            a.accumulate(g * a.data.dtype.type(s))
    return _register(out, fn, (a,))


def relu(a):
    out = Tensor(np.maximum(a.data, 0))

    def fn(g):
        if a.requires_grad:
            a.accumulate(g * (a.data > 0))
    return _register(out, fn, (a,))


def _sigmoid(x):
    # split by sign so exp never overflows; extreme logits land on (0, 1) subnormals
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    s = _sigmoid(a.data)
    out = Tensor(s)

    def fn(g):
        if a.requires_grad:
            a.accumulate(g * s * (1.0 - s))
    return _register(out, fn, (a,))


def softplus(a):
    """log(1 + e^x), computed as max(x,0) + log1p(e^-|x|)."""
    x = a.data
    out = Tensor(np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x))))

    def fn(g):
        if a.requires_grad:
            a.accumulate(g * _sigmoid(x))
    return _register(out, fn, (a,))


def smooth_l1(a):
    """Elementwise 0.5 x^2 for |x|<1 else |x|-0.5."""
    x = a.data
    ax = np.abs(x)
    out = Tensor(np.where(ax < 1, 0.5 * x * x, ax - 0.5).astype(x.dtype))

    def fn(g):
        if a.requires_grad:
            a.accumulate(g * np.clip(x, -1, 1))
    return _register(out, fn, (a,))


_POINTWISE = {"relu": relu, "sigmoid": sigmoid, "add": add, "mul": mul, "scale": scale}


def pointwise(op_kind, *args):
    if op_kind not in _POINTWISE:
        raise ValueError(f"unknown pointwise op {op_kind!r}; have {sorted(_POINTWISE)}")
    return _POINTWISE[op_kind](*args)


# ---------------------------------------------------------------------------
# conv2d

def conv2d(x, w, b=None, stride=1, dilation=1, padding=0):
    """2-D convolution (really cross-correlation, as usual) on a single image.

    x: (C_in, H, W); w: (C_out, C_in, kH, kW); b: (C_out,) or None.
    Output H' = floor((H + 2p - d*(kH-1) - 1)/s) + 1, same for W.
    Implemented with an im2col slice loop + one matmul per call.
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected x (C,H,W) and w (Co,Ci,kh,kw), got {x.data.shape} and {w.data.shape}")
    cin, H, W = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {cin_w} (x {x.data.shape}, w {w.data.shape})")
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape} does not match {cout} output channels")
    s, d, p = int(stride), int(dilation), int(padding)
    eh, ew = d * (kh - 1) + 1, d * (kw - 1) + 1    # dilated kernel extent
    Hp, Wp = H + 2 * p, W + 2 * p
    if eh > Hp or ew > Wp:
        raise ShapeError(f"conv2d: dilated kernel {eh}x{ew} exceeds padded input {Hp}x{Wp}")
    Ho = (Hp - eh) // s + 1
    Wo = (Wp - ew) // s + 1

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((cin, kh, kw, Ho * Wo), dtype=x.data.dtype)
    for ki in range(kh):
        for kj in range(kw):
            sl = xp[:, ki * d: ki * d + (Ho - 1) * s + 1: s,
                       kj * d: kj * d + (Wo - 1) * s + 1: s]
            cols[:, ki, kj, :] = sl.reshape(cin, -1)
    cols2 = cols.reshape(cin * kh * kw, Ho * Wo)
    wmat = w.data.reshape(cout, cin * kh * kw)
    y = wmat @ cols2
    if b is not None:
        y = y + b.data[:, None]
    out = Tensor(y.reshape(cout, Ho, Wo))

    def fn(g):
        gflat = g.reshape(cout, Ho * Wo)
        if b is not None and b.requires_grad:
            b.accumulate(gflat.sum(axis=1))
        if w.requires_grad:
            w.accumulate((gflat @ cols2.T).reshape(w.data.shape))
        if x.requires_grad:
            dcols = (wmat.T @ gflat).reshape(cin, kh, kw, Ho, Wo)
            dxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, ki * d: ki * d + (Ho - 1) * s + 1: s,
                           kj * d: kj * d + (Wo - 1) * s + 1: s] += dcols[:, ki, kj]
            x.accumulate(dxp[:, p:p + H, p:p + W] if p else dxp)

    inputs = (x, w) if b is None else (x, w, b)
    return _register(out, fn, inputs)


def depthwise_xcorr(x, z):
    """Per-channel valid cross-correlation of search features x (C,Hx,Wx) with
    exemplar features z (C,Hz,Wz) -> (C, Hx-Hz+1, Wx-Wz+1).

    The channel count is preserved (multi-channel response map); summing the
    output over channels would reproduce plain single-channel correlation.
    """
    if x.data.ndim != 3 or z.data.ndim != 3:
        raise ShapeError(f"depthwise_xcorr: need 3-d tensors, got {x.data.shape} and {z.data.shape}")
    c, Hx, Wx = x.data.shape
    cz, Hz, Wz = z.data.shape
    if c != cz:
        raise ShapeError(f"depthwise_xcorr: channel mismatch {x.data.shape} vs {z.data.shape}")
    if Hz > Hx or Wz > Wx:
        raise ShapeError(f"depthwise_xcorr: exemplar {z.data.shape} larger than search {x.data.shape}")
    Ho, Wo = Hx - Hz + 1, Wx - Wz + 1
    y = np.zeros((c, Ho, Wo), dtype=x.data.dtype)
    for i in range(Hz):
        for j in range(Wz):
            y += x.data[:, i:i + Ho, j:j + Wo] * z.data[:, i, j][:, None, None]
    out = Tensor(y)

    def fn(g):
        if z.requires_grad:
            dz = np.empty_like(z.data)
            for i in range(Hz):
                for j in range(Wz):
                    dz[:, i, j] = (g * x.data[:, i:i + Ho, j:j + Wo]).sum(axis=(1, 2))
            z.accumulate(dz)
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for i in range(Hz):
                for j in range(Wz):
                    dx[:, i:i + Ho, j:j + Wo] += g * z.data[:, i, j][:, None, None]
            x.accumulate(dx)
    return _register(out, fn, (x, z))


# ---------------------------------------------------------------------------
# resampling / layout ops

def _upsample_matrix(n, mode, dtype):
    """(2n, n) row-stochastic interpolation matrix for one axis."""
    m = np.zeros((2 * n, n), dtype=dtype)
    if mode == "nearest":
        for i in range(2 * n):
            m[i, i // 2] = 1.0
    elif mode == "bilinear":
        # align-corners-false: output i samples input at (i+0.5)/2 - 0.5, clamped
        for i in range(2 * n):
            src = (i + 0.5) / 2.0 - 0.5
            if src <= 0:
                m[i, 0] = 1.0
            elif src >= n - 1:
                m[i, n - 1] = 1.0
            else:
                i0 = int(np.floor(src))
                t = src - i0
                m[i, i0] = 1.0 - t
                m[i, i0 + 1] = t
    else:
        raise ValueError(f"upsample2x: unknown mode {mode!r}")
    return m


def upsample2x(x, mode="bilinear"):
    """(C,H,W) -> (C,2H,2W); nearest replication or align-corners-false bilinear."""
    if x.data.ndim != 3:
        raise ShapeError(f"upsample2x: need (C,H,W), got {x.data.shape}")
    c, H, W = x.data.shape
    ah = _upsample_matrix(H, mode, x.data.dtype)
    aw = _upsample_matrix(W, mode, x.data.dtype)
    t = np.tensordot(x.data, ah, axes=(1, 1))      # (C, W, 2H)
    y = np.tensordot(t, aw, axes=(1, 1))           # (C, 2H, 2W)
    out = Tensor(np.ascontiguousarray(y))

    def fn(g):
        if x.requires_grad:
            t2 = np.tensordot(g, ah, axes=(1, 0))  # (C, 2W, H)
            dx = np.tensordot(t2, aw, axes=(1, 0))
            x.accumulate(np.ascontiguousarray(dx))
    return _register(out, fn, (x,))


def pad2d(x, pads, mode="zero"):
    """Pad (C,H,W) by (top, bottom, left, right); mode 'zero' or 'replicate'."""
    if x.data.ndim != 3:
        raise ShapeError(f"pad2d: need (C,H,W), got {x.data.shape}")
    pt, pb, pl, pr = (int(v) for v in pads)
    if min(pt, pb, pl, pr) < 0:
        raise ValueError(f"pad2d: negative pads {pads}")
    c, H, W = x.data.shape
    if mode == "zero":
        y = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr)))
    elif mode == "replicate":
        y = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr)), mode="edge")
    else:
        raise ValueError(f"pad2d: unknown mode {mode!r}")
    out = Tensor(y)
    # row/col index each output position reads from (replicate clamps to edge)
    rows = np.clip(np.arange(H + pt + pb) - pt, 0, H - 1)
    cols = np.clip(np.arange(W + pl + pr) - pl, 0, W - 1)

    def fn(g):
        if not x.requires_grad:
            return
        if mode == "zero":
            x.accumulate(g[:, pt:pt + H, pl:pl + W])
        else:
            dx = np.zeros_like(x.data)
            tmp = np.zeros((c, H, W + pl + pr), dtype=g.dtype)
            np.add.at(tmp, (slice(None), rows, slice(None)), g)
            np.add.at(dx.transpose(0, 2, 1), (slice(None), cols, slice(None)), tmp.transpose(0, 2, 1))
            x.accumulate(dx)
    return _register(out, fn, (x,))


def slice2d(x, r0, r1, c0, c1):
    """Differentiable spatial crop x[:, r0:r1, c0:c1]."""
    if x.data.ndim != 3:
        raise ShapeError(f"slice2d: need (C,H,W), got {x.data.shape}")
    c, H, W = x.data.shape
    if not (0 <= r0 < r1 <= H and 0 <= c0 < c1 <= W):
        raise ShapeError(f"slice2d: window [{r0}:{r1}, {c0}:{c1}] outside {x.data.shape}")
    out = Tensor(x.data[:, r0:r1, c0:c1].copy())

    def fn(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[:, r0:r1, c0:c1] = g
            x.accumulate(dx)
    return _register(out, fn, (x,))


def concat_channels(a, b):
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[1:] != b.data.shape[1:]:
        raise ShapeError(f"concat_channels: spatial dims differ: {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[0]
    out = Tensor(np.concatenate([a.data, b.data], axis=0))

    def fn(g):
        if a.requires_grad:
            a.accumulate(g[:ca])
        if b.requires_grad:
            b.accumulate(g[ca:])
    return _register(out, fn, (a, b))


def gather_cells(x, cells):
    """Pick grid cells from (C,H,W) -> (C, n) in the given order."""
    if x.data.ndim != 3:
        raise ShapeError(f"gather_cells: need (C,H,W), got {x.data.shape}")
    ii = np.asarray([c[0] for c in cells], dtype=np.intp)
    jj = np.asarray([c[1] for c in cells], dtype=np.intp)
    c, H, W = x.data.shape
    if len(cells) and (ii.min() < 0 or ii.max() >= H or jj.min() < 0 or jj.max() >= W):
        raise ShapeError(f"gather_cells: cell outside {H}x{W} grid")
    out = Tensor(x.data[:, ii, jj].copy())

    def fn(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            np.add.at(dx, (slice(None), ii, jj), g)
            x.accumulate(dx)
    return _register(out, fn, (x,))


def take(x, flat_idx):
    """Gather from the flattened tensor -> (n,).  Duplicate indices allowed."""
    idx = np.asarray(flat_idx, dtype=np.intp)
    flat = x.data.reshape(-1)
    if len(idx) and (idx.min() < 0 or idx.max() >= flat.size):
        raise ShapeError(f"take: index out of range for {x.data.shape}")
    out = Tensor(flat[idx].copy())

    def fn(g):
        if x.requires_grad:
            dflat = np.zeros(flat.size, dtype=x.data.dtype)
            np.add.at(dflat, idx, g)
            x.accumulate(dflat.reshape(x.data.shape))
    return _register(out, fn, (x,))


def linear(w, x, b=None):
    """w (m,k) @ x (k,) or (k,n), plus optional bias (m,) broadcast over columns."""
    if w.data.ndim != 2 or x.data.ndim not in (1, 2) or w.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"linear: shapes {w.data.shape} @ {x.data.shape} do not chain")
    y = w.data @ x.data
    if b is not None:
        if b.data.shape != (w.data.shape[0],):
            raise ShapeError(f"linear: bias {b.data.shape} vs {w.data.shape[0]} rows")
        y = y + (b.data if y.ndim == 1 else b.data[:, None])
    out = Tensor(y)

    def fn(g):
        if b is not None and b.requires_grad:
            b.accumulate(g if g.ndim == 1 else g.sum(axis=1))
        if w.requires_grad:
            w.accumulate(np.outer(g, x.data) if g.ndim == 1 else g @ x.data.T)
        if x.requires_grad:
            x.accumulate(w.data.T @ g)

    inputs = (w, x) if b is None else (w, x, b)
    return _register(out, fn, inputs)


def channel_affine(x, gamma, beta, mu, sigma):
    """Frozen per-channel standardization plus trainable affine:
    y[c] = gamma[c] * (x[c] - mu[c]) / sigma[c] + beta[c].

    mu/sigma are calibration constants (never differentiated)."""
    c = x.data.shape[0]
    for t, name in ((gamma, "gamma"), (beta, "beta"), (mu, "mu"), (sigma, "sigma")):
        if t.data.shape != (c,):
            raise ShapeError(f"channel_affine: {name} shape {t.data.shape} vs {c} channels")
    xn = (x.data - mu.data[:, None, None]) / sigma.data[:, None, None]
    out = Tensor(xn * gamma.data[:, None, None] + beta.data[:, None, None])

    def fn(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xn).sum(axis=(1, 2)))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            x.accumulate(g * (gamma.data / sigma.data)[:, None, None])
    return _register(out, fn, (x, gamma, beta, mu, sigma))


def instance_norm(x, eps=1e-5):
    """Live per-channel spatial standardization:
    y[c] = (x[c] - mean(x[c])) / sqrt(var(x[c]) + eps) over the H*W cells.

    Unlike a frozen standardization, the statistics sit inside the graph:
    scaling a channel's input up or down leaves the output (and the loss)
    unchanged, so shrinking upstream weights cannot silence a feature —
    the collapse direction is gradient-neutral by construction."""
    if x.data.ndim != 3:
        raise ShapeError(f"instance_norm wants (C, H, W), got {x.data.shape}")
    n = x.data.shape[1] * x.data.shape[2]
    if n < 2:
        raise ShapeError("instance_norm needs at least 2 spatial cells")
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    var = x.data.var(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xn = (x.data - mu) * inv
    out = Tensor(xn.astype(x.data.dtype))

    def fn(g):
        if x.requires_grad:
            gm = g.mean(axis=(1, 2), keepdims=True)
            gx = (g * xn).mean(axis=(1, 2), keepdims=True)
            x.accumulate(inv * (g - gm - xn * gx))
    return _register(out, fn, (x,))


def softmax_ce2(logits, targets):
    """Mean 2-class cross-entropy.  logits (2, n); targets (n,) in {0,1}."""
    if logits.data.ndim != 2 or logits.data.shape[0] != 2:
        raise ShapeError(f"softmax_ce2: logits must be (2,n), got {logits.data.shape}")
    t = np.asarray(targets)
    n = logits.data.shape[1]
    if t.shape != (n,):
        raise ShapeError(f"softmax_ce2: targets {t.shape} vs {n} columns")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=0, keepdims=True)
    picked = np.where(t == 1, p[1], p[0])
    out = Tensor(np.asarray(-np.log(np.maximum(picked, 1e-30)).mean(), dtype=logits.data.dtype))

    def fn(g):
        if logits.requires_grad:
            onehot = np.zeros_like(p)
            onehot[0, t == 0] = 1.0
            onehot[1, t == 1] = 1.0
            logits.accumulate(g * (p - onehot) / n)
    return _register(out, fn, (logits,))


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape).copy())

    def fn(g):
        if x.requires_grad:
            x.accumulate(g.reshape(x.data.shape))
    return _register(out, fn, (x,))


def tsum(x):
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))

    def fn(g):
        if x.requires_grad:
            x.accumulate(np.broadcast_to(g, x.data.shape).astype(x.data.dtype))
    return _register(out, fn, (x,))


def tmean(x):
    return scale(tsum(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f, inputs, epsilon=1e-3, max_coords_per_input=None, rng=None):
    """Compare reverse-mode gradients of scalar f(inputs) against central
    finite differences recomputed in float64.  f takes the whole list of
    tensors as its single argument.

    Returns the max relative error |a - n| / max(|a|, |n|, 1e-8) over all
    checked coordinates.  f must be deterministic (two float32 forwards must
    agree bit-exactly) and scalar-valued, else GradCheckError.

    max_coords_per_input: if set, check only that many seeded-random
    coordinates per input tensor (needed for big parameter tensors).
    """
    f32_inputs = [Tensor(t.data.astype(np.float32), requires_grad=True) for t in inputs]
    y1 = f(f32_inputs)
    y2 = f(f32_inputs)
    if y1.data.shape != ():
        raise GradCheckError(f"f must return a scalar, got shape {y1.data.shape}")
    if y1.data.tobytes() != y2.data.tobytes():
        raise GradCheckError("f is not deterministic: two forward passes differ")

    with record():
        loss = f(f32_inputs)
        backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in f32_inputs]

    base64 = [t.data.astype(np.float64) for t in f32_inputs]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for k, t in enumerate(f32_inputs):
        n = t.data.size
        coords = np.arange(n)
        if max_coords_per_input is not None and n > max_coords_per_input:
            coords = rng.choice(n, size=max_coords_per_input, replace=False)
        for c in coords:
            num = _central_diff(f, base64, k, int(c), epsilon)
            a = float(analytic[k].reshape(-1)[c])
            rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, rel)
    return worst


def _central_diff(f, base64, k, coord, eps):
    def eval_at(delta):
        args = [Tensor(b.copy()) for b in base64]
        flat = args[k].data.reshape(-1)
        flat[coord] += delta
        return float(f(args).data)
    return (eval_at(eps) - eval_at(-eps)) / (2.0 * eps)
