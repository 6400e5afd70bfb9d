"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records a closure on an evaluation trace; ``backward`` on a
scalar walks the trace in reverse topological order and accumulates gradients
into ``.grad`` of each ``requires_grad`` leaf. All data is 64-bit so the
finite-difference oracles used in the tests stay tight.

Tensors are treated as immutable values once created. The trace is built and
consumed single-threaded; determinism is guaranteed for identical inputs when
BLAS runs single-threaded.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, shape_a, shape_b, detail: str = ""):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b) if shape_b is not None else None
        msg = f"{op}: incompatible shapes {self.shape_a} vs {self.shape_b}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable trace recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _asarray(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or g is self.data else g
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Reverse-mode pass from a scalar. Populates ``.grad`` on leaves.

        Parameters that never entered the trace keep ``grad is None``; the
        caller treats that as an exact zero.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if not node.requires_grad or node._parents:
                # free intermediate grads and the trace as we go
                if node is not self and node._parents:
                    node.grad = None
            node._parents = ()
            node._backward = None

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("tensor/tensor division is not part of the op catalog")

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = False
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError("add", a.shape, b.shape)

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatchError("sub", a.shape, b.shape)

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError("mul", a.shape, b.shape)

    def bwd(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    data = a.data * s

    def bwd(g):
        a._accumulate(g * s)

    return _make(data, (a,), bwd)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x); smooth, so finite differences check it cleanly."""
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def bwd(g):
        a._accumulate(g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _make(data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch-broadcast semantics on leading dims."""
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape, "inner dims must agree")
    data = a.data @ b.data

    def bwd(g):
        bt = np.swapaxes(b.data, -1, -2) if b.ndim > 1 else b.data[None, :]
        at = np.swapaxes(a.data, -1, -2) if a.ndim > 1 else a.data[:, None]
        ga = g @ bt if g.ndim > 1 or b.ndim > 1 else np.outer(g, b.data)
        gb = at @ g
        a._accumulate(_unbroadcast(np.atleast_1d(ga), a.shape))
        b._accumulate(_unbroadcast(np.atleast_1d(gb), b.shape))

    return _make(data, (a, b), bwd)


# ---------------------------------------------------------------------------
# shape rearrangement
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", a.shape, shape, "element count must match")

    def bwd(g):
        a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        a._accumulate(g.transpose(inv))

    return _make(data, (a,), bwd)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)
        ):
            raise ShapeMismatchError("concat", tensors[0].shape, t.shape)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    return _make(data, tuple(tensors), bwd)


def getitem(a: Tensor, key) -> Tensor:
    """Basic slicing / integer indexing. Backward scatters into zeros."""
    data = a.data[key]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] = g
        a._accumulate(full)

    return _make(data.copy(), (a,), bwd)


def index_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0 by an integer index array."""
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(data, (a,), bwd)


def scatter_rows(parts: list[Tensor], indices: list[np.ndarray], n_rows: int) -> Tensor:
    """Place each part's rows at its indices in a fresh (n_rows, ...) tensor.

    Index lists must be disjoint; uncovered rows are zero. The inverse of
    splitting a sequence by branch, used to reassemble per-branch projections.
    """
    trailing = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != trailing:
            raise ShapeMismatchError("scatter_rows", parts[0].shape, p.shape)
    data = np.zeros((n_rows,) + trailing, dtype=np.float64)
    idx_arrays = [np.asarray(ix, dtype=np.intp) for ix in indices]
    for p, ix in zip(parts, idx_arrays):
        data[ix] = p.data

    def bwd(g):
        for p, ix in zip(parts, idx_arrays):
            p._accumulate(g[ix])

    return _make(data, tuple(parts), bwd)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into an embedding matrix; scatter-add backward."""
    ids = np.asarray(ids, dtype=np.intp)
    data = weight.data[ids]

    def bwd(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        weight._accumulate(full)

    return _make(data, (weight,), bwd)


# ---------------------------------------------------------------------------
# reductions and normalization
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _make(data, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (out * g).sum(axis=axis, keepdims=True)
        a._accumulate(out * (g - dot))

    return _make(out, (a,), bwd)


def masked_softmax(scores: Tensor, allow: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax with hard masking: denied entries get exactly zero weight.

    ``allow`` is a boolean array broadcastable to ``scores``. Every row must
    allow at least one entry. Denied entries contribute exact 0.0 weight, so
    outputs are bit-invariant to the values they would have attended to.
    """
    allow = np.broadcast_to(np.asarray(allow, dtype=bool), scores.shape)
    if not allow.any(axis=axis).all():
        raise ValueError("masked_softmax: some row denies every entry")
    neg = np.where(allow, scores.data, -np.inf)
    m = neg.max(axis=axis, keepdims=True)
    e = np.exp(neg - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (out * g).sum(axis=axis, keepdims=True)
        scores._accumulate(out * (g - dot))

    return _make(out, (scores,), bwd)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled by gain."""
    if gain.shape != (x.shape[-1],):
        raise ShapeMismatchError("rms_norm", x.shape, gain.shape, "gain must match last dim")
    n = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    normed = x.data * inv
    data = normed * gain.data

    def bwd(g):
        t = g * gain.data
        dot = (x.data * t).sum(axis=-1, keepdims=True)
        x._accumulate(inv * t - (inv ** 3 / n) * x.data * dot)
        gsum = (g * normed).reshape(-1, n).sum(axis=0)
        gain._accumulate(gsum)

    return _make(data, (x, gain), bwd)


def cross_entropy_logits(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean cross-entropy over masked rows of (n, vocab) logits."""
    targets = np.asarray(targets, dtype=np.intp)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 2:
        raise ShapeMismatchError("cross_entropy", logits.shape, None, "expected (n, vocab)")
    if targets.shape[0] != logits.shape[0] or mask.shape[0] != logits.shape[0]:
        raise ShapeMismatchError("cross_entropy", logits.shape, targets.shape)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: empty loss mask")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    picked = z[np.arange(z.shape[0]), targets]
    data = np.asarray(((lse - picked) * mask).sum() / count)

    def bwd(g):
        p = np.exp(z - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(z.shape[0]), targets] -= 1.0
        logits._accumulate(p * (mask[:, None] * (float(g) / count)))

    return _make(data, (logits,), bwd)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """(B, C, H, W) -> (B, C*r*r, H/r, W/r); merges r x r neighborhoods into channels."""
    b, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeMismatchError(
            "pixel_unshuffle", x.shape, (r, r), f"spatial dims must be multiples of {r}"
        )
    data = (
        x.data.reshape(b, c, h // r, r, w // r, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(b, c * r * r, h // r, w // r)
    )

    def bwd(g):
        a = (
            g.reshape(b, c, r, r, h // r, w // r)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(b, c, h, w)
        )
        x._accumulate(a)

    return _make(data.copy(), (x,), bwd)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(B, C*r*r, H, W) -> (B, C, H*r, W*r); exact inverse of pixel_unshuffle."""
    b, c2, h, w = x.shape
    if c2 % (r * r):
        raise ShapeMismatchError(
            "pixel_shuffle", x.shape, (r, r), f"channels must be a multiple of {r * r}"
        )
    c = c2 // (r * r)
    data = (
        x.data.reshape(b, c, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(b, c, h * r, w * r)
    )

    def bwd(g):
        a = (
            g.reshape(b, c, h, r, w, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(b, c2, h, w)
        )
        x._accumulate(a)

    return _make(data.copy(), (x,), bwd)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, ho, wo, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution, x (B, C, H, W) with kernel w (O, C, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError("conv2d", x.shape, w.shape, "channel dims must agree")
    bb, c, h, ww_ = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    data = out.reshape(bb, ho, wo, o).transpose(0, 3, 1, 2)

    def bwd(g):
        gcols = g.transpose(0, 2, 3, 1).reshape(-1, o)
        w._accumulate((gcols.T @ cols).reshape(w.shape))
        if b is not None:
            b._accumulate(gcols.sum(axis=0))
        dcols = gcols @ wmat
        dxp = np.zeros_like(xp)
        dwin = dcols.reshape(bb, ho, wo, c, kh, kw)
        for i in range(kh):
            hi = i + stride * ho
            for j in range(kw):
                wj = j + stride * wo
                dxp[:, :, i:hi:stride, j:wj:stride] += dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        x._accumulate(dxp)

    return _make(data.copy(), (x, w) + ((b,) if b is not None else ()), bwd)


def _bilinear_coeffs(n_in: int, n_out: int):
    """align_corners=True sample positions; identity when n_out == n_in."""
    if n_out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1)) if n_in > 1 else np.zeros(n_out)
    i0 = np.clip(np.floor(pos).astype(np.intp), 0, max(n_in - 2, 0))
    frac = pos - i0
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    return i0, i1, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear interpolation over the trailing two axes (align_corners=True).

    Identity (bit-exact) when the target equals the source grid.
    """
    *lead, h, w = x.shape
    y0, y1, fy = _bilinear_coeffs(h, out_h)
    x0, x1, fx = _bilinear_coeffs(w, out_w)
    fy = fy.reshape(-1, 1)
    fx = fx.reshape(1, -1)
    d = x.data
    tl = d[..., y0[:, None], x0[None, :]]
    tr = d[..., y0[:, None], x1[None, :]]
    bl = d[..., y1[:, None], x0[None, :]]
    br = d[..., y1[:, None], x1[None, :]]
    w_tl = (1 - fy) * (1 - fx)
    w_tr = (1 - fy) * fx
    w_bl = fy * (1 - fx)
    w_br = fy * fx
    data = tl * w_tl + tr * w_tr + bl * w_bl + br * w_br

    def bwd(g):
        full = np.zeros_like(x.data)
        flat = full.reshape(-1, h, w)
        gf = (g * np.ones(())).reshape(-1, out_h, out_w)
        yy0 = y0[:, None]
        yy1 = y1[:, None]
        xx0 = x0[None, :]
        xx1 = x1[None, :]
        for k in range(flat.shape[0]):
            np.add.at(flat[k], (yy0, xx0), gf[k] * w_tl)
            np.add.at(flat[k], (yy0, xx1), gf[k] * w_tr)
            np.add.at(flat[k], (yy1, xx0), gf[k] * w_bl)
            np.add.at(flat[k], (yy1, xx1), gf[k] * w_br)
        x._accumulate(full)

    return _make(data, (x,), bwd)


# ---------------------------------------------------------------------------
# convenience constructors
# ---------------------------------------------------------------------------


def param(data, requires_grad: bool = True) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape, std: float = 1.0, requires_grad: bool = False) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=requires_grad)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if a.shape != b.shape:
        raise ShapeMismatchError("mse", a.shape, b.shape)
    d = sub(a, b)
    return tmean(mul(d, d))


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x (..., in) times w (in, out); bias-free projection."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatchError("linear", x.shape, w.shape, "input width must match")
    return matmul(x, w)
