"""Small reusable network blocks built on the traced-tensor ops."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Linear:
    """Bias-free linear map (..., n_in) -> (..., n_out)."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, std: float | None = None):
        if std is None:
            std = 1.0 / math.sqrt(n_in)
        self.w = T.param(rng.normal(0.0, std, size=(n_in, n_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w}


class RMSNorm:
    def __init__(self, width: int):
        self.gain = T.param(np.ones(width))

    def __call__(self, x: Tensor) -> Tensor:
        return T.rms_norm(x, self.gain)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain}


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(N, width) -> (heads, N, head_dim)."""
    n, width = x.shape
    return T.transpose(T.reshape(x, (n, heads, width // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    """(heads, N, head_dim) -> (N, width)."""
    h, n, hd = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, h * hd))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, allow: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over (N, width) projections.

    ``allow``, when given, is an (N, N) boolean matrix; row i may attend to
    column j only where allow[i, j]. Denied pairs get exactly zero weight.
    """
    qh = split_heads(q, heads)
    kh = split_heads(k, heads)
    vh = split_heads(v, heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 2, 1))), scale)
    if allow is None:
        w = T.softmax(scores)
    else:
        w = T.masked_softmax(scores, allow[None, :, :])
    return merge_heads(T.matmul(w, vh))


class FeedForward:
    """SiLU MLP: width -> hidden -> width."""

    def __init__(self, rng, width: int, hidden: int):
        self.w1 = Linear(rng, width, hidden)
        self.w2 = Linear(rng, hidden, width)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(T.silu(self.w1(x)))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {**self.w1.params(f"{prefix}.w1"), **self.w2.params(f"{prefix}.w2")}


class Conv:
    """3x3-or-so conv with bias, thin wrapper holding its weights."""

    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                 padding: int = 1, std: float | None = None):
        if std is None:
            std = 1.0 / math.sqrt(c_in * k * k)
        self.w = T.param(rng.normal(0.0, std, size=(c_out, c_in, k, k)))
        self.b = T.param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def sinusoid_features(values: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved sin/cos features of scalar inputs, value 0 -> [0,1,0,1,...].

    Frequencies follow the usual geometric ladder over ``dim/2`` pairs.
    """
    if dim % 2:
        raise ValueError(f"sinusoid feature dim must be even, got {dim}")
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = values[:, None] * freqs[None, :]
    out = np.empty((values.size, dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def collect_params(objs: dict[str, object]) -> dict[str, Tensor]:
    """Merge .params(prefix) of several named blocks into one dict."""
    out: dict[str, Tensor] = {}
    for prefix, obj in objs.items():
        out.update(obj.params(prefix))
    return out
