"""The shared-and-decoupled transformer core.

Every layer runs ONE joint self-attention over the whole interleaved
text+visual sequence; what differs per token is which parameter set projects
it, selected by its branch tag (und for text and understanding-side visual
tokens, gen for noisy latent tokens). Shallow layers share query/key/output
and the MLP across branches but keep per-branch value projections; deep
layers keep everything per branch.

Attention masking is hybrid: understanding sequences are strictly causal;
generation and editing sequences keep text causal while each visual segment
attends bidirectionally within itself and causally to everything earlier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import FeedForward, Linear, RMSNorm, collect_params, merge_heads, split_heads
from .tensor import Tensor

UND, GEN = "und", "gen"
TEXT, VIS_CLEAN, VIS_NOISY = "text", "vis_clean", "vis_noisy"


@dataclass
class Segment:
    kind: str                 # text | vis_clean | vis_noisy
    branch: str               # und | gen
    embeddings: Tensor        # (n, d_model)
    token_ids: np.ndarray | None = None   # text segments only
    grid: tuple[int, int] | None = None   # visual segments only


@dataclass
class UnifiedSequence:
    task: str                 # und | t2i | edit
    segments: list[Segment]
    branch: np.ndarray = field(init=False)    # per-token tag index: 0 und, 1 gen
    segment_id: np.ndarray = field(init=False)
    kind: list[str] = field(init=False)

    def __post_init__(self):
        if not self.segments or sum(s.embeddings.shape[0] for s in self.segments) == 0:
            raise ValueError("empty sequence")
        branch, seg_id, kind = [], [], []
        for i, seg in enumerate(self.segments):
            n = seg.embeddings.shape[0]
            if seg.kind == VIS_NOISY and seg.branch != GEN:
                raise ValueError("noisy visual segments must be gen-branch")
            if seg.kind == TEXT and seg.branch != UND:
                raise ValueError("text is always processed by the und branch")
            branch += [0 if seg.branch == UND else 1] * n
            seg_id += [i] * n
            kind += [seg.kind] * n
        self.branch = np.array(branch, dtype=np.intp)
        self.segment_id = np.array(seg_id, dtype=np.intp)
        self.kind = kind

    def __len__(self) -> int:
        return len(self.kind)

    @property
    def embeddings(self) -> Tensor:
        parts = [s.embeddings for s in self.segments]
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=0)

    def positions(self) -> np.ndarray:
        return np.arange(len(self), dtype=np.float64)

    def rows(self, branch: str) -> np.ndarray:
        return np.nonzero(self.branch == (0 if branch == UND else 1))[0]

    def segment_rows(self, index: int) -> np.ndarray:
        return np.nonzero(self.segment_id == index)[0]


def build_sequence(task: str, text_segments: list[Segment],
                   visual_segments: list[Segment]) -> UnifiedSequence:
    """Interleave text and visual segments in their task order.

    und:  [question text][clean visual][answer text]
    t2i:  [caption text][noisy latent grid]
    edit: [instruction text][clean fused reference][noisy latent grid]
    The caller supplies segments already embedded/adapted/position-encoded;
    this assembles and validates the branch routing for the task.
    """
    if task == "und":
        order = (text_segments[:1] + visual_segments + text_segments[1:])
        if any(s.branch != UND for s in order):
            raise ValueError("und sequences are entirely und-branch")
    elif task == "t2i":
        order = text_segments + visual_segments
    elif task == "edit":
        order = text_segments + visual_segments
    else:
        raise ValueError(f"unknown task '{task}'")
    return UnifiedSequence(task, [s for s in order if s.embeddings.shape[0] > 0])


def build_mask(seq: UnifiedSequence) -> np.ndarray:
    """Boolean allow matrix: allow[i, j] means token i may attend token j.

    Understanding tasks are purely causal. Otherwise text stays causal while
    visual tokens see everything in their own segment (bidirectional) plus
    all earlier tokens.
    """
    n = len(seq)
    idx = np.arange(n)
    causal = idx[None, :] <= idx[:, None]
    if seq.task == "und":
        return causal
    # effective segment rank: text tokens are singleton segments (causal),
    # visual segments are shared; allow[i, j] = rank[j] <= rank[i]
    rank = np.empty(n, dtype=np.intp)
    r = 0
    pos = 0
    for seg in seq.segments:
        m = seg.embeddings.shape[0]
        if seg.kind == TEXT:
            for k in range(m):
                rank[pos + k] = r
                r += 1
        else:
            rank[pos:pos + m] = r
            r += 1
        pos += m
    return rank[None, :] <= rank[:, None]


def rope_tables(positions: np.ndarray, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    if head_dim % 2:
        raise ValueError(f"RoPE needs an even head dim, got {head_dim}")
    half = head_dim // 2
    inv_freq = 10000.0 ** (-np.arange(half) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def apply_rope(x: Tensor, positions: np.ndarray, heads: int) -> Tensor:
    """Rotate interleaved (even, odd) channel pairs of each head by the
    1D position angle. Position 0 is the identity; rotations preserve norms
    and make q.k depend on relative offset only."""
    n, width = x.shape
    hd = width // heads
    cos, sin = rope_tables(positions, hd)
    cos = cos[:, None, :]  # (n, 1, hd/2) broadcasting over heads
    sin = sin[:, None, :]
    xh = T.reshape(x, (n, heads, hd))
    xe = xh[:, :, 0::2]
    xo = xh[:, :, 1::2]
    oe = T.sub(T.mul(xe, Tensor(cos)), T.mul(xo, Tensor(sin)))
    oo = T.add(T.mul(xe, Tensor(sin)), T.mul(xo, Tensor(cos)))
    pairs = T.concat(
        [T.reshape(oe, (n, heads, hd // 2, 1)), T.reshape(oo, (n, heads, hd // 2, 1))],
        axis=3,
    )
    return T.reshape(pairs, (n, width))


def _branch_apply(x: Tensor, seq: UnifiedSequence, fn_und, fn_gen) -> Tensor:
    """Apply per-branch maps to the rows each branch owns, reassembled in
    sequence order. A branch with no rows contributes nothing, so its weights
    never enter the trace (exact-zero gradients)."""
    iu = seq.rows(UND)
    ig = seq.rows(GEN)
    if len(ig) == 0:
        return fn_und(x)
    if len(iu) == 0:
        return fn_gen(x)
    out_u = fn_und(T.index_rows(x, iu))
    out_g = fn_gen(T.index_rows(x, ig))
    return T.scatter_rows([out_u, out_g], [iu, ig], len(seq))


class SharedLayer:
    """Shared Q/K/O and MLP; value projections are per branch."""

    def __init__(self, rng, d: int, heads: int, ffn_mult: int):
        self.heads = heads
        self.norm1 = RMSNorm(d)
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, d, d)
        self.wv_und = Linear(rng, d, d)
        self.wv_gen = Linear(rng, d, d)
        self.wo = Linear(rng, d, d)
        self.norm2 = RMSNorm(d)
        self.ffn = FeedForward(rng, d, d * ffn_mult)

    def __call__(self, x: Tensor, seq: UnifiedSequence, allow: np.ndarray,
                 positions: np.ndarray) -> Tensor:
        h = self.norm1(x)
        q = apply_rope(self.wq(h), positions, self.heads)
        k = apply_rope(self.wk(h), positions, self.heads)
        v = _branch_apply(h, seq, self.wv_und, self.wv_gen)
        qh, kh, vh = (split_heads(t, self.heads) for t in (q, k, v))
        scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 2, 1))),
                         1.0 / math.sqrt(qh.shape[-1]))
        att = merge_heads(T.matmul(T.masked_softmax(scores, allow[None]), vh))
        x = T.add(x, self.wo(att))
        return T.add(x, self.ffn(self.norm2(x)))

    def params(self, prefix: str, section) -> dict[str, Tensor]:
        out = collect_params({
            section("shared", f"{prefix}.norm1"): self.norm1,
            section("shared", f"{prefix}.wq"): self.wq,
            section("shared", f"{prefix}.wk"): self.wk,
            section("shared", f"{prefix}.wo"): self.wo,
            section("shared", f"{prefix}.norm2"): self.norm2,
            section("shared", f"{prefix}.ffn"): self.ffn,
            section(UND, f"{prefix}.wv"): self.wv_und,
            section(GEN, f"{prefix}.wv"): self.wv_gen,
        })
        return out


class DecoupledLayer:
    """Everything per branch; attention still joint across the sequence."""

    def __init__(self, rng, d: int, heads: int, ffn_mult: int):
        self.heads = heads
        self.blocks = {}
        for b in (UND, GEN):
            self.blocks[b] = {
                "norm1": RMSNorm(d),
                "wq": Linear(rng, d, d),
                "wk": Linear(rng, d, d),
                "wv": Linear(rng, d, d),
                "wo": Linear(rng, d, d),
                "norm2": RMSNorm(d),
                "ffn": FeedForward(rng, d, d * ffn_mult),
            }

    def _proj(self, name: str):
        return (lambda t: self.blocks[UND][name](t)), (lambda t: self.blocks[GEN][name](t))

    def __call__(self, x: Tensor, seq: UnifiedSequence, allow: np.ndarray,
                 positions: np.ndarray) -> Tensor:
        h = _branch_apply(x, seq, *self._proj("norm1"))
        q = apply_rope(_branch_apply(h, seq, *self._proj("wq")), positions, self.heads)
        k = apply_rope(_branch_apply(h, seq, *self._proj("wk")), positions, self.heads)
        v = _branch_apply(h, seq, *self._proj("wv"))
        qh, kh, vh = (split_heads(t, self.heads) for t in (q, k, v))
        scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 2, 1))),
                         1.0 / math.sqrt(qh.shape[-1]))
        att = merge_heads(T.matmul(T.masked_softmax(scores, allow[None]), vh))
        x = T.add(x, _branch_apply(att, seq, *self._proj("wo")))
        mlp_in = _branch_apply(x, seq, *self._proj("norm2"))
        und_ffn = self.blocks[UND]["ffn"]
        gen_ffn = self.blocks[GEN]["ffn"]
        return T.add(x, _branch_apply(mlp_in, seq, und_ffn, gen_ffn))

    def params(self, prefix: str, section) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for b in (UND, GEN):
            blk = self.blocks[b]
            out.update(collect_params({
                section(b, f"{prefix}.norm1"): blk["norm1"],
                section(b, f"{prefix}.wq"): blk["wq"],
                section(b, f"{prefix}.wk"): blk["wk"],
                section(b, f"{prefix}.wv"): blk["wv"],
                section(b, f"{prefix}.wo"): blk["wo"],
                section(b, f"{prefix}.norm2"): blk["norm2"],
                section(b, f"{prefix}.ffn"): blk["ffn"],
            }))
        return out


class BranchedLayerStack:
    def __init__(self, rng, d: int, heads: int, n_shared: int, n_decoupled: int,
                 ffn_mult: int = 2):
        self.shared = [SharedLayer(rng, d, heads, ffn_mult) for _ in range(n_shared)]
        self.decoupled = [DecoupledLayer(rng, d, heads, ffn_mult) for _ in range(n_decoupled)]

    def __call__(self, seq: UnifiedSequence) -> Tensor:
        x = seq.embeddings
        allow = build_mask(seq)
        positions = seq.positions()
        for layer in self.shared:
            x = layer(x, seq, allow, positions)
        for layer in self.decoupled:
            x = layer(x, seq, allow, positions)
        return x

    def params(self, section) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.shared):
            out.update(layer.params(f"core.s{i}", section))
        for i, layer in enumerate(self.decoupled):
            out.update(layer.params(f"core.d{i}", section))
        return out
