"""Channel-wise fusion of the two encoders' token grids, 2D position
encoding, and the token-budget analyzer.

Because both encoders reduce 32x, their grids align position for position. A
fused visual token is the concatenation [understanding | generation] along
channels, so an image occupies exactly (H/32)*(W/32) sequence positions no
matter how many encoders contribute features. The budget analyzer quantifies
what that buys against a token-wise layout that appends the two streams.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import sinusoid_features
from .tensor import ShapeMismatchError, Tensor

FUSION_ORDER = ("und", "gen")  # serialized in checkpoints; do not reorder

# The token-wise comparison layout models a conventional unified stack: an 8x
# autoencoder followed by 2x2 token merging (16x effective) for generation
# tokens, appended to understanding tokens at 32x.
BASELINE_GEN_REDUCTION = 16
BASELINE_UND_REDUCTION = 32
FUSED_REDUCTION = 32


def channel_concat(und: Tensor, gen: Tensor, grid: tuple[int, int]) -> Tensor:
    """Concatenate per-position features: (N, C_und) + (N, C_gen) -> (N, C_und+C_gen).

    Both inputs must cover the same (h, w) grid flattened row-major; a count
    mismatch signals encoder misconfiguration and raises.
    """
    n = grid[0] * grid[1]
    if und.shape[0] != n or gen.shape[0] != n:
        raise ShapeMismatchError(
            "channel_concat", und.shape, gen.shape,
            f"both encoders must emit {grid[0]}x{grid[1]} = {n} tokens",
        )
    return T.concat([und, gen], axis=1)


def posenc_2d(grid_h: int, grid_w: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal 2D position encoding for a token grid.

    First half of the channels encodes the row index, second half the column,
    each as interleaved sin/cos, so position (0,0) maps to [0,1,0,1,...].
    Distinct positions get distinct encodings for any grid up to 64x64.
    """
    if d_model % 4:
        raise ValueError(f"d_model must be divisible by 4 for 2D sinusoids, got {d_model}")
    half = d_model // 2
    rows = np.repeat(np.arange(grid_h), grid_w)
    cols = np.tile(np.arange(grid_w), grid_h)
    return np.concatenate(
        [sinusoid_features(rows, half), sinusoid_features(cols, half)], axis=1
    )


def add_2d_posenc(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    """Add the fixed 2D encoding to a flattened (N, d_model) token grid."""
    h, w = grid
    if tokens.shape[0] != h * w:
        raise ShapeMismatchError("add_2d_posenc", tokens.shape, (h * w,))
    return T.add(tokens, Tensor(posenc_2d(h, w, tokens.shape[1])))


def _parse_resolution(resolution) -> tuple[int, int]:
    if isinstance(resolution, int):
        return resolution, resolution
    h, w = resolution
    return int(h), int(w)


def token_budget(task: str, resolution) -> dict:
    """Visual-token counts for a task under both sequence layouts.

    ``fused`` is this architecture's layout (channel concat, 32x both
    encoders); ``baseline`` is the token-wise layout described above. The
    reported counts cover the visual tokens the task places in the sequence:
    the reference image for editing, the noisy grid for t2i, the input image
    for understanding.
    """
    if task not in ("t2i", "edit", "und"):
        raise ValueError(f"unknown task '{task}'")
    h, w = _parse_resolution(resolution)
    if h % FUSED_REDUCTION or w % FUSED_REDUCTION:
        raise ValueError(f"resolution must be divisible by {FUSED_REDUCTION}, got {h}x{w}")
    fused_grid = (h // FUSED_REDUCTION) * (w // FUSED_REDUCTION)
    base_gen = (h // BASELINE_GEN_REDUCTION) * (w // BASELINE_GEN_REDUCTION)
    base_und = (h // BASELINE_UND_REDUCTION) * (w // BASELINE_UND_REDUCTION)
    if task == "edit":
        fused = fused_grid          # one fused grid carries both streams
        baseline = base_gen + base_und  # token-wise concat appends them
    elif task == "t2i":
        fused = fused_grid
        baseline = base_gen
    else:
        fused = fused_grid
        baseline = base_und
    return {
        "task": task,
        "resolution": [h, w],
        "fused_tokens": fused,
        "baseline_tokens": baseline,
        "reduction": baseline / fused,
    }
