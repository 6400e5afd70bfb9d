"""Procedural scenes: colored shapes on a layout grid, with an exact parser.

A scene is 1 to 3 objects, each a (shape, color, cell) triple on a 4x4 layout
grid over the canvas. Colors are unique within a scene, which is what makes
the color-blob parser an exact inverse of the renderer. Images are float
arrays (3, H, W) in [-1, 1].

The parser is the measurement instrument for every downstream score, so its
round-trip property (parse(render(s)) == s) is tested exhaustively.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

LAYOUT_GRID = 4
SHAPES = ("circle", "square", "triangle")

# Palette values picked to be far apart in RGB so nearest-color classification
# has wide margins even on slightly blurry reconstructions.
PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.15, 0.20, 0.90),
    "yellow": (0.95, 0.85, 0.10),
    "orange": (0.95, 0.50, 0.05),
    "purple": (0.55, 0.10, 0.75),
    "cyan": (0.10, 0.80, 0.85),
    "brown": (0.50, 0.32, 0.12),
}
COLOR_NAMES = tuple(PALETTE)
BACKGROUND = (1.0, 1.0, 1.0)
STEM_LINE_COLOR = (0.80, 0.80, 0.80)
STEM_LINE_PITCH = 8

RESOLUTION_BUCKETS = ((64, 64), (96, 96), (64, 128))


@dataclass(frozen=True, order=True)
class SceneObject:
    shape: str
    color: str
    row: int
    col: int


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    height: int = 64
    width: int = 64
    stem: bool = False  # grid-paper texture marking technical imagery

    def __post_init__(self):
        cells = [(o.row, o.col) for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("objects must occupy distinct cells")
        colors = [o.color for o in self.objects]
        if len(set(colors)) != len(colors):
            raise ValueError("colors must be unique within a scene")
        if not 1 <= len(self.objects) <= 3:
            raise ValueError("scenes have 1 to 3 objects")

    def canonical(self) -> "SceneSpec":
        return SceneSpec(tuple(sorted(self.objects)), self.height, self.width, self.stem)


def nearest_bucket(h: int, w: int) -> tuple[int, int]:
    """Pick the resolution bucket closest in aspect then area."""
    def key(b):
        bh, bw = b
        return (abs(np.log(h / w) - np.log(bh / bw)), abs(h * w - bh * bw))
    return min(RESOLUTION_BUCKETS, key=key)


def _shape_mask(shape: str, yy: np.ndarray, xx: np.ndarray,
                cy: float, cx: float, s: float) -> np.ndarray:
    half = s / 2.0
    if shape == "square":
        return (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= half ** 2
    if shape == "triangle":
        # apex up: base at cy+half, tip at cy-half; width tapers linearly
        frac = (yy - (cy - half)) / s
        return (frac >= 0) & (frac <= 1) & (np.abs(xx - cx) <= half * frac)
    raise ValueError(f"unknown shape '{shape}'")


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Rasterize to a float image (3, H, W) in [-1, 1]. Deterministic."""
    h, w = spec.height, spec.width
    img = np.ones((3, h, w))
    if spec.stem:
        for y in range(0, h, STEM_LINE_PITCH):
            img[:, y, :] = np.array(STEM_LINE_COLOR)[:, None]
        for x in range(0, w, STEM_LINE_PITCH):
            img[:, :, x] = np.array(STEM_LINE_COLOR)[:, None]
    cell_h, cell_w = h / LAYOUT_GRID, w / LAYOUT_GRID
    yy, xx = np.mgrid[0:h, 0:w]
    yy = yy + 0.5
    xx = xx + 0.5
    for obj in spec.objects:
        cy = (obj.row + 0.5) * cell_h
        cx = (obj.col + 0.5) * cell_w
        s = 0.8 * min(cell_h, cell_w)
        mask = _shape_mask(obj.shape, yy, xx, cy, cx, s)
        rgb = PALETTE[obj.color]
        for ch in range(3):
            img[ch][mask] = rgb[ch]
    return img * 2.0 - 1.0


def random_spec(rng: np.random.Generator, n_objects: int | None = None,
                size: tuple[int, int] = (64, 64), stem: bool = False) -> SceneSpec:
    if n_objects is None:
        n_objects = int(rng.integers(1, 4))
    cells = rng.choice(LAYOUT_GRID * LAYOUT_GRID, size=n_objects, replace=False)
    colors = rng.choice(len(COLOR_NAMES), size=n_objects, replace=False)
    objs = []
    for cell, ci in zip(cells, colors):
        shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
        objs.append(SceneObject(shape, COLOR_NAMES[int(ci)],
                                int(cell) // LAYOUT_GRID, int(cell) % LAYOUT_GRID))
    return SceneSpec(tuple(sorted(objs)), size[0], size[1], stem)


# -- parsing -----------------------------------------------------------------

_MIN_BLOB_FRACTION = 0.12  # of one layout cell's area
_FILL_SQUARE_CUT = 0.93    # fill ratio above this: square (exact squares = 1.00)
_FILL_CIRCLE_CUT = 0.62    # between cuts: circle (measured 0.71-0.86); below: triangle (<=0.55)


def _classify_shape(fill_ratio: float) -> str:
    if fill_ratio >= _FILL_SQUARE_CUT:
        return "square"
    if fill_ratio >= _FILL_CIRCLE_CUT:
        return "circle"
    return "triangle"


def _despeckle(mask: np.ndarray) -> np.ndarray:
    """Drop pixels with fewer than 2 of 8 neighbors set; solid blobs survive
    intact (even a triangle apex has 2 neighbors), salt noise does not."""
    padded = np.pad(mask, 1)
    neighbors = sum(
        padded[1 + dy : padded.shape[0] - 1 + dy, 1 + dx : padded.shape[1] - 1 + dx]
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
        if (dy, dx) != (0, 0)
    )
    return mask & (neighbors >= 2)


def parse_scene(img: np.ndarray, stem: bool | None = None) -> SceneSpec:
    """Recover the SceneSpec from an image in [-1, 1].

    Pixels are assigned to the nearest of {background, grid-line gray, the 8
    palette colors}; each palette color present as a sufficiently large blob
    becomes one object, classified by centroid cell and bounding-box fill
    ratio. Exact on rendered ground truth; tolerant of mild blur and speckle
    on model outputs (percentile-trimmed bounding boxes).
    """
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {img.shape}")
    h, w = img.shape[1:]
    img01 = (np.clip(img, -1, 1) + 1.0) / 2.0
    refs = np.array([BACKGROUND, STEM_LINE_COLOR] + [PALETTE[c] for c in COLOR_NAMES])
    flat = img01.reshape(3, -1).T
    d2 = ((flat[:, None, :] - refs[None, :, :]) ** 2).sum(-1)
    labels = d2.argmin(axis=1).reshape(h, w)

    cell_h, cell_w = h / LAYOUT_GRID, w / LAYOUT_GRID
    min_px = _MIN_BLOB_FRACTION * cell_h * cell_w
    objects = []
    for ci, color in enumerate(COLOR_NAMES):
        mask = _despeckle(labels == ci + 2)
        count = int(mask.sum())
        if count < min_px:
            continue
        ys, xs = np.nonzero(mask)
        bb_h = ys.max() - ys.min() + 1
        bb_w = xs.max() - xs.min() + 1
        fill = len(ys) / float(bb_h * bb_w)
        cy, cx = ys.mean() + 0.5, xs.mean() + 0.5
        row = min(int(cy / cell_h), LAYOUT_GRID - 1)
        col = min(int(cx / cell_w), LAYOUT_GRID - 1)
        objects.append(SceneObject(_classify_shape(fill), color, row, col))
    if stem is None:
        stem = bool((labels == 1).sum() > 0.05 * h * w)
    if not objects:
        raise ValueError("no objects found in image")
    return SceneSpec(tuple(sorted(objects)), h, w, stem)


# -- caption grammar -----------------------------------------------------------

def _phrase(obj: SceneObject) -> str:
    return f"a {obj.color} {obj.shape} at row {obj.row} column {obj.col}"


def caption_for(spec: SceneSpec) -> str:
    """Deterministic caption; objects in canonical (shape, color) sort order."""
    return " and ".join(_phrase(o) for o in sorted(spec.objects))


_PHRASE_RE = re.compile(
    r"a (\w+) (circle|square|triangle) at row (\d) column (\d)"
)


def parse_caption(caption: str, size: tuple[int, int] = (64, 64)) -> SceneSpec:
    """Inverse of caption_for; raises on anything off-grammar."""
    parts = caption.split(" and ")
    objs = []
    for part in parts:
        m = _PHRASE_RE.fullmatch(part.strip())
        if m is None:
            raise ValueError(f"cannot parse phrase: {part!r}")
        color, shape, row, col = m.group(1), m.group(2), int(m.group(3)), int(m.group(4))
        if color not in PALETTE:
            raise ValueError(f"unknown color {color!r}")
        objs.append(SceneObject(shape, color, row, col))
    return SceneSpec(tuple(sorted(objs)), size[0], size[1])
