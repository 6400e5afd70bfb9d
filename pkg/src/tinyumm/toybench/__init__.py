"""Synthetic scene corpus and the programmatic evaluation harness."""

from .scenes import (
    PALETTE,
    SHAPES,
    LAYOUT_GRID,
    SceneObject,
    SceneSpec,
    caption_for,
    parse_caption,
    parse_scene,
    random_spec,
    render_scene,
)

__all__ = [
    "PALETTE",
    "SHAPES",
    "LAYOUT_GRID",
    "SceneObject",
    "SceneSpec",
    "caption_for",
    "parse_caption",
    "parse_scene",
    "random_spec",
    "render_scene",
]
