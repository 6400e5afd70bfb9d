"""Corpus generation: renders scenes to PNG and writes a JSONL manifest.

One manifest record per sample, with a ``task`` in {und, t2i, edit, router}
and a ``split`` in {train, eval}. Understanding records carry question and
answer strings; edit records carry source/target image paths plus the
instruction; router records carry a binary stem label. Identical seeds
produce byte-identical corpora.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .scenes import (
    COLOR_NAMES,
    LAYOUT_GRID,
    PALETTE,
    RESOLUTION_BUCKETS,
    SHAPES,
    SceneObject,
    SceneSpec,
    caption_for,
    random_spec,
    render_scene,
)

EOS = 0  # byte value terminating every answer


def to_png_bytes(img: np.ndarray) -> Image.Image:
    arr = np.clip((img + 1.0) / 2.0, 0.0, 1.0)
    return Image.fromarray((arr * 255.0).round().astype(np.uint8).transpose(1, 2, 0))


def save_png(path: str | Path, img: np.ndarray) -> None:
    to_png_bytes(img).save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1) * 2.0 - 1.0


def spec_to_json(spec: SceneSpec) -> dict:
    return {
        "objects": [[o.shape, o.color, o.row, o.col] for o in spec.objects],
        "height": spec.height,
        "width": spec.width,
        "stem": spec.stem,
    }


def spec_from_json(d: dict) -> SceneSpec:
    objs = tuple(sorted(SceneObject(s, c, r, k) for s, c, r, k in d["objects"]))
    return SceneSpec(objs, d["height"], d["width"], d["stem"])


def qa_for(spec: SceneSpec, rng: np.random.Generator) -> tuple[str, str]:
    """One question/answer pair about the scene, drawn from fixed templates."""
    obj = spec.objects[int(rng.integers(0, len(spec.objects)))]
    kinds = ["count", "shape_of_color", "where"]
    shapes = [o.shape for o in spec.objects]
    if shapes.count(obj.shape) == 1:
        kinds.append("color_of_shape")
    kind = kinds[int(rng.integers(0, len(kinds)))]
    if kind == "count":
        return "how many objects are there?", str(len(spec.objects))
    if kind == "shape_of_color":
        return f"what shape is the {obj.color} object?", obj.shape
    if kind == "where":
        return f"where is the {obj.color} {obj.shape}?", f"row {obj.row} column {obj.col}"
    return f"what color is the {obj.shape}?", obj.color


def make_edit(spec: SceneSpec, rng: np.random.Generator) -> tuple[str, SceneSpec]:
    """(instruction, target spec) for a random edit applicable to the scene."""
    kinds = ["recolor", "move"]
    if len(spec.objects) < 3:
        kinds.append("add")
    if len(spec.objects) > 1:
        kinds.append("remove")
    kind = kinds[int(rng.integers(0, len(kinds)))]
    objs = list(spec.objects)
    obj = objs[int(rng.integers(0, len(objs)))]
    used_cells = {(o.row, o.col) for o in objs}
    used_colors = {o.color for o in objs}
    if kind == "add":
        free_cells = [(r, c) for r in range(LAYOUT_GRID) for c in range(LAYOUT_GRID)
                      if (r, c) not in used_cells]
        cell = free_cells[int(rng.integers(0, len(free_cells)))]
        color = [c for c in COLOR_NAMES if c not in used_colors][
            int(rng.integers(0, len(COLOR_NAMES) - len(used_colors)))]
        shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
        new = SceneObject(shape, color, cell[0], cell[1])
        instr = f"add a {color} {shape} at row {cell[0]} column {cell[1]}"
        target = objs + [new]
    elif kind == "remove":
        instr = f"remove the {obj.color} {obj.shape}"
        target = [o for o in objs if o != obj]
    elif kind == "recolor":
        color = [c for c in COLOR_NAMES if c not in used_colors][
            int(rng.integers(0, len(COLOR_NAMES) - len(used_colors)))]
        instr = f"recolor the {obj.color} {obj.shape} to {color}"
        target = [o for o in objs if o != obj] + [SceneObject(obj.shape, color, obj.row, obj.col)]
    else:
        free_cells = [(r, c) for r in range(LAYOUT_GRID) for c in range(LAYOUT_GRID)
                      if (r, c) not in used_cells]
        cell = free_cells[int(rng.integers(0, len(free_cells)))]
        instr = f"move the {obj.color} {obj.shape} to row {cell[0]} column {cell[1]}"
        target = [o for o in objs if o != obj] + [SceneObject(obj.shape, obj.color, cell[0], cell[1])]
    return instr, SceneSpec(tuple(sorted(target)), spec.height, spec.width, spec.stem)


DEFAULT_SIZES = {
    "und": 400,          # QA pairs over general scenes
    "caption": 200,      # describe-the-image pairs (alignment data)
    "t2i": 500,
    "edit": 300,
    "stem_und": 160,     # QA pairs over technical (grid-paper) scenes
    "router": 240,       # labeled stem/general images, balanced
    "eval_geneval": 100, # 20 prompts per category
    "eval_und": 60,
    "eval_edit": 40,
    "eval_router": 100,
}


@dataclass
class Corpus:
    root: Path
    records: list[dict] = field(default_factory=list)
    _cache: dict = field(default_factory=dict)

    def pool(self, task: str, split: str = "train") -> list[dict]:
        return [r for r in self.records if r["task"] == task and r["split"] == split]

    def image(self, rel_path: str) -> np.ndarray:
        return self.image_u8(rel_path).astype(np.float64) / 127.5 - 1.0

    def image_u8(self, rel_path: str) -> np.ndarray:
        """Quantized form, for bulk staging without float64 memory cost."""
        if rel_path not in self._cache:
            arr = load_png(self.root / rel_path)
            self._cache[rel_path] = ((arr + 1.0) * 127.5).round().astype(np.uint8)
        return self._cache[rel_path]


def load_corpus(root: str | Path) -> Corpus:
    root = Path(root)
    records = [json.loads(line) for line in (root / "manifest.jsonl").read_text().splitlines()]
    return Corpus(root=root, records=records)


def gen_corpus(root: str | Path, seed: int = 0, sizes: dict | None = None) -> Corpus:
    """Render the full synthetic corpus under ``root``. Deterministic per seed."""
    sizes = {**DEFAULT_SIZES, **(sizes or {})}
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records: list[dict] = []
    counter = 0

    def emit_image(img: np.ndarray) -> str:
        nonlocal counter
        rel = f"images/{counter:06d}.png"
        save_png(root / rel, img)
        counter += 1
        return rel

    def bucket_for(i: int) -> tuple[int, int]:
        # training pools cycle through the resolution buckets
        return RESOLUTION_BUCKETS[i % len(RESOLUTION_BUCKETS)]

    for i in range(sizes["und"]):
        spec = random_spec(rng)
        q, a = qa_for(spec, rng)
        rel = emit_image(render_scene(spec))
        records.append({"task": "und", "split": "train", "image": rel,
                        "question": q, "answer": a, "spec": spec_to_json(spec)})

    for i in range(sizes["caption"]):
        spec = random_spec(rng)
        rel = emit_image(render_scene(spec))
        records.append({"task": "caption", "split": "train", "image": rel,
                        "question": "describe the image",
                        "answer": caption_for(spec), "spec": spec_to_json(spec)})

    for i in range(sizes["t2i"]):
        spec = random_spec(rng, size=bucket_for(i))
        rel = emit_image(render_scene(spec))
        records.append({"task": "t2i", "split": "train", "image": rel,
                        "caption": caption_for(spec), "spec": spec_to_json(spec)})

    for i in range(sizes["edit"]):
        spec = random_spec(rng, size=bucket_for(i))
        instr, target = make_edit(spec, rng)
        rel_src = emit_image(render_scene(spec))
        rel_tgt = emit_image(render_scene(target))
        records.append({"task": "edit", "split": "train",
                        "source_image": rel_src, "target_image": rel_tgt,
                        "instruction": instr, "source_spec": spec_to_json(spec),
                        "target_spec": spec_to_json(target)})

    for i in range(sizes["stem_und"]):
        spec = random_spec(rng, stem=True)
        q, a = qa_for(spec, rng)
        rel = emit_image(render_scene(spec))
        records.append({"task": "stem_und", "split": "train", "image": rel,
                        "question": q, "answer": a, "spec": spec_to_json(spec)})

    for i in range(sizes["router"]):
        stem = i % 2 == 0
        spec = random_spec(rng, stem=stem)
        rel = emit_image(render_scene(spec))
        records.append({"task": "router", "split": "train", "image": rel,
                        "label": int(stem), "spec": spec_to_json(spec)})

    # evaluation splits
    per_cat = sizes["eval_geneval"] // 5
    for cat_idx, cat in enumerate(
        ["single_object", "two_object", "colors", "position", "color_attribution"]
    ):
        for i in range(per_cat):
            n = 2 if cat in ("two_object", "color_attribution") else 1
            while True:
                spec = random_spec(rng, n_objects=n)
                shapes = [o.shape for o in spec.objects]
                if len(set(shapes)) == len(shapes):  # distinct shapes aid scoring
                    break
            records.append({"task": "t2i", "split": "eval", "category": cat,
                            "caption": caption_for(spec), "spec": spec_to_json(spec)})

    for i in range(sizes["eval_und"]):
        spec = random_spec(rng)
        q, a = qa_for(spec, rng)
        rel = emit_image(render_scene(spec))
        records.append({"task": "und", "split": "eval", "image": rel,
                        "question": q, "answer": a, "spec": spec_to_json(spec)})

    for i in range(sizes["eval_edit"]):
        spec = random_spec(rng)
        instr, target = make_edit(spec, rng)
        rel_src = emit_image(render_scene(spec))
        records.append({"task": "edit", "split": "eval", "source_image": rel_src,
                        "instruction": instr, "source_spec": spec_to_json(spec),
                        "target_spec": spec_to_json(target)})

    for i in range(sizes["eval_router"]):
        stem = i % 2 == 0
        spec = random_spec(rng, stem=stem)
        rel = emit_image(render_scene(spec))
        records.append({"task": "router", "split": "eval", "image": rel,
                        "label": int(stem), "spec": spec_to_json(spec)})

    lines = [json.dumps(r, sort_keys=True) for r in records]
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return Corpus(root=root, records=records)
