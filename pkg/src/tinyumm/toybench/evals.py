"""Programmatic evaluations scored by the exact scene parser.

Every metric here takes callables rather than a model so oracle and
degenerate implementations can pin the metric corners: the renderer itself
must score 1.0, a blank generator 0.0, an identity editor must score
followed=0 but consistency=1.

generate_fn(caption, seed) -> image; answer_fn(question, image) -> str;
edit_fn(source_image, instruction, seed) -> image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import spec_from_json
from .scenes import SceneSpec, parse_scene

GENEVAL_CATEGORIES = ("single_object", "two_object", "colors", "position",
                      "color_attribution")


@dataclass
class EvalReport:
    categories: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def overall(self) -> float:
        if not self.categories:
            return 0.0
        return float(np.mean(list(self.categories.values())))

    def to_json(self) -> dict:
        return {"categories": self.categories, "counts": self.counts,
                "overall": self.overall}


def _score_parsed(category: str, want: SceneSpec, got: SceneSpec | None) -> float:
    if got is None:
        return 0.0
    objs = set(got.objects)
    if category == "single_object":
        target = want.objects[0]
        return float(any(o.shape == target.shape for o in objs))
    if category == "two_object":
        shapes = {o.shape for o in objs}
        return float(all(t.shape in shapes for t in want.objects))
    if category == "colors":
        target = want.objects[0]
        return float(any(o.shape == target.shape and o.color == target.color
                         for o in objs))
    if category == "position":
        target = want.objects[0]
        return float(any(o.shape == target.shape and o.color == target.color
                         and (o.row, o.col) == (target.row, target.col)
                         for o in objs))
    if category == "color_attribution":
        ok = True
        for target in want.objects:
            ok &= any(o.shape == target.shape and o.color == target.color
                      for o in objs)
        return float(ok)
    raise ValueError(f"unknown category '{category}'")


def _try_parse(img: np.ndarray) -> SceneSpec | None:
    try:
        return parse_scene(img)
    except ValueError:
        return None


def mini_geneval(generate_fn, records: list[dict], log=None) -> EvalReport:
    """Compositional generation benchmark over eval-split t2i records."""
    sums: dict[str, float] = {c: 0.0 for c in GENEVAL_CATEGORIES}
    counts: dict[str, int] = {c: 0 for c in GENEVAL_CATEGORIES}
    for i, rec in enumerate(records):
        cat = rec["category"]
        want = spec_from_json(rec["spec"])
        img = generate_fn(rec["caption"], i)
        score = _score_parsed(cat, want, _try_parse(img))
        sums[cat] += score
        counts[cat] += 1
        if log is not None:
            log(i, cat, score)
    cats = {c: (sums[c] / counts[c] if counts[c] else 0.0) for c in GENEVAL_CATEGORIES
            if counts[c]}
    return EvalReport(categories=cats, counts=counts)


def und_eval(answer_fn, records: list[dict], image_of) -> float:
    """Exact-match accuracy on question answering."""
    if not records:
        raise ValueError("empty evaluation set")
    hits = 0
    for rec in records:
        got = answer_fn(rec["question"], image_of(rec["image"]))
        hits += int(got.strip() == rec["answer"])
    return hits / len(records)


def edit_eval(edit_fn, records: list[dict], image_of) -> tuple[float, float]:
    """(instruction-followed rate, consistency rate) over edit triples.

    followed: the instructed change is realized exactly (objects the edit
    adds are present; objects it removes are gone).
    consistency: every object the edit leaves untouched survives with
    attributes intact. Extra spurious objects harm neither metric alone;
    they show up as failures of followed for remove/recolor/move cases.
    """
    if not records:
        raise ValueError("empty evaluation set")
    followed = 0
    consistent = 0
    for i, rec in enumerate(records):
        src = set(spec_from_json(rec["source_spec"]).objects)
        tgt = set(spec_from_json(rec["target_spec"]).objects)
        out_spec = _try_parse(edit_fn(image_of(rec["source_image"]),
                                      rec["instruction"], i))
        out = set(out_spec.objects) if out_spec is not None else set()
        added = tgt - src
        removed = src - tgt
        kept = src & tgt
        followed += int(added <= out and not (removed & out))
        consistent += int(kept <= out)
    return followed / len(records), consistent / len(records)


def router_eval(expert_set, records: list[dict], image_of) -> float:
    """Routing accuracy on labeled held-out images (1 = technical/stem)."""
    if not records:
        raise ValueError("empty evaluation set")
    hits = 0
    for rec in records:
        decision = expert_set.route(image_of(rec["image"]))
        hits += int((decision.expert_id == "stem") == bool(rec["label"]))
    return hits / len(records)
