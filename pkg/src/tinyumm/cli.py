"""Command-line interface.

    tinyumm tokens   --task edit --resolution 1024
    tinyumm datagen  --out corpus/ --seed 0
    tinyumm train    --corpus corpus/ --out runs/a [--config cfg.json] [--resume ckpt]
    tinyumm generate --ckpt runs/a/ckpt_qt --prompt "..." --out img.png
    tinyumm edit     --ckpt runs/a/ckpt_qt --image src.png --instruction "..." --out img.png
    tinyumm eval     --ckpt runs/a/ckpt_rt --corpus corpus/ [--suite geneval|und|edit|router|all]
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def _cmd_tokens(args) -> int:
    from .fusion import token_budget

    res = [int(x) for x in args.resolution.split("x")] if "x" in args.resolution \
        else int(args.resolution)
    report = token_budget(args.task, res)
    report["reduction"] = round(report["reduction"], 2)
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def _cmd_datagen(args) -> int:
    from .toybench.corpus import gen_corpus

    sizes = json.loads(args.sizes) if args.sizes else None
    corpus = gen_corpus(args.out, seed=args.seed, sizes=sizes)
    counts: dict[str, int] = {}
    for r in corpus.records:
        key = f"{r['task']}/{r['split']}"
        counts[key] = counts.get(key, 0) + 1
    print(json.dumps({"root": str(corpus.root), "counts": counts}, indent=1,
                     sort_keys=True))
    return 0


def _load_stages(config_path: str | None):
    from .training import default_curriculum

    if not config_path:
        return default_curriculum(), 1500
    cfg = json.loads(Path(config_path).read_text())
    stages = default_curriculum(steps=cfg.get("steps"),
                                batch_size=cfg.get("batch_size", 6))
    return stages, cfg.get("ae_steps", 1500)


def _cmd_train(args) -> int:
    from .model import TinyUMM
    from .toybench.corpus import load_corpus
    from .training import run_curriculum

    corpus = load_corpus(args.corpus)
    if args.resume:
        model, _, _ = TinyUMM.load(args.resume)
    else:
        model = TinyUMM(seed=args.seed)
    stages, ae_steps = _load_stages(args.config)
    if args.stage:
        stages = [s for s in stages if s.name == args.stage]
        if not stages:
            print(f"unknown stage {args.stage!r}", file=sys.stderr)
            return 2
    run_curriculum(model, corpus, args.out, seed=args.seed, stages=stages,
                   ae_steps=ae_steps, progress=lambda m: print(m, flush=True))
    print(f"checkpoints in {args.out}")
    return 0


def _cmd_generate(args) -> int:
    from .inference import SamplerConfig, sample_image, write_image_outputs
    from .model import TinyUMM

    model, _, _ = TinyUMM.load(args.ckpt)
    h, w = (int(x) for x in args.resolution.split("x")) if "x" in args.resolution \
        else (int(args.resolution), int(args.resolution))
    cfg = SamplerConfig(steps=args.steps, cfg_scale=args.cfg_scale,
                        seed=args.seed, resolution=(h, w))
    img = sample_image(model, args.prompt, cfg)
    sidecar = write_image_outputs(args.out, img, "t2i", cfg, args.prompt)
    print(json.dumps(sidecar, indent=1, sort_keys=True))
    return 0


def _cmd_edit(args) -> int:
    from .inference import SamplerConfig, edit_image, write_image_outputs
    from .model import TinyUMM
    from .toybench.corpus import load_png

    model, _, _ = TinyUMM.load(args.ckpt)
    reference = load_png(args.image)
    cfg = SamplerConfig(steps=args.steps, cfg_scale=args.cfg_scale, seed=args.seed)
    img = edit_image(model, reference, args.instruction, cfg)
    cfg = SamplerConfig(cfg.steps, cfg.cfg_scale, cfg.seed,
                        (img.shape[1], img.shape[2]))
    sidecar = write_image_outputs(args.out, img, "edit", cfg, args.instruction)
    print(json.dumps(sidecar, indent=1, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    from .inference import SamplerConfig, decode_text, edit_image, sample_image
    from .model import TinyUMM
    from .toybench.corpus import load_corpus
    from .toybench.evals import edit_eval, mini_geneval, router_eval, und_eval

    model, _, _ = TinyUMM.load(args.ckpt)
    corpus = load_corpus(args.corpus)
    out: dict = {}
    suites = ("geneval", "und", "edit", "router") if args.suite == "all" else (args.suite,)
    if "geneval" in suites:
        report = mini_geneval(
            lambda caption, i: sample_image(model, caption, SamplerConfig(
                steps=args.steps, seed=i)),
            corpus.pool("t2i", "eval"))
        out["geneval"] = report.to_json()
    if "und" in suites:
        out["und_accuracy"] = und_eval(
            lambda q, img: decode_text(model, q, img),
            corpus.pool("und", "eval"), corpus.image)
    if "edit" in suites:
        followed, consistency = edit_eval(
            lambda img, instr, i: edit_image(model, img, instr, SamplerConfig(
                steps=args.steps, seed=i)),
            corpus.pool("edit", "eval"), corpus.image)
        out["edit"] = {"followed": followed, "consistency": consistency}
    if "router" in suites:
        out["router_accuracy"] = router_eval(model.moe, corpus.pool("router", "eval"),
                                             corpus.image)
    print(json.dumps(out, indent=1, sort_keys=True))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="tinyumm")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("tokens", help="visual-token budget for a task/resolution")
    p.add_argument("--task", choices=["t2i", "edit", "und"], required=True)
    p.add_argument("--resolution", default="1024", help="N or HxW, pixels")
    p.set_defaults(fn=_cmd_tokens)

    p = sub.add_parser("datagen", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", help="JSON dict overriding pool sizes")
    p.set_defaults(fn=_cmd_datagen)

    p = sub.add_parser("train", help="run the training curriculum")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON: {steps: {stage: n}, batch_size, ae_steps}")
    p.add_argument("--stage", help="run a single named stage")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("generate", help="text-to-image sampling")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--cfg-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", default="64")
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("edit", help="instruction-guided image editing")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--cfg-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_edit)

    p = sub.add_parser("eval", help="run the toy benchmark suites")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--suite", default="all",
                   choices=["all", "geneval", "und", "edit", "router"])
    p.add_argument("--steps", type=int, default=32)
    p.set_defaults(fn=_cmd_eval)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
