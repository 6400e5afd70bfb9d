"""Staged training curriculum with per-stage freezing and balanced mixing.

Six stages run in order: alignment (adapter only), pt (broad pretraining),
sft (instruction tuning, editing joins halfway), qt (quality tuning), et
(technical-imagery expert only), rt (router only). The generation
autoencoder is pretrained once before the curriculum and stays frozen
through every stage, which a checksum audit enforces.

Everything is deterministic given the seed: batches come from an exact
round-robin interleave, and each sample slot gets an RNG derived from
(seed, stage, step, slot), so a resumed run draws the same noise the
uninterrupted run would have.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import params_checksum, restore_optim
from .encoders import latent_channel_scale, pretrain_autoencoder
from .model import TinyUMM
from .objectives import joint_step
from .optim import AdamW, lr_at
from .toybench.corpus import Corpus
from .toybench.scenes import RESOLUTION_BUCKETS, random_spec, render_scene

STAGE_ORDER = ("alignment", "pt", "sft", "qt", "et", "rt")
AE_PREFIX = "gen_branch/ae"
STEM_PREFIX = "und_branch/enc.stem"
ROUTER_PREFIX = "und_branch/enc.router"


@dataclass
class StageConfig:
    name: str
    steps: int
    base_lr: float
    schedule: str                      # constant | cosine
    mix_phases: tuple = ()             # ((fraction, {pool: ratio}), ...)
    batch_size: int = 6
    trainable_prefixes: tuple | None = None   # None = everything not frozen
    frozen_prefixes: tuple = (AE_PREFIX,)
    warmup_steps: int = 0
    lam: float = 1.0
    cfg_drop: float = 0.1
    audit_every: int = 50

    def ratios_at(self, step: int) -> dict[str, int]:
        if not self.mix_phases:
            raise ValueError(f"stage {self.name} has no mix phases")
        start = 0.0
        for frac, ratios in self.mix_phases:
            if step < round((start + frac) * self.steps) or (start + frac) >= 1.0:
                return ratios
            start += frac
        return self.mix_phases[-1][1]

    def phase_start(self, step: int) -> int:
        start = 0.0
        for frac, ratios in self.mix_phases:
            end = round((start + frac) * self.steps)
            if step < end or (start + frac) >= 1.0:
                return round(start * self.steps)
            start += frac
        return round(start * self.steps)


DEFAULT_STEPS = {
    "alignment": 200,
    "pt": 3000,
    "sft": 3000,
    "qt": 1000,
    "et": 500,
    "rt": 500,
}


def default_curriculum(steps: dict[str, int] | None = None,
                       batch_size: int = 6) -> list[StageConfig]:
    """The six-stage schedule. Step counts live in config, not code."""
    n = {**DEFAULT_STEPS, **(steps or {})}
    frozen_main = (AE_PREFIX, STEM_PREFIX, ROUTER_PREFIX)
    return [
        StageConfig("alignment", n["alignment"], 1e-3, "cosine",
                    mix_phases=((1.0, {"caption": 1}),),
                    trainable_prefixes=("und_branch/adapter",),
                    batch_size=batch_size),
        StageConfig("pt", n["pt"], 1e-4, "constant",
                    mix_phases=((1.0, {"und": 1, "t2i": 1}),),
                    frozen_prefixes=frozen_main, batch_size=batch_size),
        StageConfig("sft", n["sft"], 0.4e-4, "constant",
                    mix_phases=((0.5, {"und": 1, "t2i": 1}),
                                (0.5, {"und": 1, "t2i": 1, "edit": 1})),
                    frozen_prefixes=frozen_main, batch_size=batch_size),
        StageConfig("qt", n["qt"], 1e-5, "cosine",
                    mix_phases=((1.0, {"und": 1, "t2i": 1, "edit": 1}),),
                    frozen_prefixes=frozen_main, batch_size=batch_size),
        StageConfig("et", n["et"], 0.04e-4, "cosine",
                    mix_phases=((1.0, {"stem_und": 1}),),
                    trainable_prefixes=(STEM_PREFIX,), batch_size=batch_size),
        StageConfig("rt", n["rt"], 1e-4, "constant",
                    mix_phases=((1.0, {"router": 1}),),
                    trainable_prefixes=(ROUTER_PREFIX,), batch_size=16),
    ]


def select_trainable(params: dict, stage: StageConfig) -> dict:
    out = {}
    for name, p in params.items():
        if any(name.startswith(pre) for pre in stage.frozen_prefixes):
            continue
        if stage.trainable_prefixes is not None and not any(
            name.startswith(pre) for pre in stage.trainable_prefixes
        ):
            continue
        out[name] = p
    if not out:
        raise ValueError(f"stage {stage.name} has no trainable parameters")
    return out


def _pattern(ratios: dict[str, int]) -> list[str]:
    pat = []
    for task, r in ratios.items():
        if r < 0:
            raise ValueError("ratios must be nonnegative")
        pat += [task] * r
    if not pat:
        raise ValueError("all ratios zero")
    return pat


def balanced_sampler(pools: dict[str, list], ratios: dict[str, int], offset: int = 0):
    """Deterministic round-robin: an infinite stream of (task, record).

    Draw d takes pattern[d % len], stepping through that task's pool
    cyclically; exact long-run ratios by construction. ``offset`` skips the
    first draws so a resumed run continues the same stream.
    """
    pattern = _pattern(ratios)
    for task, r in ratios.items():
        if r > 0 and not pools.get(task):
            raise ValueError(f"task '{task}' has ratio {r} but an empty pool")
    d = offset
    while True:
        task = pattern[d % len(pattern)]
        occurrences_per_cycle = sum(1 for t in pattern if t == task)
        full, rem = divmod(d, len(pattern))
        count = full * occurrences_per_cycle + sum(1 for t in pattern[:rem] if t == task)
        pool = pools[task]
        yield task, pool[count % len(pool)]
        d += 1


def stage_pools(corpus: Corpus, stage: StageConfig) -> dict[str, list]:
    """Resolve pool names to manifest records. The generic 'und' pool mixes
    QA and captioning records."""
    pools: dict[str, list] = {}
    needed = set()
    for _, ratios in stage.mix_phases:
        needed |= set(ratios)
    for name in needed:
        if name == "und":
            pools[name] = corpus.pool("und") + corpus.pool("caption")
        else:
            pools[name] = corpus.pool(name)
    return pools


def slot_rng(seed: int, stage_name: str, step: int, slot: int) -> np.random.Generator:
    idx = STAGE_ORDER.index(stage_name) if stage_name in STAGE_ORDER else 97
    return np.random.default_rng(np.random.SeedSequence((seed, idx, step, slot)))


def run_stage(
    model: TinyUMM,
    stage: StageConfig,
    corpus: Corpus,
    seed: int = 0,
    log_path: str | Path | None = None,
    start_step: int = 0,
    optim_arrays: tuple | None = None,   # (arrays, meta) to restore optimizer
    save_at: dict | None = None,         # {step: path} mid-stage checkpoints
    on_step=None,
) -> AdamW:
    """Train one stage. Frozen parameters are checksum-audited every
    ``stage.audit_every`` steps; any drift is a fatal routing bug."""
    params = model.params()
    trainable = select_trainable(params, stage)
    frozen_names = [n for n in params if n not in trainable]
    opt = AdamW(trainable, lr=stage.base_lr)
    if optim_arrays is not None:
        restore_optim(opt, optim_arrays[0], optim_arrays[1])
    pools = stage_pools(corpus, stage)
    frozen_sum = params_checksum(params, frozen_names)
    log_f = open(log_path, "a") if log_path else None

    def audit(step):
        now = params_checksum(params, frozen_names)
        if now != frozen_sum:
            raise RuntimeError(
                f"frozen parameters drifted during stage {stage.name} at step {step}"
            )

    try:
        for step in range(start_step, stage.steps):
            ratios = stage.ratios_at(step)
            phase_start = stage.phase_start(step)
            offset = (step - phase_start) * stage.batch_size
            stream = balanced_sampler(pools, ratios, offset=offset)
            batch = []
            for slot in range(stage.batch_size):
                task, record = next(stream)
                task = record["task"]  # 'und' pool mixes two record kinds
                batch.append((task, record, slot_rng(seed, stage.name, step, slot)))
            opt.lr = lr_at(step, stage.steps, stage.base_lr, stage.schedule,
                           stage.warmup_steps)
            opt.zero_grad()
            report = joint_step(model, batch, corpus.image, lam=stage.lam,
                                cfg_drop=stage.cfg_drop,
                                sample_scale=1.0 / stage.batch_size)
            opt.step()
            if log_f:
                log_f.write(json.dumps({
                    "stage": stage.name, "step": step, "lr": opt.lr,
                    "ntp_loss": round(report.ntp_loss, 8),
                    "flow_loss": round(report.flow_loss, 8),
                    "router_loss": round(report.router_loss, 8),
                }, sort_keys=True) + "\n")
            if on_step is not None:
                on_step(step, report)
            if (step + 1) % stage.audit_every == 0:
                audit(step)
            if save_at and (step + 1) in save_at:
                model.save(save_at[step + 1], optim_state=opt.state_dict(),
                           meta={"stage": stage.name, "next_step": step + 1})
        audit(stage.steps)
    finally:
        if log_f:
            log_f.close()
    return opt


AE_FRESH_CAP = 6000
_AE_DATA_TAG = 5 ** 9


def ae_training_images(corpus: Corpus, seed: int, steps: int) -> list[np.ndarray]:
    """Stage the autoencoder pretraining set, quantized to uint8.

    The tail is the corpus imagery generation touches (t2i targets plus both
    sides of each editing pair), so the held-out last tenth measures
    reconstruction of the corpus proper. Ahead of it go freshly rendered
    scenes from the same family, scaled with the step budget: the corpus is
    procedural, extra data costs nothing, and a wide pool forces
    reconstruction to generalize instead of memorizing."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, _AE_DATA_TAG)))
    images = []
    for i in range(min(AE_FRESH_CAP, 2 * steps)):
        stem = bool(rng.uniform() < 0.125)  # roughly the corpus stem share
        spec = random_spec(rng, size=RESOLUTION_BUCKETS[i % len(RESOLUTION_BUCKETS)],
                           stem=stem)
        images.append(((render_scene(spec) + 1.0) * 127.5).round().astype(np.uint8))
    for r in corpus.pool("t2i"):
        images.append(corpus.image_u8(r["image"]))
    for r in corpus.pool("edit"):
        images.append(corpus.image_u8(r["source_image"]))
        images.append(corpus.image_u8(r["target_image"]))
    return images


def run_curriculum(
    model: TinyUMM,
    corpus: Corpus,
    out_dir: str | Path,
    seed: int = 0,
    stages: list[StageConfig] | None = None,
    ae_steps: int = 1500,
    progress=None,
) -> dict:
    """AE pretraining followed by the six stages; saves one checkpoint per
    stage under out_dir and appends to out_dir/log.jsonl."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "log.jsonl"
    stages = stages if stages is not None else default_curriculum()
    summary: dict = {}

    if not model.ae.frozen:
        ae_report = pretrain_autoencoder(model.ae, ae_training_images(corpus, seed, ae_steps),
                                         steps=ae_steps, seed=seed)
        model.latent_scale = latent_channel_scale(model.ae, [
            corpus.image(r["image"]) for r in corpus.pool("t2i")[:64]])
        summary["ae"] = ae_report
        with open(log_path, "a") as f:
            f.write(json.dumps({"stage": "ae_pretrain", **{
                k: round(v, 6) for k, v in ae_report.items()}}, sort_keys=True) + "\n")
        if progress:
            progress(f"ae_pretrain done: psnr={ae_report['holdout_psnr']:.2f} dB")

    for stage in stages:
        if stage.name in model.stages_completed:
            continue
        if stage.name == "et" and model.moe.stem is None:
            model.moe.init_stem_expert()
        run_stage(model, stage, corpus, seed=seed, log_path=log_path)
        if stage.name == "rt":
            model.moe.router_trained = True
        model.stages_completed.append(stage.name)
        model.save(out_dir / f"ckpt_{stage.name}",
                   meta={"stage": stage.name, "next_step": stage.steps})
        if progress:
            progress(f"stage {stage.name} done")
    return summary
