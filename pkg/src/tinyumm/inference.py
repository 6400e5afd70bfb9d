"""Inference: greedy text decoding, flow-ODE image sampling, image editing.

Sampling integrates dx/dt = v(x, t, condition) with fixed-step Euler from
t=0 (noise) to t=1 (data). Guidance blends conditional and unconditional
velocities; at scale 1.0 the unconditional pass is skipped entirely so the
trajectory is bit-identical to the purely conditional one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .fusion import token_budget
from .model import EOS, TinyUMM, decode_bytes, encode_text
from .tensor import Tensor
from .toybench.corpus import save_png
from .toybench.scenes import nearest_bucket


@dataclass
class SamplerConfig:
    steps: int = 32
    cfg_scale: float = 1.0
    seed: int = 0
    resolution: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"sampler needs steps >= 1, got {self.steps}")
        h, w = self.resolution
        if h % 32 or w % 32:
            raise ValueError(f"resolution must be divisible by 32, got {h}x{w}")


def euler_integrate(x0: np.ndarray, velocity_fn, steps: int) -> np.ndarray:
    """x(1) from x(0) under dx/dt = velocity_fn(x, t), uniform steps.

    Exact for constant fields at any step count, since the update telescopes.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x = np.array(x0, dtype=np.float64)
    dt = 1.0 / steps
    for k in range(steps):
        x = x + dt * velocity_fn(x, k * dt)
    return x


def _model_velocity(model: TinyUMM, task: str, text_ids: np.ndarray | None,
                    grid: tuple[int, int], reference: np.ndarray | None):
    def v(x: np.ndarray, t: float) -> np.ndarray:
        with T.no_grad():
            seq = model.gen_sequence(task, text_ids, Tensor(x), grid, t,
                                     reference=reference)
            hidden = model.core(seq)
            return model.velocity_out(hidden, seq.rows("gen")).data
    return v


def _guided_velocity(model: TinyUMM, task: str, text_ids: np.ndarray,
                     grid, cfg_scale: float, reference=None):
    v_cond = _model_velocity(model, task, text_ids, grid, reference)
    if cfg_scale == 1.0:
        return v_cond
    v_uncond = _model_velocity(model, task, None, grid, reference)

    def v(x, t):
        u = v_uncond(x, t)
        return u + cfg_scale * (v_cond(x, t) - u)
    return v


def _latents_to_image(model: TinyUMM, x: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    h, w = grid
    z = x.T.reshape(model.cfg.ae.latent_channels, h, w) / model.latent_scale[:, None, None]
    with T.no_grad():
        return model.ae.decode(Tensor(z)).data


def sample_image(model: TinyUMM, prompt: str, cfg: SamplerConfig | None = None) -> np.ndarray:
    """Text-to-image: integrate the learned flow from seeded noise."""
    cfg = cfg or SamplerConfig()
    h, w = cfg.resolution
    grid = (h // 32, w // 32)
    n = grid[0] * grid[1]
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2 ** 31)))
    x0 = rng.standard_normal((n, model.cfg.ae.latent_channels))
    text_ids = encode_text(prompt) if prompt else None
    v = _guided_velocity(model, "t2i", text_ids, grid, cfg.cfg_scale)
    x1 = euler_integrate(x0, v, cfg.steps)
    return _latents_to_image(model, x1, grid)


def edit_image(model: TinyUMM, reference: np.ndarray, instruction: str,
               cfg: SamplerConfig | None = None) -> np.ndarray:
    """Instruction-guided editing: the clean reference enters once as fused
    und-branch tokens; only the target grid is noised and integrated."""
    if not instruction:
        raise ValueError("editing requires a non-empty instruction")
    cfg = cfg or SamplerConfig()
    rh, rw = reference.shape[1:]
    bh, bw = nearest_bucket(rh, rw)
    if (rh, rw) != (bh, bw):
        with T.no_grad():
            reference = T.bilinear_resize(Tensor(reference), bh, bw).data
    cfg = SamplerConfig(cfg.steps, cfg.cfg_scale, cfg.seed, (bh, bw))
    grid = (bh // 32, bw // 32)
    n = grid[0] * grid[1]
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2 ** 31)))
    x0 = rng.standard_normal((n, model.cfg.ae.latent_channels))
    v = _guided_velocity(model, "edit", encode_text(instruction), grid,
                         cfg.cfg_scale, reference=reference)
    x1 = euler_integrate(x0, v, cfg.steps)
    return _latents_to_image(model, x1, grid)


def decode_text(model: TinyUMM, prompt: str, image: np.ndarray | None = None,
                max_tokens: int = 32, temperature: float = 0.0,
                seed: int = 0) -> str:
    """Autoregressive answer decoding; greedy at temperature 0, stops at EOS."""
    if not prompt:
        raise ValueError("prompt must be non-empty")
    q_ids = encode_text(prompt)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 3 ** 20)))
    out: list[int] = []
    with T.no_grad():
        for _ in range(max_tokens):
            a_ids = np.array(out, dtype=np.intp)
            seq = model.und_sequence(q_ids, image, a_ids)
            hidden = model.core(seq)
            logits = model.lm_logits(hidden, np.array([len(seq) - 1])).data[0]
            if temperature <= 0.0:
                nxt = int(logits.argmax())
            else:
                z = (logits - logits.max()) / temperature
                p = np.exp(z)
                p /= p.sum()
                nxt = int(rng.choice(len(p), p=p))
            if nxt == EOS:
                break
            out.append(nxt)
    return decode_bytes(out)


def write_image_outputs(path: str | Path, image: np.ndarray, task: str,
                        cfg: SamplerConfig, prompt: str) -> dict:
    """PNG plus a JSON sidecar recording how the image was produced."""
    path = Path(path)
    save_png(path, image)
    h, w = cfg.resolution
    sidecar = {
        "task": task,
        "prompt": prompt,
        "seed": cfg.seed,
        "steps": cfg.steps,
        "cfg_scale": cfg.cfg_scale,
        "resolution": [h, w],
        "token_budget": token_budget(task if task in ("t2i", "edit") else "t2i", (h, w)),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return sidecar
