"""Training objectives: next-token prediction and rectified-flow matching.

Flow convention: linear interpolant xt = (1-t) x0 + t x1 from noise x0 to
data x1, regression target v = x1 - x0, t uniform on [0, 1). Text prompts are
dropped with a small probability during generation training so the sampler
can apply classifier-free guidance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import EOS, TinyUMM, encode_text
from .tensor import Tensor


@dataclass
class FlowSample:
    x1: np.ndarray
    x0: np.ndarray
    t: float
    xt: np.ndarray
    v_target: np.ndarray


@dataclass
class LossBreakdown:
    ntp_loss: float = 0.0
    flow_loss: float = 0.0
    router_loss: float = 0.0
    ntp_tokens: int = 0
    flow_tokens: int = 0
    router_samples: int = 0


def ntp_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean cross-entropy over the masked target positions."""
    return T.cross_entropy_logits(logits, targets, mask)


def make_flow_sample(x1: np.ndarray, rng: np.random.Generator,
                     t: float | None = None) -> FlowSample:
    x1 = np.asarray(x1, dtype=np.float64)
    if not np.isfinite(x1).all():
        raise ValueError("flow target contains non-finite values")
    if t is None:
        t = float(rng.uniform())
    x0 = rng.standard_normal(x1.shape)
    xt = (1.0 - t) * x0 + t * x1
    return FlowSample(x1=x1, x0=x0, t=t, xt=xt, v_target=x1 - x0)


def flow_loss(v_pred: Tensor, v_target: np.ndarray | Tensor) -> Tensor:
    tgt = v_target if isinstance(v_target, Tensor) else Tensor(v_target)
    return T.mse(v_pred, tgt)


def _und_loss(model: TinyUMM, sample: dict, image: np.ndarray,
              force_expert: str | None = None) -> tuple[Tensor, int]:
    q_ids = encode_text(sample["question"])
    a_ids = np.append(encode_text(sample["answer"]), EOS)
    seq = model.und_sequence(q_ids, image, a_ids, force_expert=force_expert)
    hidden = model.core(seq)
    n = len(seq)
    na = len(a_ids)
    # logits at position i predict token i+1; answer tokens occupy the tail
    pred_rows = np.arange(n - na - 1, n - 1)
    logits = model.lm_logits(hidden, pred_rows)
    return ntp_loss(logits, a_ids, np.ones(na, dtype=bool)), na


def _gen_loss(model: TinyUMM, task: str, text: str, target_image: np.ndarray,
              rng: np.random.Generator, cfg_drop: float,
              reference: np.ndarray | None = None) -> tuple[Tensor, int]:
    x1, grid = model.latent_tokens(target_image)
    fs = make_flow_sample(x1, rng)
    drop = bool(rng.uniform() < cfg_drop)
    text_ids = None if drop else encode_text(text)
    seq = model.gen_sequence(task, text_ids, Tensor(fs.xt), grid, fs.t,
                             reference=reference)
    hidden = model.core(seq)
    v_pred = model.velocity_out(hidden, seq.rows("gen"))
    return flow_loss(v_pred, fs.v_target), x1.size


def _router_loss(model: TinyUMM, image: np.ndarray, label: int) -> Tensor:
    logits = model.moe.router.logits(Tensor(image))
    return T.cross_entropy_logits(logits, np.array([label]), np.ones(1, dtype=bool))


def sample_loss(model: TinyUMM, task: str, sample: dict, image_of,
                rng: np.random.Generator, cfg_drop: float = 0.1) -> tuple[Tensor, str]:
    """Loss Tensor for one manifest record plus which bucket it reports to.

    ``image_of`` maps a manifest path to its array (the corpus loader).
    """
    if task in ("und", "caption"):
        loss, _ = _und_loss(model, sample, image_of(sample["image"]))
        return loss, "ntp"
    if task == "stem_und":
        loss, _ = _und_loss(model, sample, image_of(sample["image"]), force_expert="stem")
        return loss, "ntp"
    if task == "t2i":
        loss, _ = _gen_loss(model, "t2i", sample["caption"],
                            image_of(sample["image"]), rng, cfg_drop)
        return loss, "flow"
    if task == "edit":
        loss, _ = _gen_loss(model, "edit", sample["instruction"],
                            image_of(sample["target_image"]), rng, cfg_drop,
                            reference=image_of(sample["source_image"]))
        return loss, "flow"
    if task == "router":
        return _router_loss(model, image_of(sample["image"]), sample["label"]), "router"
    raise ValueError(f"unknown task '{task}'")


def joint_step(model: TinyUMM, batch: list[tuple[str, dict, np.random.Generator]],
               image_of, lam: float = 1.0, cfg_drop: float = 0.1,
               sample_scale: float = 1.0) -> LossBreakdown:
    """Accumulate gradients of sum_i scale * (ntp_i + lam * flow_i) over a
    mixed batch with ONE backward pass. Returns per-objective mean losses.

    Gradients are linear in the samples, so the result over a mixed batch
    equals the sum of per-task accumulations at the same scale.
    """
    if not batch:
        raise ValueError("empty batch")
    report = LossBreakdown()
    terms: list[Tensor] = []
    for task, sample, rng in batch:
        loss, bucket = sample_loss(model, task, sample, image_of, rng, cfg_drop)
        if bucket == "ntp":
            report.ntp_loss += loss.item()
            report.ntp_tokens += 1
            terms.append(T.scale(loss, sample_scale))
        elif bucket == "flow":
            report.flow_loss += loss.item()
            report.flow_tokens += 1
            terms.append(T.scale(loss, lam * sample_scale))
        else:
            report.router_loss += loss.item()
            report.router_samples += 1
            terms.append(T.scale(loss, sample_scale))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    total.backward()
    if report.ntp_tokens:
        report.ntp_loss /= report.ntp_tokens
    if report.flow_tokens:
        report.flow_loss /= report.flow_tokens
    if report.router_samples:
        report.router_loss /= report.router_samples
    return report
