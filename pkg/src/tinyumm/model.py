"""Full model assembly: encoders, fusion adapters, core stack, output heads.

Parameter names carry an auditable section prefix:
    shared/      token embedding + shared weights of the shallow core layers
    und_branch/  understanding-side: value projections and deep layers for
                 the und branch, the fused-visual adapter, the language head,
                 the expert encoders and the router
    gen_branch/  generation-side: value projections and deep layers for the
                 gen branch, the latent adapter, time conditioning, the
                 velocity head, and the (frozen) autoencoder
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, restore_params, save_checkpoint
from .core import (
    GEN,
    TEXT,
    UND,
    VIS_CLEAN,
    VIS_NOISY,
    BranchedLayerStack,
    Segment,
    UnifiedSequence,
    build_sequence,
)
from .encoders import GenAEConfig, GenAutoencoder, UndEncoderConfig
from .fusion import add_2d_posenc, channel_concat
from .layers import Linear, RMSNorm, sinusoid_features
from .moe import ExpertSet
from .tensor import Tensor

EOS = 0
TIME_FREQ_SCALE = 1000.0  # flow time t in [0,1] stretched for sinusoid coverage


def encode_text(s: str) -> np.ndarray:
    """Byte-level tokenizer: utf-8 bytes are the token ids, 0 is EOS."""
    ids = np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.intp)
    if (ids == EOS).any():
        raise ValueError("text must not contain NUL bytes")
    return ids


def decode_bytes(ids) -> str:
    out = bytes(int(i) for i in ids if i != EOS)
    return out.decode("utf-8", errors="replace")


@dataclass
class ModelConfig:
    d_model: int = 128
    heads: int = 4
    n_shared: int = 4
    n_decoupled: int = 4
    ffn_mult: int = 2
    vocab: int = 256
    und: UndEncoderConfig = field(default_factory=UndEncoderConfig)
    ae: GenAEConfig = field(default_factory=GenAEConfig)

    def __post_init__(self):
        if self.d_model % 4:
            raise ValueError("d_model must be divisible by 4 (2D position encoding)")
        if self.d_model % self.heads:
            raise ValueError("d_model must divide evenly into heads")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["und"] = UndEncoderConfig(**d["und"])
        ae = dict(d["ae"])
        ae["enc_channels"] = tuple(ae["enc_channels"])
        ae["dec_channels"] = tuple(ae["dec_channels"])
        d["ae"] = GenAEConfig(**ae)
        return cls(**d)


def _section(branch: str, name: str) -> str:
    if branch == "shared":
        return f"shared/{name}"
    return f"{'und_branch' if branch == UND else 'gen_branch'}/{name}"


class TinyUMM:
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        d = self.cfg.d_model
        self.tok_emb = T.param(rng.normal(0.0, 0.02, size=(self.cfg.vocab, d)))
        self.moe = ExpertSet(self.cfg.und, rng)
        self.ae = GenAutoencoder(self.cfg.ae, rng)
        self.latent_scale = np.ones(self.cfg.ae.latent_channels)
        c_fused = self.cfg.und.out_channels + self.cfg.ae.latent_channels
        self.und_adapter = Linear(rng, c_fused, d)
        self.und_adapter_norm = RMSNorm(d)
        self.gen_adapter = Linear(rng, self.cfg.ae.latent_channels, d)
        self.gen_adapter_norm = RMSNorm(d)
        self.time_proj = Linear(rng, d, d)
        self.core = BranchedLayerStack(rng, d, self.cfg.heads, self.cfg.n_shared,
                                       self.cfg.n_decoupled, self.cfg.ffn_mult)
        self.und_final = RMSNorm(d)
        self.lm_head = Linear(rng, d, self.cfg.vocab)
        self.gen_final = RMSNorm(d)
        self.v_head = Linear(rng, d, self.cfg.ae.latent_channels)
        self.stages_completed: list[str] = []

    # -- parameters ---------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out = {"shared/tok_emb.w": self.tok_emb}
        out.update(self.core.params(_section))
        out.update(self.moe.params("und_branch/enc"))
        out.update(self.und_adapter.params("und_branch/adapter"))
        out.update(self.und_adapter_norm.params("und_branch/adapter_norm"))
        out.update(self.lm_head.params("und_branch/lm_head"))
        out.update(self.und_final.params("und_branch/final_norm"))
        out.update(self.gen_adapter.params("gen_branch/adapter"))
        out.update(self.gen_adapter_norm.params("gen_branch/adapter_norm"))
        out.update(self.time_proj.params("gen_branch/time_proj"))
        out.update(self.v_head.params("gen_branch/v_head"))
        out.update(self.gen_final.params("gen_branch/final_norm"))
        out.update(self.ae.params("gen_branch/ae"))
        return out

    # -- token streams --------------------------------------------------------

    def embed_text(self, ids: np.ndarray) -> Segment:
        return Segment(TEXT, UND, T.embedding(self.tok_emb, ids), token_ids=ids)

    def latent_tokens(self, image: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
        """Frozen-AE latents scaled to ~unit variance, flattened row-major to
        (N, C_gen). Generation's clean data distribution."""
        with T.no_grad():
            z = self.ae.encode(Tensor(image)).data
        z = z * self.latent_scale[:, None, None]
        c, h, w = z.shape
        return z.reshape(c, h * w).T.copy(), (h, w)

    def und_visual_segment(self, image: np.ndarray, force_expert: str | None = None) -> Segment:
        """Fused [und | gen] tokens, adapted to model width, 2D pos-encoded."""
        img = Tensor(image)
        und_tokens, grid = self.moe.moe_encode(img, force_expert=force_expert)
        gen_np, grid_g = self.latent_tokens(image)
        if grid != grid_g:
            raise ValueError(f"encoder grids disagree: {grid} vs {grid_g}")
        fused = channel_concat(und_tokens, Tensor(gen_np), grid)
        x = self.und_adapter_norm(self.und_adapter(fused))
        return Segment(VIS_CLEAN, UND, add_2d_posenc(x, grid), grid=grid)

    def gen_visual_segment(self, xt: Tensor, grid: tuple[int, int], t: float) -> Segment:
        """Noisy latent tokens entering the gen branch, conditioned on flow
        time via an added sinusoidal embedding."""
        x = self.gen_adapter_norm(self.gen_adapter(xt))
        x = add_2d_posenc(x, grid)
        t_feat = Tensor(sinusoid_features([t * TIME_FREQ_SCALE], self.cfg.d_model))
        return Segment(VIS_NOISY, GEN, T.add(x, self.time_proj(t_feat)), grid=grid)

    # -- heads ----------------------------------------------------------------

    def lm_logits(self, hidden: Tensor, rows: np.ndarray) -> Tensor:
        return self.lm_head(self.und_final(T.index_rows(hidden, rows)))

    def velocity_out(self, hidden: Tensor, rows: np.ndarray) -> Tensor:
        return self.v_head(self.gen_final(T.index_rows(hidden, rows)))

    # -- task forwards ----------------------------------------------------------

    def und_sequence(self, question_ids: np.ndarray, image: np.ndarray | None,
                     answer_ids: np.ndarray | None = None,
                     force_expert: str | None = None) -> UnifiedSequence:
        text_segs = [self.embed_text(question_ids)]
        if answer_ids is not None and len(answer_ids):
            text_segs.append(self.embed_text(answer_ids))
        vis = [self.und_visual_segment(image, force_expert)] if image is not None else []
        return build_sequence("und", text_segs, vis)

    def gen_sequence(self, task: str, text_ids: np.ndarray | None,
                     xt: Tensor, grid: tuple[int, int], t: float,
                     reference: np.ndarray | None = None) -> UnifiedSequence:
        text_segs = [self.embed_text(text_ids)] if text_ids is not None and len(text_ids) else []
        vis = []
        if reference is not None:
            vis.append(self.und_visual_segment(reference))
        vis.append(self.gen_visual_segment(xt, grid, t))
        return build_sequence(task, text_segs, vis)

    # -- persistence --------------------------------------------------------------

    def save(self, path: str | Path, optim_state: dict | None = None,
             meta: dict | None = None) -> None:
        m = {
            "config": self.cfg.to_json(),
            "ae_frozen": self.ae.frozen,
            "has_stem": self.moe.stem is not None,
            "router_trained": self.moe.router_trained,
            "stages_completed": list(self.stages_completed),
            "fusion_order": ["und", "gen"],
        }
        if meta:
            m.update(meta)
        save_checkpoint(path, self.params(), meta=m, optim_state=optim_state,
                        extra_arrays={"latent_scale": self.latent_scale})

    @classmethod
    def load(cls, path: str | Path) -> tuple["TinyUMM", dict[str, np.ndarray], dict]:
        arrays, meta = load_checkpoint(path)
        model = cls(ModelConfig.from_json(meta["config"]))
        if meta.get("has_stem"):
            model.moe.init_stem_expert()
        restore_params(model.params(), arrays)
        model.latent_scale = arrays["extra/latent_scale"].copy()
        model.ae.frozen = bool(meta.get("ae_frozen", False))
        model.moe.router_trained = bool(meta.get("router_trained", False))
        model.stages_completed = list(meta.get("stages_completed", []))
        return model, arrays, meta


def config_digest(cfg: ModelConfig) -> str:
    return json.dumps(cfg.to_json(), sort_keys=True)
