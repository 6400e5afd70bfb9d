"""Two-expert mixture over the understanding encoder, with an image router.

The versatile expert handles everything by default. A second trunk for
technical imagery (grid-paper texture in the toy corpus) is cloned from the
versatile expert late in the curriculum and trained alone; a small raw-pixel
classifier then learns to route. Hard argmax routing, ties go to versatile.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import UndEncoder, UndEncoderConfig
from .layers import Conv, Linear, collect_params
from .tensor import Tensor

VERSATILE, STEM = "versatile", "stem"


@dataclass(frozen=True)
class RouteDecision:
    expert_id: str
    confidence: float


class Router:
    """Shallow conv features, global mean pool, 2-way linear head."""

    def __init__(self, rng: np.random.Generator, hidden: int = 8):
        self.conv1 = Conv(rng, 3, hidden, k=3, stride=2, padding=1)
        self.conv2 = Conv(rng, hidden, hidden, k=3, stride=2, padding=1)
        self.head = Linear(rng, hidden, 2)

    def logits(self, image: Tensor) -> Tensor:
        c, h, w = image.shape
        x = T.silu(self.conv1(T.reshape(image, (1, c, h, w))))
        x = T.silu(self.conv2(x))
        pooled = T.tmean(T.reshape(x, (x.shape[1], x.shape[2] * x.shape[3])), axis=1)
        return self.head(T.reshape(pooled, (1, x.shape[1])))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return collect_params({
            f"{prefix}.conv1": self.conv1,
            f"{prefix}.conv2": self.conv2,
            f"{prefix}.head": self.head,
        })


class ExpertSet:
    def __init__(self, cfg: UndEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.versatile = UndEncoder(cfg, rng)
        self.stem: UndEncoder | None = None
        self.router = Router(rng)
        self.router_trained = False

    def init_stem_expert(self) -> None:
        """Clone the versatile trunk as the technical-imagery expert."""
        if self.versatile is None:
            raise RuntimeError("cannot initialize stem expert before versatile exists")
        clone = UndEncoder(self.cfg, np.random.default_rng(0))
        src = self.versatile.params("e")
        dst = clone.params("e")
        for name, p in dst.items():
            p.data[...] = src[name].data
        self.stem = clone

    def route(self, image: np.ndarray) -> RouteDecision:
        """Pure function of the image. Untrained router always answers
        versatile at full confidence; a tie at exactly 0.5 also goes
        versatile."""
        if not self.router_trained or self.stem is None:
            return RouteDecision(VERSATILE, 1.0)
        with T.no_grad():
            z = self.router.logits(Tensor(image)).data[0]
        e = np.exp(z - z.max())
        p_stem = float(e[1] / e.sum())
        if p_stem > 0.5:
            return RouteDecision(STEM, p_stem)
        return RouteDecision(VERSATILE, 1.0 - p_stem)

    def expert(self, name: str) -> UndEncoder:
        if name == VERSATILE:
            return self.versatile
        if name == STEM:
            if self.stem is None:
                raise ValueError("stem expert not initialized")
            return self.stem
        raise ValueError(f"unknown expert '{name}'")

    def moe_encode(self, image: Tensor, force_expert: str | None = None):
        """und_encode with the routed (or forced) expert's weights."""
        which = force_expert or self.route(image.data).expert_id
        return self.expert(which)(image)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.versatile.params(f"{prefix}.versatile")
        if self.stem is not None:
            out.update(self.stem.params(f"{prefix}.stem"))
        out.update(self.router.params(f"{prefix}.router"))
        return out
