"""AdamW optimizer and learning-rate schedules.

Weight decay is decoupled: applied directly to the parameter, never mixed
into the Adam moment estimates. Frozen parameters are simply absent from the
optimizer's parameter dict, so they accumulate no state and never move.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class GradientError(RuntimeError):
    """Raised when a gradient contains NaN or Inf, naming the parameter."""


class AdamW:
    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        clip_norm: float | None = None,
    ):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _gather_grads(self) -> dict[str, np.ndarray]:
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise GradientError(f"non-finite gradient in parameter '{name}'")
            grads[name] = g
        return grads

    def step(self) -> None:
        """One update. Parameters with ``grad is None`` see a zero gradient,
        which still advances their moment decay and applies weight decay."""
        grads = self._gather_grads()
        if self.clip_norm is not None:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.clip_norm:
                s = self.clip_norm / (total + 1e-12)
                grads = {k: g * s for k, g in grads.items()}
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    # -- state io, for exact training resume ---------------------------------

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "lr": self.lr,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        for k in self.params:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]


def lr_at(
    step: int,
    total_steps: int,
    base_lr: float,
    schedule: str = "constant",
    warmup_steps: int = 0,
) -> float:
    """Learning rate for 0-indexed ``step`` of ``total_steps``.

    ``constant`` holds base_lr; ``cosine`` decays from base_lr to a floor of
    base_lr / 100 over the post-warmup steps. Warmup ramps linearly from 0.
    """
    if schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown schedule '{schedule}'")
    if warmup_steps > total_steps:
        raise ValueError(
            f"warmup_steps ({warmup_steps}) exceeds total_steps ({total_steps})"
        )
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if schedule == "constant":
        return base_lr
    floor = base_lr / 100.0
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0), span) / span
    return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
