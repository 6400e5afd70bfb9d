"""The two visual encoders.

Both reduce an image's spatial extent by 32x, so their token grids align
position for position and can be fused channel-wise downstream:

  understanding encoder: 16-pixel patches -> transformer -> 2x2 token merge
      (factor 16 * 2 = 32), semantic features, C_und = width * 4 channels
  generation encoder:    five stride-2 convolutions (2^5 = 32), a compact
      reconstruction latent of C_gen channels, trained once as an
      autoencoder and frozen for the rest of the curriculum

Images are float arrays shaped (3, H, W) with values in [-1, 1].
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv, FeedForward, Linear, RMSNorm, attention, collect_params
from .optim import AdamW, lr_at
from .tensor import Tensor

REDUCTION = 32


@dataclass
class UndEncoderConfig:
    patch_size: int = 16
    shuffle_factor: int = 2
    depth: int = 4
    width: int = 128
    heads: int = 4
    base_grid: int = 4  # learned-position grid side at the training resolution
    ffn_mult: int = 2

    @property
    def reduction(self) -> int:
        return self.patch_size * self.shuffle_factor

    @property
    def out_channels(self) -> int:
        return self.width * self.shuffle_factor ** 2

    def __post_init__(self):
        if self.reduction != REDUCTION:
            raise ValueError(
                f"patch_size*shuffle_factor must be {REDUCTION}, got {self.reduction}"
            )
        if self.width % self.heads:
            raise ValueError("width must divide evenly into heads")


def check_dims(h: int, w: int) -> None:
    if h % REDUCTION or w % REDUCTION:
        raise ValueError(
            f"image dims must be multiples of {REDUCTION}, got {h}x{w}"
        )


class EncoderBlock:
    """Pre-norm transformer block with full bidirectional attention."""

    def __init__(self, rng, width: int, heads: int, ffn_mult: int):
        self.heads = heads
        self.norm1 = RMSNorm(width)
        self.wq = Linear(rng, width, width)
        self.wk = Linear(rng, width, width)
        self.wv = Linear(rng, width, width)
        self.wo = Linear(rng, width, width)
        self.norm2 = RMSNorm(width)
        self.ffn = FeedForward(rng, width, width * ffn_mult)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = T.add(x, self.wo(attention(self.wq(h), self.wk(h), self.wv(h), self.heads)))
        return T.add(x, self.ffn(self.norm2(x)))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return collect_params({
            f"{prefix}.norm1": self.norm1,
            f"{prefix}.wq": self.wq,
            f"{prefix}.wk": self.wk,
            f"{prefix}.wv": self.wv,
            f"{prefix}.wo": self.wo,
            f"{prefix}.norm2": self.norm2,
            f"{prefix}.ffn": self.ffn,
        })


class UndEncoder:
    """Semantic visual encoder: patchify, attend, merge 2x2 token neighborhoods."""

    def __init__(self, cfg: UndEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        p = cfg.patch_size
        self.proj = Linear(rng, 3 * p * p, cfg.width)
        self.pos = T.param(rng.normal(0.0, 0.02, size=(cfg.width, cfg.base_grid, cfg.base_grid)))
        self.blocks = [EncoderBlock(rng, cfg.width, cfg.heads, cfg.ffn_mult)
                       for _ in range(cfg.depth)]
        self.norm = RMSNorm(cfg.width)

    def pos_for_grid(self, hp: int, wp: int) -> Tensor:
        """Learned position grid, bilinearly resized to (hp, wp) patch layout."""
        grid = T.bilinear_resize(self.pos, hp, wp)
        return T.transpose(T.reshape(grid, (self.cfg.width, hp * wp)), (1, 0))

    def __call__(self, image: Tensor) -> tuple[Tensor, tuple[int, int]]:
        """(3, H, W) image -> ((H/32)*(W/32), out_channels) tokens + grid shape."""
        c, h, w = image.shape
        check_dims(h, w)
        p = self.cfg.patch_size
        r = self.cfg.shuffle_factor
        hp, wp = h // p, w // p
        x = T.pixel_unshuffle(T.reshape(image, (1, c, h, w)), p)  # (1, 3p², hp, wp)
        x = T.transpose(T.reshape(x, (3 * p * p, hp * wp)), (1, 0))
        x = T.add(self.proj(x), self.pos_for_grid(hp, wp))
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        # merge r x r patch neighborhoods into single tokens of r²-fold width
        grid = T.reshape(T.transpose(x, (1, 0)), (1, self.cfg.width, hp, wp))
        merged = T.pixel_unshuffle(grid, r)  # (1, width r², hp/r, wp/r)
        hg, wg = hp // r, wp // r
        tokens = T.transpose(T.reshape(merged, (self.cfg.out_channels, hg * wg)), (1, 0))
        return tokens, (hg, wg)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = collect_params({f"{prefix}.proj": self.proj, f"{prefix}.norm": self.norm})
        out[f"{prefix}.pos"] = self.pos
        for i, blk in enumerate(self.blocks):
            out.update(blk.params(f"{prefix}.block{i}"))
        return out


@dataclass
class GenAEConfig:
    latent_channels: int = 16
    enc_channels: tuple[int, ...] = (48, 96, 96, 96)  # between input 3 and latent
    dec_channels: tuple[int, ...] = (64, 64, 48, 32, 16)  # after each 2x upsample


class ChannelNorm:
    """RMS normalization over the channel axis of a (1, C, H, W) map."""

    def __init__(self, channels: int):
        self.gain = T.param(np.ones(channels))

    def __call__(self, x: Tensor) -> Tensor:
        _, c, h, w = x.shape
        flat = T.transpose(T.reshape(x, (c, h * w)), (1, 0))
        normed = T.rms_norm(flat, self.gain)
        return T.reshape(T.transpose(normed, (1, 0)), (1, c, h, w))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain}


class GenAutoencoder:
    """32x spatial-compression autoencoder supplying generation latents.

    Encoder: five stride-2 convs (2^5 = 32). Decoder climbs back up in five
    sub-pixel steps: a conv to 4x the target channels, a 2x pixel shuffle,
    and a refinement conv (omitted at full resolution). The output layer is
    linear, values clipped only at PNG rasterization. Hidden convs carry a
    channel norm so the deep stack trains from scratch. After
    ``pretrain_autoencoder`` the weights are frozen.
    """

    def __init__(self, cfg: GenAEConfig, rng: np.random.Generator):
        self.cfg = cfg

        def conv(a, b, stride=1):
            return Conv(rng, a, b, k=3, stride=stride, padding=1,
                        std=math.sqrt(2.0 / (a * 9)))

        chain = (3,) + cfg.enc_channels + (cfg.latent_channels,)
        self.enc = [conv(a, b, 2) for a, b in zip(chain[:-1], chain[1:])]
        self.enc_norms = [ChannelNorm(c) for c in chain[1:-1]]
        dchain = (cfg.latent_channels,) + cfg.dec_channels
        self.dec_up = [conv(a, 4 * b) for a, b in zip(dchain[:-1], dchain[1:])]
        self.up_norms = [ChannelNorm(c) for c in dchain[1:]]
        self.dec_refine = [conv(b, b) for b in dchain[1:-1]]
        self.refine_norms = [ChannelNorm(c) for c in dchain[1:-1]]
        self.out = Conv(rng, dchain[-1], 3, k=3, stride=1, padding=1)
        self.frozen = False

    @property
    def latent_channels(self) -> int:
        return self.cfg.latent_channels

    def encode(self, image: Tensor) -> Tensor:
        """(3, H, W) -> (C_gen, H/32, W/32) latent grid."""
        c, h, w = image.shape
        check_dims(h, w)
        x = T.reshape(image, (1, c, h, w))
        for i, conv in enumerate(self.enc):
            x = conv(x)
            if i < len(self.enc) - 1:
                x = T.silu(self.enc_norms[i](x))
        return T.reshape(x, x.shape[1:])

    def decode(self, latent: Tensor) -> Tensor:
        """(C_gen, h, w) latent -> (3, 32h, 32w) image."""
        if latent.shape[0] != self.latent_channels:
            raise ValueError(
                f"latent has {latent.shape[0]} channels, decoder expects {self.latent_channels}"
            )
        c, h, w = latent.shape
        x = T.reshape(latent, (1, c, h, w))
        for i, up in enumerate(self.dec_up):
            x = T.silu(self.up_norms[i](T.pixel_shuffle(up(x), 2)))
            if i < len(self.dec_refine):
                x = T.silu(self.refine_norms[i](self.dec_refine[i](x)))
        x = self.out(x)
        return T.reshape(x, x.shape[1:])

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, conv in enumerate(self.enc):
            out.update(conv.params(f"{prefix}.enc{i}"))
        for i, norm in enumerate(self.enc_norms):
            out.update(norm.params(f"{prefix}.enc_norm{i}"))
        for i, conv in enumerate(self.dec_up):
            out.update(conv.params(f"{prefix}.dec{i}.up"))
        for i, norm in enumerate(self.up_norms):
            out.update(norm.params(f"{prefix}.dec{i}.up_norm"))
        for i, conv in enumerate(self.dec_refine):
            out.update(conv.params(f"{prefix}.dec{i}.refine"))
        for i, norm in enumerate(self.refine_norms):
            out.update(norm.params(f"{prefix}.dec{i}.refine_norm"))
        out.update(self.out.params(f"{prefix}.out"))
        return out


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [-1, 1] images (peak range 2)."""
    err = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if err == 0:
        return float("inf")
    return 10.0 * math.log10(4.0 / err)


def _as_image(arr: np.ndarray) -> np.ndarray:
    """Accept uint8-quantized images (bulk staging) alongside float arrays."""
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 127.5 - 1.0
    return arr


def pretrain_autoencoder(
    ae: GenAutoencoder,
    images: list[np.ndarray],
    steps: int = 1500,
    batch_size: int = 4,
    lr: float = 3e-3,
    seed: int = 0,
    log=None,
) -> dict:
    """Train the autoencoder on reconstruction MSE, then freeze it.

    Returns a summary with final PSNR on the last 10% of ``images`` (held out
    from training) and the corpus-mean-baseline MSE comparison.
    """
    n_holdout = max(1, len(images) // 10)
    train, held = images[:-n_holdout], [_as_image(x) for x in images[-n_holdout:]]
    params = ae.params("gen_ae")
    opt = AdamW(params, lr=lr)
    rng = np.random.default_rng(seed)
    first_losses: list[float] = []
    for step in range(steps):
        opt.lr = lr_at(step, steps, lr, "cosine")
        idx = rng.integers(0, len(train), size=batch_size)
        opt.zero_grad()
        total = 0.0
        for i in idx:
            img = Tensor(_as_image(train[i]))
            loss = T.scale(T.mse(ae.decode(ae.encode(img)), img), 1.0 / batch_size)
            loss.backward()
            total += loss.item() * batch_size
        opt.step()
        mean_loss = total / batch_size
        if step < 100:
            first_losses.append(mean_loss)
        if log is not None and step % 50 == 0:
            log(step, mean_loss)
    if len(first_losses) >= 100 and first_losses[-1] >= first_losses[0]:
        warnings.warn("autoencoder reconstruction loss did not decrease over the first 100 steps")
    ae.frozen = True

    with T.no_grad():
        recon_mse = []
        for img in held:
            out = ae.decode(ae.encode(Tensor(img))).data
            recon_mse.append(float(np.mean((out - img) ** 2)))
    # constant-color predictor; images span several resolutions so the
    # baseline is per-channel rather than per-pixel
    mean_color = np.mean([_as_image(img).mean(axis=(1, 2)) for img in train], axis=0)
    baseline_mse = float(np.mean(
        [np.mean((img - mean_color[:, None, None]) ** 2) for img in held]))
    final_mse = float(np.mean(recon_mse))
    return {
        "holdout_mse": final_mse,
        "holdout_psnr": 10.0 * math.log10(4.0 / final_mse) if final_mse > 0 else float("inf"),
        "baseline_mse": baseline_mse,
    }


def latent_channel_scale(ae: GenAutoencoder, images: list[np.ndarray]) -> np.ndarray:
    """Per-channel 1/std of AE latents over a corpus sample.

    Flow matching runs on latents multiplied by this scale so every channel
    has roughly unit variance; decoding divides it back out.
    """
    with T.no_grad():
        feats = [ae.encode(Tensor(img)).data.reshape(ae.latent_channels, -1) for img in images]
    all_vals = np.concatenate(feats, axis=1)
    std = all_vals.std(axis=1)
    return 1.0 / np.maximum(std, 1e-6)
