"""
Two encoders, one token grid
============================

The understanding encoder (patchify, pixel-shuffle merge, small ViT) and the
generation autoencoder (five stride-2 convs) reduce an image by 32x per side
through entirely different routes. Because the reductions agree, their
outputs land on the same (H/32, W/32) grid and can be fused channel-wise
into a single token stream.
"""

import numpy as np

from tinyumm.encoders import GenAutoencoder, GenAEConfig, UndEncoder, UndEncoderConfig, psnr
from tinyumm.fusion import channel_concat
from tinyumm.tensor import Tensor
from tinyumm.toybench.scenes import SceneObject, SceneSpec, render_scene

rng = np.random.default_rng(0)
und = UndEncoder(UndEncoderConfig(), rng)
ae = GenAutoencoder(GenAEConfig(), rng)

spec = SceneSpec(objects=(SceneObject("circle", "red", 1, 1),
                          SceneObject("square", "blue", 2, 3)),
                 height=64, width=128)
image = render_scene(spec)
print(f"scene: {spec.objects[0].color} {spec.objects[0].shape} and "
      f"{spec.objects[1].color} {spec.objects[1].shape}, image {image.shape}")

# route 1: patch embed at 16px, merge 2x2 neighborhoods, transformer
und_tokens, grid_u = und(Tensor(image))
# route 2: convolutional compression to a latent picture
latents = ae.encode(Tensor(image))

c, h, w = latents.shape
gen_tokens = Tensor(latents.data.reshape(c, h * w).T.copy())
print(f"und encoder: {und_tokens.shape} tokens on grid {grid_u}")
print(f"gen encoder: latents {latents.shape} -> {gen_tokens.shape} tokens on grid {(h, w)}")
assert grid_u == (h, w) == (image.shape[1] // 32, image.shape[2] // 32)

fused = channel_concat(und_tokens, gen_tokens, grid_u)
print(f"fused: {fused.shape} ({und_tokens.shape[1]} und + {gen_tokens.shape[1]} gen channels)")

# the same holds at every legal resolution, which is what keeps token
# counts resolution-predictable
for hw in ((64, 64), (96, 96), (32, 160)):
    img = rng.uniform(-1, 1, size=(3, *hw))
    _, g1 = und(Tensor(img))
    z = ae.encode(Tensor(img))
    assert g1 == (z.shape[1], z.shape[2]) == (hw[0] // 32, hw[1] // 32)
    print(f"  {hw[0]}x{hw[1]} -> grid {g1}, {g1[0] * g1[1]} fused tokens")

# untrained, the autoencoder reconstructs noise; after pretraining (see
# tinyumm.encoders.pretrain_autoencoder) the same weights reach 30+ dB
recon = ae.decode(ae.encode(Tensor(image)))
print(f"untrained AE reconstruction: {psnr(recon.data, image):.1f} dB "
      f"(pretraining is what earns the real number)")
