"""
Where the token budget goes
===========================

Both visual encoders reduce an image by a factor of 32 per side, so a
(H, W) image always becomes a (H/32, W/32) token grid. Fusing the two
encoder outputs along the channel axis keeps the grid size unchanged,
which is the whole trick: two views of the image, one sequence cost.

A pipeline that appended the second encoder's tokens instead of fusing
them would pay for the grid twice. Editing pays for a reference image
plus the generation grid, so the naive layout costs 4x the grid there
(two images, two encoders each) against 2x for the fused layout.
"""

import time

from tinyumm.fusion import token_budget

start = time.perf_counter()

print("task  resolution   grid      fused  unfused  saved")
for task in ("t2i", "edit"):
    for res in (256, 512, 1024):
        b = token_budget(task, res)
        h, w = b["resolution"]
        print(f"{task:<5} {res}x{res:<7} {h // 32:>3}x{w // 32:<4}"
              f" {b['fused_tokens']:>6} {b['baseline_tokens']:>8}"
              f"  {b['reduction']:.2f}x")

# the headline number: a 1024x1024 edit costs 1024 visual tokens,
# where the unfused layout would spend 5120
b = token_budget("edit", 1024)
print()
print(f"1024px edit: {b['fused_tokens']} tokens, baseline {b['baseline_tokens']},"
      f" reduction {b['reduction']:.2f}x")
print(f"(computed in {time.perf_counter() - start:.3f}s, no model needed)")

# non-square inputs work as long as both sides are multiples of 32
b = token_budget("t2i", (64, 128))
print(f"64x128 t2i: grid 2x4, {b['fused_tokens']} tokens")
