"""
Three kinds of mask loss
========================

Binary cross-entropy judges every pixel on its own, SSIM judges local
patches and soft IoU judges the map as a whole.  Moving the same amount of
error around shows the difference.
"""

import torch

from demark.losses import bce_loss, iou_loss, ssim_loss

target = torch.zeros(1, 1, 32, 32, dtype=torch.float64)
target[..., 8:24, 8:24] = 1.0

# %%
# Concentrated versus spread error
# --------------------------------
# Both predictions remove 16 units of foreground mass.
spread = target.clone()
spread[..., 8:24, 8:24] = 0.9375
concentrated = target.clone()
concentrated[..., 8:24, 8:9] = 0.0

for name, pred in (("spread", spread), ("concentrated", concentrated)):
    print(f"{name:>12}: bce {bce_loss(pred, target):.4f}  ssim {ssim_loss(pred, target):.4f}  "
          f"iou {iou_loss(pred, target):.4f}")

# IoU only sees totals, so both score the same.  BCE punishes the fully wrong
# pixels far more.  SSIM reacts to the sharp structural break.

# %%
# Gradients
# ---------
# All three losses are differentiable, so they can be summed and trained on.
pred = torch.full_like(target, 0.5, requires_grad=True)
(bce_loss(pred, target) + ssim_loss(pred, target) + iou_loss(pred, target)).backward()
print("gradient inside / outside the square:", float(pred.grad[0, 0, 16, 16]), float(pred.grad[0, 0, 2, 2]))
