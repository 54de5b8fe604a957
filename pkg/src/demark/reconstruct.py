"""Final image assembly and batch inference.

The de-watermarked image keeps the corrupted input wherever the predicted
mask is zero and takes the network's reconstruction where it is one::

    final = (1 - mask) * corrupted + mask * reconstructed
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ShapeError, ValidationError


@dataclass
class ReconstructionResult:
    final_image: torch.Tensor  # (3, H, W)
    predicted_mask: torch.Tensor  # (1, H, W)
    reconstructed: torch.Tensor  # (3, H, W)


def composite_final(corrupted, reconstructed, mask):
    """Blend per pixel; ``mask`` is single-channel and broadcast over color.

    Accepts numpy arrays or torch tensors, batched or not.  Where the mask is
    exactly 0 the corrupted pixel passes through bitwise.
    """
    if tuple(corrupted.shape) != tuple(reconstructed.shape):
        raise ShapeError(
            f"corrupted {tuple(corrupted.shape)} and reconstructed {tuple(reconstructed.shape)} differ"
        )
    if mask.ndim != corrupted.ndim or mask.shape[-3] != 1 or tuple(mask.shape[-2:]) != tuple(corrupted.shape[-2:]):
        raise ShapeError(
            f"mask {tuple(mask.shape)} must be single-channel with the image's spatial shape "
            f"{tuple(corrupted.shape[-2:])}"
        )
    return (1 - mask) * corrupted + mask * reconstructed


def parse_mask_mode(mode) -> float | None:
    """``"soft"``/None -> None; ``"threshold"`` -> 0.5; a number -> that threshold."""
    if mode is None or mode == "soft":
        return None
    if mode == "threshold":
        return 0.5
    t = float(mode)
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"mask threshold must lie in [0, 1], got {t}")
    return t


@torch.no_grad()
def infer(model, corrupted_batch: torch.Tensor, mask_mode="soft") -> list[ReconstructionResult]:
    """Run the network and assemble final images.

    The fused mask is the blending mask.  ``mask_mode`` is ``"soft"`` (use
    probabilities directly), ``"threshold"`` (binarize at 0.5) or a float
    threshold.
    """
    threshold = parse_mask_mode(mask_mode)
    was_training = getattr(model, "training", False)
    if was_training:
        model.eval()
    try:
        out = model(corrupted_batch)
    finally:
        if was_training:
            model.train()
    mask = out.mask_fused
    if threshold is not None:
        mask = (mask > threshold).to(corrupted_batch.dtype)
    rec = out.image_final
    final = composite_final(corrupted_batch, rec, mask)
    return [ReconstructionResult(final[i], mask[i], rec[i]) for i in range(final.shape[0])]


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}


def _load_rgb(path: Path, divisor: int) -> tuple[torch.Tensor, tuple[int, int]]:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    h, w = arr.shape[:2]
    # pad bottom/right by edge replication up to the next valid size
    ph, pw = -h % divisor, -w % divisor
    if ph or pw:
        arr = np.pad(arr, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return torch.from_numpy(arr.transpose(2, 0, 1).copy()), (h, w)


def _save(path: Path, chw: torch.Tensor):
    arr = np.clip(np.rint(chw.detach().cpu().numpy() * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], "L").save(path, format="PNG")
    else:
        Image.fromarray(arr.transpose(1, 2, 0), "RGB").save(path, format="PNG")


def infer_paths(model, inputs, out_dir, mask_mode="soft", save_mask=False) -> list[Path]:
    """Run inference on an image file or directory; write PNGs named after the inputs."""
    src = Path(inputs)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    elif src.is_file():
        files = [src]
    else:
        raise ValidationError(f"input {src} does not exist")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    divisor = model.config.divisor
    written = []
    for p in files:
        x, (h, w) = _load_rgb(p, divisor)
        res = infer(model, x[None], mask_mode)[0]
        dst = out_dir / (p.stem + ".png")
        _save(dst, res.final_image[:, :h, :w])
        written.append(dst)
        if save_mask:
            _save(out_dir / (p.stem + "_mask.png"), res.predicted_mask[:, :h, :w])
    return written
