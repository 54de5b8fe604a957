"""Deep-supervised hybrid loss.

Mask side outputs and the fused mask are each scored with BCE (pixel level),
SSIM (patch level) and soft IoU (map level); every image-decoder side output
is scored with SSIM and L1.  The weighted sum of all terms is the training
objective, itemized in a :class:`LossReport`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError, ValidationError

BCE_EPS = 1e-7
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_same_shape(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")


def bce_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    _check_same_shape(pred, target)
    p = pred.clamp(eps, 1 - eps)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same_shape(pred, target)
    return (pred - target).abs().mean()


def iou_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - soft IoU per sample of an (N, C, H, W) batch, averaged over N.

    Inputs with fewer than four dims are one sample.  A sample whose prediction and target are both all-zero scores 0.
    """
    _check_same_shape(pred, target)
    if pred.ndim < 4:
        pred, target = pred[None], target[None]
    p = pred.flatten(1)
    t = target.flatten(1)
    inter = (p * t).sum(1)
    union = p.sum(1) + t.sum(1) - inter
    empty = union <= 0
    iou = torch.where(empty, torch.ones_like(union), inter / torch.where(empty, torch.ones_like(union), union))
    return (1 - iou).mean()


@lru_cache(maxsize=8)
def _gaussian_1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


@lru_cache(maxsize=64)
def _symmetric_index(n: int, pad: int) -> torch.Tensor:
    # half-sample symmetric extension (edge sample repeated), any n >= 1
    return torch.from_numpy(np.pad(np.arange(n), pad, mode="symmetric"))


def _blur(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Separable 'valid' Gaussian filter over (N, C, H, W), per channel."""
    c = x.shape[1]
    k = g.numel()
    x = F.conv2d(x, g.view(1, 1, k, 1).expand(c, 1, k, 1), groups=c)
    return F.conv2d(x, g.view(1, 1, 1, k).expand(c, 1, 1, k), groups=c)


def ssim_map(a: torch.Tensor, b: torch.Tensor, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
             c1: float = SSIM_C1, c2: float = SSIM_C2) -> torch.Tensor:
    """Per-pixel SSIM with a Gaussian window and symmetric border extension.

    Accepts (H, W), (C, H, W) or (N, C, H, W); channels are handled
    independently.  Constant images map to the closed-form constant value
    at every pixel, borders included.
    """
    _check_same_shape(a, b)
    if a.ndim < 2 or a.ndim > 4:
        raise ShapeError(f"expected 2-4 dims, got {a.ndim}")
    if a.shape[-1] < 1 or a.shape[-2] < 1:
        raise ValidationError(f"empty image of shape {tuple(a.shape)}")
    shape = a.shape
    lead = (1,) * (4 - a.ndim)
    a = a.reshape(*lead, *shape)
    b = b.reshape(*lead, *shape)
    pad = window // 2
    iy = _symmetric_index(a.shape[-2], pad).to(a.device)
    ix = _symmetric_index(a.shape[-1], pad).to(a.device)
    g = torch.as_tensor(_gaussian_1d(window, sigma), dtype=a.dtype, device=a.device)

    def ext(x):
        return x.index_select(-2, iy).index_select(-1, ix)

    stacked = ext(torch.cat([a, b, a * a, b * b, a * b], dim=1))
    mu_a, mu_b, e_aa, e_bb, e_ab = _blur(stacked, g).chunk(5, dim=1)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return (num / den).reshape(shape)


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM over all pixels and channels (per-batch mean if batched)."""
    return ssim_map(a, b).mean()


def ssim_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return 1 - ssim(pred, target)


@dataclass
class LossWeights:
    # one weight per mask side output, deepest first
    mask_stage: tuple[float, ...] = (0.5, 1.0, 1.0, 1.0, 1.0, 1.0)
    fuse: float = 1.0
    image: float = 1.0
    bce: float = 1.0
    ssim: float = 1.0
    iou: float = 1.0
    l1: float = 1.0

    def __post_init__(self):
        self.mask_stage = tuple(float(w) for w in self.mask_stage)
        vals = list(self.mask_stage) + [self.fuse, self.image, self.bce, self.ssim, self.iou, self.l1]
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ConfigError(f"loss weights must be finite and >= 0: {self}")

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


@dataclass
class LossReport:
    """Itemized loss.  Terms are 0-dim tensors (``total`` keeps its graph)."""

    per_stage_mask: list[dict] = field(default_factory=list)
    fused_mask: dict = field(default_factory=dict)
    image: list[dict] = field(default_factory=list)
    mask_total: torch.Tensor | float = 0.0
    image_total: torch.Tensor | float = 0.0
    total: torch.Tensor | float = 0.0

    def items(self):
        """Yield ``(name, value)`` for every unweighted term."""
        for i, d in enumerate(self.per_stage_mask):
            for k, v in d.items():
                yield f"mask{i}.{k}", v
        for k, v in self.fused_mask.items():
            yield f"fuse.{k}", v
        for i, d in enumerate(self.image):
            for k, v in d.items():
                yield f"image{i}.{k}", v

    def to_dict(self) -> dict:
        def f(v):
            return float(v.detach()) if torch.is_tensor(v) else float(v)

        return {
            "per_stage_mask": [{k: f(v) for k, v in d.items()} for d in self.per_stage_mask],
            "fused_mask": {k: f(v) for k, v in self.fused_mask.items()},
            "image": [{k: f(v) for k, v in d.items()} for d in self.image],
            "mask_total": f(self.mask_total),
            "image_total": f(self.image_total),
            "total": f(self.total),
        }

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **self.to_dict()}, sort_keys=True)


def recompute_total(report: dict, weights: LossWeights) -> float:
    """Weighted total from an itemized report dict (e.g. a loss-log line)."""
    w = weights
    total = 0.0
    for ws, d in zip(w.mask_stage, report["per_stage_mask"]):
        total += ws * (w.bce * d["bce"] + w.ssim * d["ssim"] + w.iou * d["iou"])
    d = report["fused_mask"]
    total += w.fuse * (w.bce * d["bce"] + w.ssim * d["ssim"] + w.iou * d["iou"])
    total += w.image * sum(w.ssim * d["ssim"] + w.l1 * d["l1"] for d in report["image"])
    return total


def _mask_terms(pred, gt):
    return {"bce": bce_loss(pred, gt), "ssim": ssim_loss(pred, gt), "iou": iou_loss(pred, gt)}


def _mask_sum(terms, w: LossWeights):
    return w.bce * terms["bce"] + w.ssim * terms["ssim"] + w.iou * terms["iou"]


def mask_loss(outputs, mask_gt: torch.Tensor, weights: LossWeights) -> LossReport:
    if len(outputs.mask_side) != len(weights.mask_stage):
        raise ConfigError(
            f"{len(outputs.mask_side)} mask side outputs but {len(weights.mask_stage)} stage weights"
        )
    report = LossReport()
    mask_total = 0.0
    for w_stage, side in zip(weights.mask_stage, outputs.mask_side):
        terms = _mask_terms(side, mask_gt)
        report.per_stage_mask.append(terms)
        mask_total = mask_total + w_stage * _mask_sum(terms, weights)
    report.fused_mask = _mask_terms(outputs.mask_fused, mask_gt)
    mask_total = mask_total + weights.fuse * _mask_sum(report.fused_mask, weights)
    report.mask_total = mask_total
    report.total = mask_total
    return report


def image_loss(outputs, image_gt: torch.Tensor, weights: LossWeights) -> LossReport:
    report = LossReport()
    image_total = 0.0
    for side in outputs.image_side:
        terms = {"ssim": ssim_loss(side, image_gt), "l1": l1_loss(side, image_gt)}
        report.image.append(terms)
        image_total = image_total + weights.ssim * terms["ssim"] + weights.l1 * terms["l1"]
    report.image_total = weights.image * image_total
    report.total = report.image_total
    return report


def total_loss(outputs, mask_gt: torch.Tensor, image_gt: torch.Tensor, weights: LossWeights) -> LossReport:
    m = mask_loss(outputs, mask_gt, weights)
    i = image_loss(outputs, image_gt, weights)
    return LossReport(
        per_stage_mask=m.per_stage_mask,
        fused_mask=m.fused_mask,
        image=i.image,
        mask_total=m.mask_total,
        image_total=i.image_total,
        total=m.mask_total + i.image_total,
    )
