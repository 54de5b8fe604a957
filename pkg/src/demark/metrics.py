"""Evaluation metrics: MAE and IoU on the predicted mask, SSIM and PSNR on
the final image, aggregated over a generated dataset."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import InputError, ShapeError, ValidationError
from .losses import ssim_loss
from .reconstruct import infer
from .synthgen import load_sample, read_manifest


def _as64(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x.detach().to(torch.float64)
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def _pair(a, b):
    a, b = _as64(a), _as64(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def mae(pred_mask, gt_mask) -> float:
    a, b = _pair(pred_mask, gt_mask)
    return float((a - b).abs().mean())


def miou(pred_mask, gt_mask, threshold: float = 0.5, mode: str = "foreground") -> float:
    """IoU of the binarized prediction (``pred > threshold``) for one sample.

    ``mode="foreground"`` scores the watermark class only; ``"two_class"``
    averages foreground and background IoU.  Two empty masks score 1.
    """
    a, b = _pair(pred_mask, gt_mask)
    p = a > threshold
    t = b > 0.5

    def iou(x, y):
        union = int((x | y).sum())
        return 1.0 if union == 0 else int((x & y).sum()) / union

    if mode == "foreground":
        return iou(p, t)
    if mode == "two_class":
        return 0.5 * (iou(p, t) + iou(~p, ~t))
    raise ValidationError(f"unknown miou mode {mode!r}")


def ssim_metric(a, b) -> float:
    """Mean windowed SSIM, defined as ``1 - ssim_loss`` so the two sum to 1
    exactly in float64."""
    a, b = _pair(a, b)
    return 1.0 - float(ssim_loss(a, b))


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs give ``math.inf``."""
    a, b = _pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


@dataclass
class EvalConfig:
    mask_mode: str = "soft"
    miou_threshold: float = 0.5
    miou_mode: str = "foreground"
    mask_ssim_binarized: bool = False
    batch_size: int = 4

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        return cls(**d)


@dataclass
class MetricReport:
    mae: float
    miou: float
    ssim: float
    psnr: float
    n_samples: int
    mask_ssim: float = float("nan")
    # samples with zero MSE are left out of the PSNR mean and counted here
    n_psnr_infinite: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and math.isinf(v):
                d[k] = "inf" if v > 0 else "-inf"
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


CSV_COLUMNS = ("index", "mae", "iou", "ssim", "psnr", "mask_ssim")


def aggregate(rows: list[dict]) -> MetricReport:
    if not rows:
        raise ValidationError("cannot aggregate an empty set of samples")
    finite = [r["psnr"] for r in rows if math.isfinite(r["psnr"])]
    return MetricReport(
        mae=float(np.mean([r["mae"] for r in rows])),
        miou=float(np.mean([r["iou"] for r in rows])),
        ssim=float(np.mean([r["ssim"] for r in rows])),
        psnr=float(np.mean(finite)) if finite else math.inf,
        n_samples=len(rows),
        mask_ssim=float(np.mean([r["mask_ssim"] for r in rows])),
        n_psnr_infinite=len(rows) - len(finite),
    )


def score_sample(index, result, mask_gt, original, config: EvalConfig) -> dict:
    pred = result.predicted_mask
    mask_for_ssim = (pred > config.miou_threshold).to(pred.dtype) if config.mask_ssim_binarized else pred
    return {
        "index": index,
        "mae": mae(pred, mask_gt),
        "iou": miou(pred, mask_gt, config.miou_threshold, config.miou_mode),
        "ssim": ssim_metric(result.final_image, original),
        "psnr": psnr(result.final_image, original),
        "mask_ssim": ssim_metric(mask_for_ssim, mask_gt),
    }


def write_csv(path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(float(r[k])) if k != "index" else r[k] for k in CSV_COLUMNS})


def evaluate(model, dataset_dir, config: EvalConfig | None = None, csv_path=None) -> MetricReport:
    """Score ``model`` on every sample of a generated dataset.

    ``model`` is anything callable on a (B, 3, H, W) batch that returns
    ``ModelOutputs``.
    """
    config = config or EvalConfig()
    manifest = read_manifest(dataset_dir)
    entries = manifest["samples"]
    root = Path(dataset_dir)
    missing = [f for e in entries for f in e["files"].values() if not (root / f).is_file()]
    if missing:
        raise InputError(f"dataset {root} is missing files: {', '.join(missing[:10])}"
                         + (" ..." if len(missing) > 10 else ""))
    if not entries:
        raise InputError(f"dataset {root} has no samples")
    rows = []
    for start in range(0, len(entries), config.batch_size):
        chunk = [load_sample(root, e) for e in entries[start:start + config.batch_size]]
        batch = torch.tensor(np.stack([s.corrupted for s in chunk]), dtype=torch.float32)
        results = infer(model, batch, config.mask_mode)
        for entry, sample, res in zip(entries[start:], chunk, results):
            # ground truth at the model's precision, so an exact prediction scores exactly
            mask_gt = torch.tensor(sample.mask, dtype=batch.dtype)
            original = torch.tensor(sample.original, dtype=batch.dtype)
            rows.append(score_sample(entry["index"], res, mask_gt, original, config))
    if csv_path is not None:
        write_csv(csv_path, rows)
    return aggregate(rows)
