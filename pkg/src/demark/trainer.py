"""Training loop: data batching, optimizer steps, checkpoints and the loss log.

Batch composition is a pure function of (seed, step): each epoch draws a
fresh permutation from ``SeedSequence([seed, epoch])`` and augmentation flips
come from ``SeedSequence([seed, step, 1])``.  Resuming from a checkpoint
therefore replays exactly the batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .config import RunConfig, TrainConfig
from .errors import DemarkError, InputError, LoadError, NonFiniteLossError
from .losses import LossReport, LossWeights, total_loss
from .model import AdvancedUnet, NetConfig, build_model
from .synthgen import GeneratorConfig, child_seed, fit_background, generate_sample, list_backgrounds, load_sample, read_manifest

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "demark-checkpoint"
CHECKPOINT_VERSION = 1
LOSS_LOG = "loss_log.jsonl"


class Batch(NamedTuple):
    corrupted: torch.Tensor
    original: torch.Tensor
    mask: torch.Tensor


def collate(samples, device="cpu") -> Batch:
    def stack(attr):
        return torch.tensor(np.stack([getattr(s, attr) for s in samples]), dtype=torch.float32, device=device)

    return Batch(stack("corrupted"), stack("original"), stack("mask"))


def set_deterministic(enabled: bool = True):
    torch.use_deterministic_algorithms(enabled)
    torch.backends.cudnn.deterministic = enabled
    torch.backends.cudnn.benchmark = not enabled


class DiskDataset:
    """Samples from a generated dataset directory, cached after first read."""

    def __init__(self, root, cache=True):
        self.root = Path(root)
        self.entries = read_manifest(self.root)["samples"]
        if not self.entries:
            raise InputError(f"dataset {self.root} has no samples")
        self._cache = {} if cache else None

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        s = load_sample(self.root, self.entries[i])
        if self._cache is not None:
            self._cache[i] = s
        return s


class OnTheFlyDataset:
    """Synthesizes sample ``i`` from ``child_seed(seed, i)`` on every access."""

    def __init__(self, backgrounds_dir, config: GeneratorConfig, seed: int, size: int):
        self.backgrounds = list_backgrounds(backgrounds_dir)
        self.config = config
        self.seed = seed
        self.size = size

    def __len__(self):
        return self.size

    def __getitem__(self, i):
        from PIL import Image

        s = child_seed(self.seed, i)
        path = self.backgrounds[int(np.random.default_rng(s).integers(len(self.backgrounds)))]
        with Image.open(path) as im:
            bg = fit_background(im, self.config.image_hw)
        return generate_sample(bg, self.config, s)


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> list[int]:
    """Indices of the batch used at ``step`` (epochs are seeded permutations)."""
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n)
        perm = np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(int(i) for i in perm[offset:offset + take])
    return out


def augment(batch: Batch, seed: int, step: int) -> Batch:
    flips = np.random.default_rng(np.random.SeedSequence([seed, step, 1])).random(batch.corrupted.shape[0]) < 0.5
    if not flips.any():
        return batch
    idx = torch.from_numpy(flips)

    def flip(x):
        x = x.clone()
        x[idx] = x[idx].flip(-1)
        return x

    return Batch(*(flip(t) for t in batch))


@dataclass
class TrainState:
    model: AdvancedUnet
    optimizer: torch.optim.Optimizer
    step: int = 0
    best_val_total: float = math.inf

    @property
    def net_config(self) -> NetConfig:
        return self.model.config


def make_optimizer(model, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas,
                                weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def init_state(net_config: NetConfig, cfg: TrainConfig) -> TrainState:
    model = build_model(net_config, cfg.seed).to(cfg.device)
    return TrainState(model=model, optimizer=make_optimizer(model, cfg))


def _check_finite(report: LossReport):
    for name, value in report.items():
        v = float(value.detach())
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
    v = float(report.total.detach())
    if not math.isfinite(v):
        raise NonFiniteLossError("total", v)


def train_step(state: TrainState, batch, weights: LossWeights, grad_clip: float | None = None):
    """One forward/backward/update.  ``batch`` is a :class:`Batch` or a list
    of samples.  Returns ``(state, report)`` with ``state.step`` advanced."""
    if not isinstance(batch, Batch):
        batch = collate(batch, next(state.model.parameters()).device)
    state.model.train()
    outputs = state.model(batch.corrupted)
    report = total_loss(outputs, batch.mask, batch.original, weights)
    _check_finite(report)
    state.optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), grad_clip)
    state.optimizer.step()
    state.step += 1
    return state, report


def save_checkpoint(path, state: TrainState, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "net_config": state.net_config.to_dict(),
        "step": state.step,
        "best_val_total": state.best_val_total,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "rng": torch.get_rng_state(),
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def read_checkpoint(path, device="cpu") -> dict:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"checkpoint {path} not found")
    try:
        payload = torch.load(path, map_location=device, weights_only=False)
    except Exception as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise LoadError(f"{path} is not a demark checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise LoadError(f"{path} has checkpoint version {payload.get('version')}, expected {CHECKPOINT_VERSION}")
    return payload


def load_model(path, device="cpu", net_config: NetConfig | None = None) -> AdvancedUnet:
    """Model from a checkpoint, in eval mode.  If ``net_config`` is given it
    must match the checkpoint's."""
    payload = read_checkpoint(path, device)
    saved = NetConfig.from_dict(payload["net_config"])
    if net_config is not None and net_config != saved:
        raise LoadError(f"checkpoint {path} was trained with a different network configuration")
    model = AdvancedUnet(saved).to(device)
    try:
        model.load_state_dict(payload["model"])
    except RuntimeError as exc:
        raise LoadError(f"checkpoint {path} does not match its network configuration: {exc}") from exc
    return model.eval()


def restore_state(path, cfg: TrainConfig, net_config: NetConfig | None = None) -> TrainState:
    payload = read_checkpoint(path, cfg.device)
    model = load_model(path, cfg.device, net_config)
    state = TrainState(model=model, optimizer=make_optimizer(model, cfg), step=int(payload["step"]),
                       best_val_total=float(payload["best_val_total"]))
    state.optimizer.load_state_dict(payload["optimizer"])
    torch.set_rng_state(payload["rng"])
    return state


@torch.no_grad()
def validation_loss(model, dataset, weights: LossWeights, batch_size: int, device="cpu") -> float:
    model.eval()
    totals, counts = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        samples = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
        b = collate(samples, device)
        report = total_loss(model(b.corrupted), b.mask, b.original, weights)
        totals += float(report.total) * len(samples)
        counts += len(samples)
    model.train()
    return totals / counts


def _trim_log(path: Path, resume_step: int):
    """Drop log lines the resumed run will write again.  Line ``step=k``
    records the update taking the state from step k to k+1."""
    if not path.is_file():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["step"] < resume_step]
    path.write_text("".join(ln + "\n" for ln in keep))


def make_dataset(cfg: RunConfig):
    t = cfg.train
    if t.backgrounds_dir:
        return OnTheFlyDataset(t.backgrounds_dir, cfg.generator, t.seed, t.on_the_fly_size)
    if not t.dataset_dir:
        raise InputError("train.dataset_dir is not set")
    return DiskDataset(t.dataset_dir)


def fit(cfg: RunConfig, resume=None) -> Path:
    """Train to ``cfg.train.max_steps``; return the final checkpoint path.

    Writes ``out_dir/checkpoints/step_NNNNNNN.pt`` every ``checkpoint_every``
    steps and at the end, ``out_dir/best.pt`` when a validation set improves,
    and one JSON line per step to ``out_dir/loss_log.jsonl``.
    """
    t = cfg.train
    net_config = cfg.net_config()
    dataset = make_dataset(cfg)
    val = DiskDataset(t.val_dir) if t.val_dir else None
    set_deterministic(t.deterministic)
    out_dir = Path(t.out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(cfg.to_yaml())
    log_path = out_dir / LOSS_LOG

    if resume is not None:
        state = restore_state(resume, t, net_config)
        _trim_log(log_path, state.step)
    else:
        state = init_state(net_config, t)
        if log_path.exists():
            log_path.unlink()

    last_good = None

    def checkpoint():
        nonlocal last_good
        path = ckpt_dir / f"step_{state.step:07d}.pt"
        try:
            save_checkpoint(path, state)
        except OSError as exc:
            raise DemarkError(f"failed to write {path} ({exc}); last good checkpoint: {last_good}") from exc
        last_good = path
        return path

    if state.step == 0:
        checkpoint()
    pool = ThreadPoolExecutor(t.workers) if t.workers > 0 else nullcontext()
    with open(log_path, "a") as log_file, pool:
        fetch = pool.map if t.workers > 0 else map
        while state.step < t.max_steps:
            idx = batch_indices(state.step, len(dataset), t.batch_size, t.seed)
            batch = collate(list(fetch(dataset.__getitem__, idx)), t.device)
            if t.augment:
                batch = augment(batch, t.seed, state.step)
            step = state.step
            try:
                state, report = train_step(state, batch, cfg.loss, t.grad_clip)
            except NonFiniteLossError:
                log.error("aborting at step %d; last good checkpoint: %s", step, last_good)
                raise
            log_file.write(report.to_json(step=step) + "\n")
            log_file.flush()
            if state.step % t.checkpoint_every == 0 or state.step == t.max_steps:
                if val is not None:
                    v = validation_loss(state.model, val, cfg.loss, t.batch_size, t.device)
                    if v < state.best_val_total:
                        state.best_val_total = v
                        save_checkpoint(out_dir / "best.pt", state)
                checkpoint()
    return last_good if last_good is not None else ckpt_dir / f"step_{state.step:07d}.pt"


def read_loss_log(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / LOSS_LOG
    return [json.loads(ln) for ln in path.read_text().splitlines() if ln]


def stage_curves(records: list[dict], weights: LossWeights | None = None) -> np.ndarray:
    """(steps, stages) array of per-stage mask losses, deepest stage first."""
    w = weights or LossWeights()
    return np.array([
        [w.bce * d["bce"] + w.ssim * d["ssim"] + w.iou * d["iou"] for d in r["per_stage_mask"]]
        for r in records
    ])


def fluctuation(curve: np.ndarray, window: int = 25) -> np.ndarray:
    """Variance of a loss curve about its centered moving average.

    Works column-wise on 2-D input.  Measures step-to-step fluctuation with
    the downward training trend removed.
    """
    curve = np.asarray(curve, dtype=np.float64)
    if curve.ndim == 1:
        curve = curve[:, None]
    if curve.shape[0] < window:
        raise ValueError(f"need at least {window} steps, got {curve.shape[0]}")
    kernel = np.ones(window) / window
    half = window // 2
    out = []
    for col in curve.T:
        trend = np.convolve(col, kernel, mode="valid")
        out.append(np.var(col[half:half + trend.size] - trend))
    return np.array(out)
