"""Visible-watermark removal with a two-branch nested U-network.

Modules:

- ``synthgen``: text-watermark synthesis and on-disk datasets
- ``model``: residual U-blocks and the mask/image network
- ``losses``: pixel, patch and map level terms and the deep-supervised total
- ``reconstruct``: inference and mask-guided compositing
- ``metrics``: MAE, IoU, SSIM, PSNR and dataset evaluation
- ``trainer``: optimization loop, checkpoints and the per-step loss log
"""

from .config import RunConfig, TrainConfig, load_config
from .errors import (ConfigError, DegenerateSpecError, DemarkError, InputError, LoadError, NonFiniteLossError,
                     ShapeError, ValidationError)
from .losses import LossReport, LossWeights, bce_loss, iou_loss, l1_loss, ssim, ssim_loss, total_loss
from .metrics import EvalConfig, MetricReport, evaluate, mae, miou, psnr, ssim_metric
from .model import RSU, AdvancedUnet, ModelOutputs, NetConfig, RsuConfig, build_model
from .reconstruct import ReconstructionResult, composite_final, infer, infer_paths
from .synthgen import (GeneratorConfig, WatermarkSample, WatermarkSpec, composite, generate_dataset,
                       generate_sample, load_sample, read_manifest, render_watermark)
from .trainer import TrainState, fit, load_model, save_checkpoint, train_step

__version__ = "0.1.0"
